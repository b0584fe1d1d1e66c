fn main() {
    std::process::exit(dreamid::cli::dispatch(std::env::args_os()));
}
