//! Command-line front end.
//!
//! Settings resolve as: command-line flag, then `--config` file, then the
//! built-in default.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ablation::{default_variants, run_ablation};
use crate::conditioning::{assemble_conditioning, load_templates, placeholder_form, PromptTemplate, DEFAULT_EDIT_TEMPLATES};
use crate::detect::{CropConfig, ToyDetector};
use crate::diffusion::sampler::{ddim_sample_batch, write_with_sidecar, SamplerConfig, Sidecar};
use crate::diffusion::DiffusionBackend;
use crate::encoder::M2Encoder;
use crate::evaluator::{cell_table, comparison_table, load_test_faces, prompt_slug, run_protocol, ProtocolConfig, Scorers, TestFace};
use crate::face::{render, FaceParams, RenderOpts};
use crate::image::Image;
use crate::rng::{self, derive_seed};
use crate::scoring::FaceSimilarity;
use crate::selfaug::{build_dataset, ingest_names_file, Builders, DatasetManifest, SelfAugConfig};
use crate::trainer::{checkpoint_identities, run_training, TrainConfig};
use crate::zoo::{Zoo, ZooRecipe};
use crate::{Error, Result};

/// Environment variable naming the directory of pre-trained models.
pub const HOME_ENV: &str = "DREAMID_HOME";
pub const DEFAULT_HOME: &str = ".dreamid";

pub mod exit {
    pub const OK: i32 = 0;
    pub const RUNTIME: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const MISSING_PLACEHOLDER: i32 = 3;
    pub const UNREADABLE_FACE: i32 = 4;
    pub const CHECKPOINT_MISMATCH: i32 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "dreamid", version, about = "Identity-preserving personalization for a toy latent diffusion model")]
pub struct Cli {
    /// Directory holding the pre-trained backend and scorers.
    #[arg(long, global = true, env = HOME_ENV, default_value = DEFAULT_HOME)]
    pub home: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the toy backend, face-ID model and joint embedder into the home directory.
    Pretrain(PretrainArgs),
    /// Render procedural test faces, one PNG per identity.
    RenderFaces(RenderFacesArgs),
    /// Build the self-augmented dataset and its manifest.
    BuildDataset(BuildDatasetArgs),
    /// Train the identity encoder.
    Train(TrainArgs),
    /// Generate images of a face from an `S*` prompt.
    Generate(GenerateArgs),
    /// Run the evaluation protocol.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every encoder variant of the ablation.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Celebrity names the backend learns, one per line.
    #[arg(long)]
    pub names: PathBuf,
    /// Optimisation steps of the backend.
    #[arg(long)]
    pub backend_steps: Option<usize>,
    #[arg(long)]
    pub face_id_steps: Option<usize>,
    #[arg(long)]
    pub clip_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RenderFacesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// File-name prefix; the identity id is `<prefix>-<index>`.
    #[arg(long, default_value = "test")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub names: PathBuf,
    /// Editing templates with `<celebrity-name>` or `S*`; the built-in set when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of triplets kept per prompt.
    #[arg(long)]
    pub keep: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub per_name: Option<usize>,
    #[arg(long)]
    pub per_pair: Option<usize>,
    /// Rendered identities of the reconstruction corpus.
    #[arg(long)]
    pub recon_identities: Option<usize>,
    /// TOML file with dataset settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

/// Sampler settings file shared by `generate` and `evaluate`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingFile {
    pub sampler: SamplerConfig,
    pub images_per_cell: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with a `[sampler]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl SamplerArgs {
    fn resolve(&self) -> Result<SamplingFile> {
        let mut file: SamplingFile = match &self.config {
            Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => SamplingFile::default(),
        };
        if let Some(s) = self.steps {
            file.sampler.steps = s;
        }
        if let Some(g) = self.guidance {
            file.sampler.guidance_scale = g;
        }
        if let Some(s) = self.seed {
            file.sampler.seed = s;
        }
        file.sampler.validate()?;
        Ok(file)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Photo of the face to personalise.
    #[arg(long)]
    pub face: PathBuf,
    /// Prompt with one `S*`, e.g. "S* as a police, looking at the camera".
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub num: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of test face PNGs, one identity per file.
    #[arg(long)]
    pub faces: PathBuf,
    /// Prompt templates with `S*`, one per line.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Report path (JSON); a table is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest whose self-augmented identities must not be test identities;
    /// defaults to the list recorded in the checkpoint.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also write every generated image here.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub images_per_cell: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub faces: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training configuration shared by all variants.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub images_per_cell: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

/// Exit code of a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => exit::USAGE,
        Error::Template(_) => exit::MISSING_PLACEHOLDER,
        Error::Image(_) => exit::UNREADABLE_FACE,
        Error::Checkpoint { .. } => exit::CHECKPOINT_MISMATCH,
        _ => exit::RUNTIME,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn load_zoo(home: &Path) -> Result<Zoo> {
    Zoo::load(home).map_err(|e| match e {
        Error::Io { .. } => Error::Config(format!(
            "no pre-trained models in {}; run `dreamid pretrain` or set {HOME_ENV}",
            home.display()
        )),
        other => other,
    })
}

/// Loads an encoder checkpoint and checks it against the backend.
fn load_encoder(path: &Path, backend: &dyn DiffusionBackend) -> Result<M2Encoder> {
    require(path, "checkpoint")?;
    let encoder = M2Encoder::load(path, false)?;
    encoder
        .check_text_dim(backend.text().text_dim())
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    Ok(encoder)
}

fn similarity<'a>(zoo: &'a Zoo, detector: &'a ToyDetector, crop: &CropConfig) -> FaceSimilarity<'a> {
    FaceSimilarity {
        scorer: &zoo.face_id,
        detector,
        crop: crop.clone(),
    }
}

fn load_prompts(path: &Path) -> Result<Vec<PromptTemplate>> {
    require(path, "prompt file")?;
    load_templates(path)?
        .iter()
        .map(|t| PromptTemplate::editing(placeholder_form(t)))
        .collect()
}

fn pretrain(home: &Path, a: &PretrainArgs) -> Result<()> {
    let names = ingest_names_file(&a.names)?;
    let mut recipe = ZooRecipe::new(names.names);
    if let Some(s) = a.backend_steps {
        recipe.backend.steps = s;
    }
    if let Some(s) = a.face_id_steps {
        recipe.face_id.steps = s;
    }
    if let Some(s) = a.clip_steps {
        recipe.clip.steps = s;
    }
    if let Some(seed) = a.seed {
        recipe.backend.seed = seed;
        recipe.face_id.seed = seed;
        recipe.clip.seed = seed;
    }
    Zoo::load_or_build(home, &recipe)?;
    println!("models ready in {}", home.display());
    Ok(())
}

/// Test identity `i` of a seed; disjoint from reconstruction identities.
pub fn test_identity(seed: u64, i: usize) -> FaceParams {
    FaceParams::from_seed(derive_seed(seed, &["test-identity", &i.to_string()]))
}

fn render_faces(a: &RenderFacesArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    for i in 0..a.count {
        let mut r = rng::rng(derive_seed(a.seed, &["test-photo", &i.to_string()]));
        let img = render(&test_identity(a.seed, i), &RenderOpts::jittered(&mut r, 64));
        img.save_png(&a.out.join(format!("{}-{i:03}.png", a.prefix)))?;
    }
    println!("{} faces written to {}", a.count, a.out.display());
    Ok(())
}

fn build(home: &Path, a: &BuildDatasetArgs) -> Result<()> {
    require(&a.names, "names file")?;
    let mut cfg: SelfAugConfig = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SelfAugConfig::default(),
    };
    if let Some(k) = a.keep {
        cfg.keep_fraction = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.per_name {
        cfg.per_name = n;
    }
    if let Some(n) = a.per_pair {
        cfg.per_pair = n;
    }
    if let Some(n) = a.recon_identities {
        cfg.recon_identities = n;
    }
    cfg.validate()?;
    let templates = match &a.templates {
        Some(p) => {
            require(p, "templates file")?;
            load_templates(p)?
        }
        None => DEFAULT_EDIT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
    };
    let names = ingest_names_file(&a.names)?;
    let zoo = load_zoo(home)?;
    let detector = ToyDetector::default();
    let models = Builders {
        backend: &zoo.backend,
        similarity: similarity(&zoo, &detector, &cfg.crop),
        joint: &zoo.clip,
    };
    let manifest = build_dataset(&names, &templates, &cfg, &models, &a.out)?;
    let c = manifest.counts();
    println!(
        "manifest {} written: {} reconstruction, {} self-augmented",
        a.out.join(crate::selfaug::MANIFEST_FILE).display(),
        c.reconstruction,
        c.selfaug
    );
    Ok(())
}

fn train(home: &Path, a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            require(p, "config")?;
            TrainConfig::from_toml(&read_text(p)?)?
        }
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    require(&a.manifest, "manifest")?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let zoo = load_zoo(home)?;
    let outcome = run_training(&cfg, &manifest, &zoo.backend, || cfg.encoder.build(&zoo), &a.out)?;
    let last = outcome.log.last().map(|r| r.loss.l_total).unwrap_or(f64::NAN);
    println!(
        "trained to step {} (last l_total {last:.4}); {} checkpoints in {}",
        outcome.final_step,
        outcome.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn generate(home: &Path, a: &GenerateArgs) -> Result<()> {
    let template = PromptTemplate::editing(a.prompt.clone())?;
    if a.num == 0 {
        return Err(Error::Config("--num must be positive".into()));
    }
    let sampling = a.sampler.resolve()?;
    let image = Image::load(&a.face).map_err(|e| Error::Image(format!("cannot read face {}: {e}", a.face.display())))?;
    let zoo = load_zoo(home)?;
    let encoder = load_encoder(&a.checkpoint, &zoo.backend)?;
    let crop = CropConfig {
        output_size: encoder.config().input_resolution(),
        ..CropConfig::default()
    };
    let face = TestFace::new("input", image, &ToyDetector::default(), &crop)?;
    let words = encoder.encode_identity(&face.face)?.sample(0)?;
    let cond = assemble_conditioning(zoo.backend.text(), &template, &words)?;
    let seeds: Vec<u64> = (0..a.num as u64).map(|j| sampling.sampler.seed + j).collect();
    let images = ddim_sample_batch(&zoo.backend, &vec![&cond; a.num], &seeds, &sampling.sampler)?;
    for (j, (img, seed)) in images.iter().zip(&seeds).enumerate() {
        let sidecar = Sidecar {
            prompt: template.text().to_string(),
            seed: *seed,
            sampler: sampling.sampler.with_seed(*seed),
            identity: None,
        };
        let (png, _) = write_with_sidecar(&a.out, &format!("{}-{j}", prompt_slug(template.text())), img, &sidecar)?;
        println!("{}", png.display());
    }
    Ok(())
}

fn protocol_config(sampler: &SamplerArgs, images_per_cell: Option<usize>) -> Result<ProtocolConfig> {
    let sampling = sampler.resolve()?;
    let mut cfg = ProtocolConfig {
        sampler: sampling.sampler,
        ..ProtocolConfig::default()
    };
    if let Some(n) = images_per_cell.or(sampling.images_per_cell) {
        cfg.images_per_cell = n;
    }
    Ok(cfg)
}

fn evaluate(home: &Path, a: &EvaluateArgs) -> Result<()> {
    let cfg = protocol_config(&a.sampler, a.images_per_cell)?;
    let prompts = load_prompts(&a.prompts)?;
    require(&a.faces, "faces directory")?;
    let zoo = load_zoo(home)?;
    let encoder = load_encoder(&a.checkpoint, &zoo.backend)?;
    let identities = match &a.manifest {
        Some(m) => DatasetManifest::read(m)?.selfaug_identities(),
        None => checkpoint_identities(&a.checkpoint)?,
    };
    let detector = ToyDetector::default();
    let faces = load_test_faces(&a.faces, &detector, &cfg.crop)?;
    let scorers = Scorers {
        similarity: similarity(&zoo, &detector, &cfg.crop),
        joint: &zoo.clip,
    };
    let report = run_protocol(&encoder, &zoo.backend, &faces, &prompts, &identities, &scorers, &cfg, a.images.as_deref())?;
    write_text(&a.out, &report.to_json()?)?;
    let table = format!(
        "{}\n{}",
        comparison_table(&[("Ours (toy)".to_string(), &report)]),
        cell_table(&report)
    );
    write_text(&a.out.with_extension("md"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablate(home: &Path, a: &AblateArgs) -> Result<()> {
    let protocol = protocol_config(&a.sampler, a.images_per_cell)?;
    let mut train = match &a.train_config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::toy(),
    };
    if let Some(n) = a.iterations {
        train.iterations = n;
    }
    train.validate()?;
    let prompts = load_prompts(&a.prompts)?;
    require(&a.manifest, "manifest")?;
    require(&a.faces, "faces directory")?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let zoo = load_zoo(home)?;
    let faces = load_test_faces(&a.faces, &ToyDetector::default(), &protocol.crop)?;
    let report = run_ablation(&zoo, &manifest, &faces, &prompts, &train, &protocol, &default_variants(), &a.out)?;
    let tables = format!("{}\n{}", report.encoder_table(), report.word_count_table());
    write_text(&a.out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&a.out.join("ablation.md"), &tables)?;
    print!("{tables}");
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(a) => pretrain(&cli.home, a),
        Command::RenderFaces(a) => render_faces(a),
        Command::BuildDataset(a) => build(&cli.home, a),
        Command::Train(a) => train(&cli.home, a),
        Command::Generate(a) => generate(&cli.home, a),
        Command::Evaluate(a) => evaluate(&cli.home, a),
        Command::Ablate(a) => ablate(&cli.home, a),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    }
    match run(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(dispatch(["dreamid"]), exit::USAGE);
        assert_eq!(dispatch(["dreamid", "frobnicate"]), exit::USAGE);
        assert_eq!(dispatch(["dreamid", "--help"]), exit::OK);
    }

    #[test]
    fn error_kinds_map_to_distinct_codes() {
        let codes = [
            exit_code(&Error::Template("x".into())),
            exit_code(&Error::Image("x".into())),
            exit_code(&Error::checkpoint("p", "x")),
            exit_code(&Error::Config("x".into())),
            exit_code(&Error::Dataset("x".into())),
        ];
        let unique: std::collections::BTreeSet<_> = codes.iter().collect();
        assert_eq!(unique.len(), codes.len());
    }
}
