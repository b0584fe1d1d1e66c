//! C interface to the identity encoder.
//!
//! Every function returns a [`DreamidStatus`]; on failure the message is
//! available from [`dreamid_last_error`] on the same thread. Encoders are
//! opaque heap handles released with [`dreamid_encoder_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use dreamid::detect::{crop_align_filter, CropConfig, ToyDetector};
use dreamid::encoder::{embedding_reg_loss, AlignedFace, FaceSource, M2Encoder, PseudoWords};
use dreamid::image::Image;
use dreamid::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DreamidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    NoFace = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Opaque encoder handle.
pub struct DreamidEncoder {
    inner: M2Encoder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: DreamidStatus, msg: impl Into<String>) -> DreamidStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> DreamidStatus {
    match e {
        Error::Io { .. } => DreamidStatus::Io,
        Error::Checkpoint { .. } => DreamidStatus::Checkpoint,
        Error::Shape(_) | Error::Config(_) | Error::Image(_) => DreamidStatus::InvalidArgument,
        _ => DreamidStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), DreamidStatus>) -> DreamidStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(())) => DreamidStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(DreamidStatus::Internal, "panic inside dreamid"),
    }
}

fn lib(e: Error) -> DreamidStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dreamid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dreamid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads an encoder checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dreamid_encoder_load(path: *const c_char, out: *mut *mut DreamidEncoder) -> DreamidStatus {
    if path.is_null() || out.is_null() {
        return fail(DreamidStatus::NullPointer, "null argument");
    }
    // SAFETY: checked non-null; caller guarantees NUL termination.
    let path = match unsafe { CStr::from_ptr(path) }.to_str() {
        Ok(p) => PathBuf::from(p),
        Err(_) => return fail(DreamidStatus::InvalidArgument, "path is not UTF-8"),
    };
    guard(|| {
        let inner = M2Encoder::load(&path, false).map_err(lib)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(DreamidEncoder { inner })) };
        Ok(())
    })
}

/// Releases an encoder. NULL is ignored.
///
/// # Safety
/// `encoder` must come from [`dreamid_encoder_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dreamid_encoder_free(encoder: *mut DreamidEncoder) {
    if !encoder.is_null() {
        // SAFETY: caller hands back ownership of a handle we allocated.
        drop(unsafe { Box::from_raw(encoder) });
    }
}

/// # Safety
/// `encoder` must be a live handle or NULL.
unsafe fn handle<'a>(encoder: *const DreamidEncoder) -> Result<&'a M2Encoder, DreamidStatus> {
    // SAFETY: forwarded from the caller.
    unsafe { encoder.as_ref() }
        .map(|e| &e.inner)
        .ok_or_else(|| fail(DreamidStatus::NullPointer, "null encoder"))
}

/// Number of pseudo words per face, or 0 for NULL.
///
/// # Safety
/// `encoder` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dreamid_encoder_num_words(encoder: *const DreamidEncoder) -> usize {
    unsafe { handle(encoder) }.map_or(0, |e| e.config().num_words)
}

/// Width of each pseudo word, or 0 for NULL.
///
/// # Safety
/// `encoder` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dreamid_encoder_word_dim(encoder: *const DreamidEncoder) -> usize {
    unsafe { handle(encoder) }.map_or(0, |e| e.config().text_dim)
}

/// Side of the aligned face the encoder expects, or 0 for NULL.
///
/// # Safety
/// `encoder` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn dreamid_encoder_resolution(encoder: *const DreamidEncoder) -> usize {
    unsafe { handle(encoder) }.map_or(0, |e| e.config().input_resolution())
}

unsafe fn write_words(words: &PseudoWords, out: *mut f64, out_len: usize) -> Result<(), DreamidStatus> {
    let flat: Vec<f64> = words.to_vecs(0).map_err(lib)?.concat();
    if out_len < flat.len() {
        return Err(fail(
            DreamidStatus::BufferTooSmall,
            format!("output needs {} values, got {out_len}", flat.len()),
        ));
    }
    // SAFETY: caller guarantees `out` holds `out_len` values.
    unsafe { ptr::copy_nonoverlapping(flat.as_ptr(), out, flat.len()) };
    Ok(())
}

/// Encodes an aligned square face into `num_words * word_dim` values,
/// written row by row.
///
/// `pixels` holds `side * side * 3` interleaved RGB samples in `[-1, 1]`
/// and `side` must equal [`dreamid_encoder_resolution`].
///
/// # Safety
/// `pixels` must hold `side * side * 3` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn dreamid_encode_aligned(
    encoder: *const DreamidEncoder,
    pixels: *const f64,
    side: usize,
    out: *mut f64,
    out_len: usize,
) -> DreamidStatus {
    guard(|| {
        let enc = unsafe { handle(encoder) }?;
        if pixels.is_null() || out.is_null() {
            return Err(fail(DreamidStatus::NullPointer, "null buffer"));
        }
        // SAFETY: caller guarantees the length.
        let data = unsafe { std::slice::from_raw_parts(pixels, side * side * 3) }.to_vec();
        let image = Image::new(side, side, data).map_err(lib)?;
        let face = AlignedFace::new(image, "ffi", FaceSource::Real).map_err(lib)?;
        let words = enc.encode_identity(&face).map_err(lib)?;
        unsafe { write_words(&words, out, out_len) }
    })
}

/// Detects, aligns and encodes the face in an 8-bit RGB photo.
/// Returns `NO_FACE` when no usable face is found.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn dreamid_encode_photo(
    encoder: *const DreamidEncoder,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
    out_len: usize,
) -> DreamidStatus {
    guard(|| {
        let enc = unsafe { handle(encoder) }?;
        if rgb.is_null() || out.is_null() {
            return Err(fail(DreamidStatus::NullPointer, "null buffer"));
        }
        // SAFETY: caller guarantees the length.
        let bytes = unsafe { std::slice::from_raw_parts(rgb, width * height * 3) };
        let data = bytes.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        let image = Image::new(width, height, data).map_err(lib)?;
        let crop = CropConfig {
            output_size: enc.config().input_resolution(),
            ..CropConfig::default()
        };
        let face = crop_align_filter(&ToyDetector::default(), &image, &crop, "ffi", FaceSource::Real)
            .map_err(|r| fail(DreamidStatus::NoFace, format!("face rejected: {}", r.code())))?;
        let words = enc.encode_identity(&face).map_err(lib)?;
        unsafe { write_words(&words, out, out_len) }
    })
}

/// Regulariser `Σ_i ‖s_i‖` over `k` words of width `dim`, stored row by row.
///
/// # Safety
/// `words` must hold `k * dim` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dreamid_reg_loss(words: *const f64, k: usize, dim: usize, out: *mut f64) -> DreamidStatus {
    if words.is_null() || out.is_null() {
        return fail(DreamidStatus::NullPointer, "null buffer");
    }
    if k == 0 || dim == 0 {
        return fail(DreamidStatus::InvalidArgument, "k and dim must be positive");
    }
    guard(|| {
        // SAFETY: caller guarantees the length.
        let flat = unsafe { std::slice::from_raw_parts(words, k * dim) };
        let rows: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        let pw = PseudoWords::from_vecs(&rows).map_err(lib)?;
        let loss = embedding_reg_loss(&pw)
            .and_then(|t| Ok(t.to_scalar::<f64>()?))
            .map_err(lib)?;
        // SAFETY: checked non-null.
        unsafe { *out = loss };
        Ok(())
    })
}
