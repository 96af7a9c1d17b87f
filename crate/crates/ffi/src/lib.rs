//! C ABI over the core library.
//!
//! Every fallible call returns an [`NhsgStatus`]; on failure the message is
//! available from [`nhsg_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles released with their `_free` function, and
//! sample buffers returned by the library are released with
//! [`nhsg_buffer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nhsg::config::PipelineConfig;
use nhsg::dsp::{FrameSpec, Waveform};
use nhsg::eval::{lf0_rmse, mcd, vuv_error, EvalConfig};
use nhsg::numerics::{load_params, ParameterStore};
use nhsg::pipeline;
use nhsg::pitch::{estimate_f0, F0Contour, PitchConfig};
use nhsg::representation::{cosine, embed_timbre, read_codebook, Codebook, TimbreEmbedder, TimbreEmbedding, EMBED_DIM};
use nhsg::stage2::Generator;
use nhsg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NhsgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Unsupported = 5,
    Config = 6,
    TooShort = 7,
    Shape = 8,
    Numerics = 9,
    Structure = 10,
    Vocab = 11,
    InvalidSegment = 12,
    InvalidEmbedding = 13,
    Data = 14,
    Panic = 15,
}

impl From<&Error> for NhsgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => Self::Io,
            Error::Format(_) => Self::Format,
            Error::Unsupported(_) => Self::Unsupported,
            Error::Config(_) => Self::Config,
            Error::TooShort(_) => Self::TooShort,
            Error::Shape(_) => Self::Shape,
            Error::Numerics(_) => Self::Numerics,
            Error::Structure(_) => Self::Structure,
            Error::Vocab(_) => Self::Vocab,
            Error::InvalidSegment => Self::InvalidSegment,
            Error::InvalidEmbedding(_) => Self::InvalidEmbedding,
            Error::Data(_) => Self::Data,
        }
    }
}

/// Library-owned `f32` array.
#[repr(C)]
#[derive(Debug)]
pub struct NhsgF32Buffer {
    pub data: *mut f32,
    pub len: usize,
}

/// Opaque k-means codebook.
pub struct NhsgCodebook {
    inner: Codebook,
}

/// Opaque vocoder: configuration, generator and weights.
pub struct NhsgVocoder {
    cfg: PipelineConfig,
    gen: Generator,
    store: ParameterStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Fail(NhsgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|l| *l.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NhsgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NhsgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NhsgStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(NhsgStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(NhsgStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a>(p: *const f32, n: usize, what: &str) -> Result<&'a [f32], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn waveform(p: *const f32, n: usize, sample_rate: u32) -> Result<Waveform, Fail> {
    Ok(Waveform::new(slice(p, n, "samples")?.to_vec(), sample_rate)?)
}

unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

fn into_buffer(v: Vec<f32>) -> NhsgF32Buffer {
    let b = v.into_boxed_slice();
    let len = b.len();
    NhsgF32Buffer {
        data: Box::into_raw(b) as *mut f32,
        len,
    }
}

/// Contour over a nominal 20 ms grid; non-positive values are unvoiced.
fn contour(f0: &[f32]) -> Result<F0Contour, Fail> {
    let spec = FrameSpec::new(320, 1024, 16000)?;
    let f0 = f0.iter().map(|&v| if v.is_finite() { v.max(0.0).min(7999.0) } else { 0.0 }).collect();
    Ok(F0Contour::from_hz(f0, spec)?)
}

/// Message of the most recent failure on this thread; empty when none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn nhsg_last_error() -> *const c_char {
    LAST_ERROR.with(|l| l.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nhsg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Length of timbre embeddings.
#[no_mangle]
pub extern "C" fn nhsg_embedding_dim() -> usize {
    EMBED_DIM
}

/// Releases a buffer returned by the library. Null buffers are ignored.
///
/// # Safety
/// `buf` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nhsg_buffer_free(buf: NhsgF32Buffer) {
    if !buf.data.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(buf.data, buf.len)));
    }
}

/// F0 in Hz per 20 ms frame (0 = unvoiced), default pitch settings.
///
/// # Safety
/// `samples` must point to `n` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nhsg_estimate_f0(samples: *const f32, n: usize, sample_rate: u32, out: *mut NhsgF32Buffer) -> NhsgStatus {
    guard(|| {
        let w = waveform(samples, n, sample_rate)?;
        let c = estimate_f0(&w, &PitchConfig::default())?;
        put(out, into_buffer(c.f0_hz))
    })
}

/// Builtin timbre embedding; `out` must hold `nhsg_embedding_dim()` floats.
///
/// # Safety
/// `samples` must point to `n` floats and `out` to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn nhsg_embed_timbre(samples: *const f32, n: usize, sample_rate: u32, out: *mut f32, out_len: usize) -> NhsgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != EMBED_DIM {
            return Err(invalid(format!("embedding buffer holds {out_len} floats, need {EMBED_DIM}")));
        }
        let e = embed_timbre(&waveform(samples, n, sample_rate)?, &TimbreEmbedder::Builtin, "ffi")?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&e.vector);
        Ok(())
    })
}

/// Cosine similarity of two `dim`-length vectors.
///
/// # Safety
/// `a` and `b` must point to `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn nhsg_cosine(a: *const f32, b: *const f32, dim: usize, out: *mut f64) -> NhsgStatus {
    guard(|| {
        let ea = TimbreEmbedding::new(slice(a, dim, "a")?.to_vec(), "a")?;
        let eb = TimbreEmbedding::new(slice(b, dim, "b")?.to_vec(), "b")?;
        put(out, cosine(&ea, &eb)?)
    })
}

/// Log-F0 RMSE over co-voiced frames of two Hz contours (trimmed to the
/// shorter); NaN when no frame is voiced in both.
///
/// # Safety
/// `reference` and `hyp` must point to `n_ref` and `n_hyp` floats.
#[no_mangle]
pub unsafe extern "C" fn nhsg_lf0_rmse(reference: *const f32, n_ref: usize, hyp: *const f32, n_hyp: usize, out: *mut f64) -> NhsgStatus {
    guard(|| {
        let r = contour(slice(reference, n_ref, "reference")?)?;
        let h = contour(slice(hyp, n_hyp, "hyp")?)?;
        put(out, lf0_rmse(&r, &h).unwrap_or(f64::NAN))
    })
}

/// Percentage of frames whose voicing differs.
///
/// # Safety
/// `reference` and `hyp` must point to `n_ref` and `n_hyp` floats.
#[no_mangle]
pub unsafe extern "C" fn nhsg_vuv_error(reference: *const f32, n_ref: usize, hyp: *const f32, n_hyp: usize, out: *mut f64) -> NhsgStatus {
    guard(|| {
        let r = contour(slice(reference, n_ref, "reference")?)?;
        let h = contour(slice(hyp, n_hyp, "hyp")?)?;
        put(out, vuv_error(&r, &h))
    })
}

/// Mel cepstral distortion in dB with default settings.
///
/// # Safety
/// `reference` and `hyp` must point to `n_ref` and `n_hyp` floats.
#[no_mangle]
pub unsafe extern "C" fn nhsg_mcd(
    reference: *const f32,
    n_ref: usize,
    hyp: *const f32,
    n_hyp: usize,
    sample_rate: u32,
    out: *mut f64,
) -> NhsgStatus {
    guard(|| {
        let r = waveform(reference, n_ref, sample_rate)?;
        let h = waveform(hyp, n_hyp, sample_rate)?;
        put(out, mcd(&r, &h, &EvalConfig::default())?)
    })
}

/// Loads an `NHCB` codebook file.
///
/// # Safety
/// `file` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nhsg_codebook_load(file: *const c_char, out: *mut *mut NhsgCodebook) -> NhsgStatus {
    guard(|| {
        let cb = read_codebook(path(file, "path")?)?;
        put(out, Box::into_raw(Box::new(NhsgCodebook { inner: cb })))
    })
}

/// # Safety
/// `cb` must come from [`nhsg_codebook_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nhsg_codebook_free(cb: *mut NhsgCodebook) {
    if !cb.is_null() {
        drop(Box::from_raw(cb));
    }
}

/// Number of layers; 0 for a null handle.
///
/// # Safety
/// `cb` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhsg_codebook_num_layers(cb: *const NhsgCodebook) -> usize {
    cb.as_ref().map_or(0, |c| c.inner.layers.len())
}

/// Layer id, centroid count and dimension of layer `index`.
///
/// # Safety
/// `cb` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nhsg_codebook_layer_info(
    cb: *const NhsgCodebook,
    index: usize,
    layer_id: *mut u32,
    k: *mut usize,
    dim: *mut usize,
) -> NhsgStatus {
    guard(|| {
        let c = cb.as_ref().ok_or_else(|| null("codebook"))?;
        let l = c.inner.layers.get(index).ok_or_else(|| invalid(format!("layer index {index} out of range")))?;
        put(layer_id, l.layer_id)?;
        put(k, l.k)?;
        put(dim, l.dim)
    })
}

/// Nearest centroid of `x` in layer `index` (ties to the lowest index).
///
/// # Safety
/// `cb` must be a live handle and `x` must point to `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn nhsg_codebook_nearest(cb: *const NhsgCodebook, index: usize, x: *const f32, dim: usize, out: *mut u32) -> NhsgStatus {
    guard(|| {
        let c = cb.as_ref().ok_or_else(|| null("codebook"))?;
        let l = c.inner.layers.get(index).ok_or_else(|| invalid(format!("layer index {index} out of range")))?;
        if dim != l.dim {
            return Err(Fail(NhsgStatus::Shape, format!("vector of {dim} values, layer has dimension {}", l.dim)));
        }
        put(out, l.nearest(slice(x, dim, "x")?) as u32)
    })
}

/// Loads a vocoder checkpoint with an optional TOML config (null for
/// defaults).
///
/// # Safety
/// `checkpoint` must be a NUL-terminated path, `config` null or one;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nhsg_vocoder_load(checkpoint: *const c_char, config: *const c_char, out: *mut *mut NhsgVocoder) -> NhsgStatus {
    guard(|| {
        let cfg = if config.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(path(config, "config")?)?
        };
        let store = load_params(path(checkpoint, "checkpoint")?)?;
        let gen = Generator::from_store(cfg.stage2.generator.clone(), &store)?;
        put(out, Box::into_raw(Box::new(NhsgVocoder { cfg, gen, store })))
    })
}

/// # Safety
/// `v` must come from [`nhsg_vocoder_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn nhsg_vocoder_free(v: *mut NhsgVocoder) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Output samples per frame; 0 for a null handle.
///
/// # Safety
/// `v` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhsg_vocoder_hop(v: *const NhsgVocoder) -> usize {
    v.as_ref().map_or(0, |v| v.gen.hop())
}

/// Sample rate the vocoder was trained at; 0 for a null handle.
///
/// # Safety
/// `v` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhsg_vocoder_sample_rate(v: *const NhsgVocoder) -> u32 {
    v.as_ref().map_or(0, |v| v.gen.sample_rate)
}

/// Converts `source` to the timbre `timbre[dim]` using the codebook stored
/// in the checkpoint. The result has `frames * hop` samples.
///
/// # Safety
/// `v` must be a live handle, `source` must point to `n` floats and
/// `timbre` to `dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nhsg_vocoder_convert(
    v: *const NhsgVocoder,
    source: *const f32,
    n: usize,
    sample_rate: u32,
    timbre: *const f32,
    dim: usize,
    out: *mut NhsgF32Buffer,
) -> NhsgStatus {
    guard(|| {
        let v = v.as_ref().ok_or_else(|| null("vocoder"))?;
        let e = TimbreEmbedding::new(slice(timbre, dim, "timbre")?.to_vec(), "ffi")?;
        let w = waveform(source, n, sample_rate)?;
        let (_, y) = pipeline::convert(&v.cfg, &v.store, None, &w, &e)?;
        put(out, into_buffer(y.samples().to_vec()))
    })
}
