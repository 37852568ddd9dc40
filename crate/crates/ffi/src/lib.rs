//! C ABI over the docrep library.
//!
//! Every function returns a [`DocrepStatus`]. On failure the message is kept
//! per thread and read back with [`docrep_last_error`]. Handles are opaque and
//! released with their matching `_free` function. Strings are copied into
//! caller buffers; the required size including the terminating NUL is always
//! written to `needed`, so a call with a short buffer reports
//! `DOCREP_STATUS_BUFFER_TOO_SMALL` and can be retried.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use docrep::evalsuite;
use docrep::imaging::GrayImage;
use docrep::pipeline::{Descriptor, Encoder, ExtractConfig, FeatureSet, Model, ModelSet, SavedModel};
use docrep::predict::{ncm_predict, svm_predict};
use docrep::runlength::{rl_from_gray, RlConfig};
use docrep::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocrepStatus {
    Ok = 0,
    /// Null pointer, bad size, or an argument the library rejected.
    InvalidArgument = 1,
    Io = 2,
    /// Corrupt or unsupported file contents.
    Format = 3,
    /// Image decoding failed.
    Image = 4,
    /// Models or features that do not fit together.
    Incompatible = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Loaded feature set.
pub struct DocrepFeatureSet(FeatureSet);

/// Loaded model of any kind.
pub struct DocrepModel(Arc<SavedModel>);

/// Descriptor pipeline bound to its models.
pub struct DocrepEncoder(Encoder);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("NULs removed"));
}

fn status_of(e: &Error) -> DocrepStatus {
    match e {
        Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::Usage(_) => DocrepStatus::InvalidArgument,
        Error::Io { .. } => DocrepStatus::Io,
        Error::Format { .. } => DocrepStatus::Format,
        Error::Image { .. } => DocrepStatus::Image,
        Error::Incompatible(_) => DocrepStatus::Incompatible,
        Error::Numerical(_) | Error::RankDeficient { .. } => DocrepStatus::Numerical,
    }
}

struct Fail(DocrepStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(DocrepStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DocrepStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DocrepStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DocrepStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or_else(|| invalid(format!("{what} handle is null")))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| invalid(format!("{what} output is null")))
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Fail> {
    if ptr.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not UTF-8"))
}

unsafe fn copy_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Fail> {
    let n = s.len() + 1;
    *out(needed, "needed")? = n;
    if cap < n {
        return Err(Fail(DocrepStatus::BufferTooSmall, format!("buffer holds {cap} bytes, {n} needed")));
    }
    let dst = slice_mut(buf as *mut u8, n, "buffer")?;
    dst[..s.len()].copy_from_slice(s.as_bytes());
    dst[s.len()] = 0;
    Ok(())
}

fn gray(pixels: &[f32], width: usize, height: usize) -> Result<GrayImage, Fail> {
    if width.checked_mul(height) != Some(pixels.len()) {
        return Err(invalid(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    Ok(GrayImage::new(width, height, pixels.to_vec())?)
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn docrep_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Length of the default run-length descriptor.
#[no_mangle]
pub extern "C" fn docrep_rl_len() -> usize {
    RlConfig::default().descriptor_len()
}

/// Default run-length descriptor of a grayscale page with row-major
/// luminance in [0, 1]. `out_len` must be at least [`docrep_rl_len`].
///
/// # Safety
/// `pixels` must hold `width * height` floats and `out` must hold `out_len`.
#[no_mangle]
pub unsafe extern "C" fn docrep_rl_descriptor(
    pixels: *const f32,
    width: usize,
    height: usize,
    out: *mut f64,
    out_len: usize,
) -> DocrepStatus {
    guard(|| {
        let img = gray(slice(pixels, width.saturating_mul(height), "pixels")?, width, height)?;
        let d = rl_from_gray(&img, &RlConfig::default())?;
        if out_len < d.len() {
            return Err(Fail(DocrepStatus::BufferTooSmall, format!("descriptor has {} values", d.len())));
        }
        slice_mut(out, d.len(), "out")?.copy_from_slice(d.values());
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn docrep_featureset_load(path_: *const c_char, out_: *mut *mut DocrepFeatureSet) -> DocrepStatus {
    guard(|| {
        let slot = out(out_, "featureset")?;
        let fs = FeatureSet::load(&path(path_)?)?;
        *slot = Box::into_raw(Box::new(DocrepFeatureSet(fs)));
        Ok(())
    })
}

/// # Safety
/// `fs` must come from [`docrep_featureset_load`] and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn docrep_featureset_save(fs: *const DocrepFeatureSet, path_: *const c_char) -> DocrepStatus {
    guard(|| Ok(handle(fs, "featureset")?.0.save(&path(path_)?)?))
}

/// Number of rows, 0 for a null handle.
///
/// # Safety
/// `fs` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn docrep_featureset_rows(fs: *const DocrepFeatureSet) -> usize {
    fs.as_ref().map_or(0, |f| f.0.len())
}

/// Row width, 0 for a null handle.
///
/// # Safety
/// `fs` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn docrep_featureset_dim(fs: *const DocrepFeatureSet) -> usize {
    fs.as_ref().map_or(0, |f| f.0.dim())
}

/// Copies row `index` into `out`, which must hold at least `dim` floats.
///
/// # Safety
/// `fs` must be a live handle and `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn docrep_featureset_row(
    fs: *const DocrepFeatureSet,
    index: usize,
    out: *mut f32,
    out_len: usize,
) -> DocrepStatus {
    guard(|| {
        let fs = &handle(fs, "featureset")?.0;
        if index >= fs.len() {
            return Err(invalid(format!("row {index} of {}", fs.len())));
        }
        if out_len < fs.dim() {
            return Err(Fail(DocrepStatus::BufferTooSmall, format!("row has {} values", fs.dim())));
        }
        slice_mut(out, fs.dim(), "out")?.copy_from_slice(fs.row(index));
        Ok(())
    })
}

/// Copies the id of row `index` as a NUL-terminated string.
///
/// # Safety
/// `fs` must be a live handle, `buf` must hold `cap` bytes and `needed` be valid.
#[no_mangle]
pub unsafe extern "C" fn docrep_featureset_id(
    fs: *const DocrepFeatureSet,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DocrepStatus {
    guard(|| {
        let fs = &handle(fs, "featureset")?.0;
        let id = fs.ids().get(index).ok_or_else(|| invalid(format!("row {index} of {}", fs.len())))?;
        copy_str(id, buf, cap, needed)
    })
}

/// # Safety
/// `fs` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn docrep_featureset_free(fs: *mut DocrepFeatureSet) {
    if !fs.is_null() {
        drop(Box::from_raw(fs));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn docrep_model_load(path_: *const c_char, out_: *mut *mut DocrepModel) -> DocrepStatus {
    guard(|| {
        let slot = out(out_, "model")?;
        let m = SavedModel::load(&path(path_)?)?;
        *slot = Box::into_raw(Box::new(DocrepModel(Arc::new(m))));
        Ok(())
    })
}

/// Copies the model kind ("pca", "gmm", "svm", "ncm" or "mlp").
///
/// # Safety
/// `model` must be a live handle, `buf` must hold `cap` bytes and `needed` be valid.
#[no_mangle]
pub unsafe extern "C" fn docrep_model_kind(
    model: *const DocrepModel,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DocrepStatus {
    guard(|| copy_str(handle(model, "model")?.0.model.kind().name(), buf, cap, needed))
}

/// Classifies one feature vector with an SVM, NCM or MLP model and writes the
/// index of the predicted class, usable with [`docrep_model_class_name`].
///
/// # Safety
/// `model` must be a live handle, `x` must hold `dim` doubles and `class_index` be valid.
#[no_mangle]
pub unsafe extern "C" fn docrep_model_predict(
    model: *const DocrepModel,
    x: *const f64,
    dim: usize,
    class_index: *mut usize,
) -> DocrepStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let slot = out(class_index, "class_index")?;
        let x = slice(x, dim, "x")?;
        *slot = match &m.model {
            Model::Svm(s) => svm_predict(x, s)?,
            Model::Ncm(n) => ncm_predict(x, n)?,
            Model::Mlp(p) => p.predict(x)?,
            other => {
                return Err(Fail(
                    DocrepStatus::Incompatible,
                    format!("{} models do not predict classes", other.kind().name()),
                ))
            }
        };
        Ok(())
    })
}

/// Copies the name of class `index` of a classifier.
///
/// # Safety
/// `model` must be a live handle, `buf` must hold `cap` bytes and `needed` be valid.
#[no_mangle]
pub unsafe extern "C" fn docrep_model_class_name(
    model: *const DocrepModel,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DocrepStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let classes = m
            .info
            .classes
            .as_ref()
            .ok_or_else(|| Fail(DocrepStatus::Incompatible, "model carries no class names".into()))?;
        let name = classes
            .get(index)
            .ok_or_else(|| invalid(format!("class {index} of {}", classes.len())))?;
        copy_str(name, buf, cap, needed)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn docrep_model_free(model: *mut DocrepModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Builds an encoder with default settings. `descriptor` is one of rl, fv4,
/// fv16, fv256, fv256pca, hybrid-act; model handles the descriptor does not
/// need may be null. The encoder keeps its own reference to each model, so
/// the handles can be freed afterwards.
///
/// # Safety
/// `descriptor` must be NUL-terminated, model handles null or live, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn docrep_encoder_new(
    descriptor: *const c_char,
    local_pca: *const DocrepModel,
    gmm: *const DocrepModel,
    fv_pca: *const DocrepModel,
    mlp: *const DocrepModel,
    out_: *mut *mut DocrepEncoder,
) -> DocrepStatus {
    guard(|| {
        let slot = out(out_, "encoder")?;
        if descriptor.is_null() {
            return Err(invalid("descriptor is null"));
        }
        let name = CStr::from_ptr(descriptor).to_str().map_err(|_| invalid("descriptor is not UTF-8"))?;
        let d = Descriptor::parse(name).ok_or_else(|| invalid(format!("unknown descriptor {name:?}")))?;
        let pick = |p: *const DocrepModel| p.as_ref().map(|m| Arc::clone(&m.0));
        let models = ModelSet {
            local_pca: pick(local_pca),
            gmm: pick(gmm),
            fv_pca: pick(fv_pca),
            mlp: pick(mlp),
        };
        let enc = Encoder::new(d, &ExtractConfig::default(), &models)?;
        *slot = Box::into_raw(Box::new(DocrepEncoder(enc)));
        Ok(())
    })
}

/// Output length of an encoder, 0 for a null handle.
///
/// # Safety
/// `enc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn docrep_encoder_dim(enc: *const DocrepEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.0.dim())
}

/// Encodes a grayscale page (row-major luminance in [0, 1]).
///
/// # Safety
/// `enc` must be live, `pixels` must hold `width * height` floats and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn docrep_encoder_encode(
    enc: *const DocrepEncoder,
    pixels: *const f32,
    width: usize,
    height: usize,
    out: *mut f64,
    out_len: usize,
) -> DocrepStatus {
    guard(|| {
        let enc = &handle(enc, "encoder")?.0;
        let img = gray(slice(pixels, width.saturating_mul(height), "pixels")?, width, height)?;
        if out_len < enc.dim() {
            return Err(Fail(DocrepStatus::BufferTooSmall, format!("encoding has {} values", enc.dim())));
        }
        let v = enc.encode(&img)?;
        slice_mut(out, v.len(), "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// # Safety
/// `enc` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn docrep_encoder_free(enc: *mut DocrepEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Which partition agreement score [`docrep_partition_score`] computes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocrepPartitionMetric {
    Ami = 0,
    Ari = 1,
    VMeasure = 2,
}

/// Agreement between two labelings of the same `n` items.
///
/// # Safety
/// `a` and `b` must hold `n` labels and `score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn docrep_partition_score(
    metric: DocrepPartitionMetric,
    a: *const usize,
    b: *const usize,
    n: usize,
    score: *mut f64,
) -> DocrepStatus {
    guard(|| {
        let slot = out(score, "score")?;
        let (a, b) = (slice(a, n, "a")?, slice(b, n, "b")?);
        *slot = match metric {
            DocrepPartitionMetric::Ami => evalsuite::ami(a, b)?,
            DocrepPartitionMetric::Ari => evalsuite::ari(a, b)?,
            DocrepPartitionMetric::VMeasure => evalsuite::v_measure(a, b)?,
        };
        Ok(())
    })
}

/// Average precision of a ranked list of relevance flags (nonzero means
/// relevant). A list with no relevant item yields `DOCREP_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `relevant` must hold `n` bytes and `ap` must be valid.
#[no_mangle]
pub unsafe extern "C" fn docrep_average_precision(relevant: *const u8, n: usize, ap: *mut f64) -> DocrepStatus {
    guard(|| {
        let slot = out(ap, "ap")?;
        let flags: Vec<bool> = slice(relevant, n, "relevant")?.iter().map(|&r| r != 0).collect();
        *slot = evalsuite::average_precision(&flags).ok_or_else(|| invalid("no relevant item in the ranking"))?;
        Ok(())
    })
}
