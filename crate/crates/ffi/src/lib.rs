//! C ABI for the avmatch matching engine.
//!
//! Models and feature sequences cross the boundary as opaque handles that
//! the caller frees with the matching `*_free` function. Every fallible
//! call returns an [`AvmStatus`]; on failure the message is kept per thread
//! and can be read with [`avm_last_error_message`]. Panics are caught at
//! the boundary and reported as [`AvmStatus::Panic`].
//!
//! The C header is generated into `include/avmatch.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use avmatch::data::{read_feature_file, write_feature_file, FeatureSequence, Modality};
use avmatch::engine::{load_checkpoint, random_baseline, recommend, save_checkpoint};
use avmatch::model::{build_preset, DualBranchModel};
use avmatch::{Error, Tensor};

/// Result of every fallible call. `AVM_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Shape = 4,
    Parameter = 5,
    Degenerate = 6,
    Config = 7,
    Format = 8,
    Corruption = 9,
    Training = 10,
    Divergence = 11,
    Manifest = 12,
    Io = 13,
    Panic = 14,
}

/// Audio or video, matching the CMF1 modality byte.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvmModality {
    Audio = 0,
    Video = 1,
}

impl From<AvmModality> for Modality {
    fn from(m: AvmModality) -> Self {
        match m {
            AvmModality::Audio => Modality::Audio,
            AvmModality::Video => Modality::Video,
        }
    }
}

/// A trained or freshly initialized dual-branch model.
pub struct AvmModel {
    inner: DualBranchModel,
}

/// One clip's per-frame features for one modality.
pub struct AvmFeatures {
    inner: FeatureSequence,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|e| {
        let mut bytes = e.into_vec();
        bytes.retain(|&b| b != 0);
        CString::new(bytes).expect("nul bytes removed")
    });
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AvmStatus {
    match e {
        Error::Dimension { .. } => AvmStatus::Dimension,
        Error::Shape(_) => AvmStatus::Shape,
        Error::Parameter(_) => AvmStatus::Parameter,
        Error::Degenerate(_) => AvmStatus::Degenerate,
        Error::Config(_) => AvmStatus::Config,
        Error::Format(_) => AvmStatus::Format,
        Error::Corruption { .. } => AvmStatus::Corruption,
        Error::Training(_) => AvmStatus::Training,
        Error::Divergence { .. } => AvmStatus::Divergence,
        Error::Manifest(_) => AvmStatus::Manifest,
        Error::Io { .. } => AvmStatus::Io,
    }
}

/// Failure raised inside the boundary before reaching the engine.
struct Fail(AvmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AvmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            AvmStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(AvmStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AvmStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn avm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn avm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fresh model of a named preset (`"tivm"`, `"ivm-ms"`, ...) with weights
/// drawn from `seed`.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avm_model_new(
    preset: *const c_char,
    seed: u64,
    out: *mut *mut AvmModel,
) -> AvmStatus {
    guard(|| {
        non_null(out, "out")?;
        let mut config = build_preset(str_arg(preset, "preset")?)?;
        config.seed = seed;
        let model = DualBranchModel::new(config)?;
        *out = Box::into_raw(Box::new(AvmModel { inner: model }));
        Ok(())
    })
}

/// Load a CMCK checkpoint. `*out` is only written on success.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avm_model_load(path: *const c_char, out: *mut *mut AvmModel) -> AvmStatus {
    guard(|| {
        non_null(out, "out")?;
        let model = load_checkpoint(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(AvmModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn avm_model_save(model: *const AvmModel, path: *const c_char) -> AvmStatus {
    guard(|| {
        non_null(model, "model")?;
        save_checkpoint(&(*model).inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn avm_model_free(model: *mut AvmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the shared embedding space, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avm_model_embed_dim(model: *const AvmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.embed_dim)
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avm_model_param_count(model: *const AvmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// Feature width the model expects for a modality, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avm_model_feature_dim(model: *const AvmModel, modality: AvmModality) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.inner.config.feature_dim(modality.into()))
}

/// Copy `frames * dim` row-major values into a new feature handle.
///
/// # Safety
/// `clip_id` must be a NUL-terminated string, `values` must point to
/// `frames * dim` floats and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avm_features_new(
    clip_id: *const c_char,
    modality: AvmModality,
    values: *const f32,
    frames: usize,
    dim: usize,
    out: *mut *mut AvmFeatures,
) -> AvmStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(values, "values")?;
        let n = frames
            .checked_mul(dim)
            .ok_or_else(|| Fail(AvmStatus::Shape, format!("({frames}, {dim}) overflows")))?;
        let data = std::slice::from_raw_parts(values, n).to_vec();
        let seq = FeatureSequence::new(
            str_arg(clip_id, "clip_id")?,
            modality.into(),
            Tensor::new(&[frames, dim], data)?,
        )?;
        *out = Box::into_raw(Box::new(AvmFeatures { inner: seq }));
        Ok(())
    })
}

/// Read a CMF1 file; the clip id is the file stem.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avm_features_read(
    path: *const c_char,
    out: *mut *mut AvmFeatures,
) -> AvmStatus {
    guard(|| {
        non_null(out, "out")?;
        let seq = read_feature_file(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(AvmFeatures { inner: seq }));
        Ok(())
    })
}

/// # Safety
/// `features` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn avm_features_write(
    features: *const AvmFeatures,
    path: *const c_char,
) -> AvmStatus {
    guard(|| {
        non_null(features, "features")?;
        write_feature_file(&(*features).inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Frame count and feature width of a sequence.
///
/// # Safety
/// `features` must be a live handle; `frames` and `dim` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn avm_features_shape(
    features: *const AvmFeatures,
    frames: *mut usize,
    dim: *mut usize,
) -> AvmStatus {
    guard(|| {
        non_null(features, "features")?;
        non_null(frames, "frames")?;
        non_null(dim, "dim")?;
        *frames = (*features).inner.len();
        *dim = (*features).inner.dim();
        Ok(())
    })
}

/// # Safety
/// `features` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn avm_features_free(features: *mut AvmFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Eval-mode embedding of one sequence into `out[0..len]`; `len` must equal
/// [`avm_model_embed_dim`].
///
/// # Safety
/// `model` and `features` must be live handles and `out` must point to
/// `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn avm_model_embed(
    model: *const AvmModel,
    features: *const AvmFeatures,
    out: *mut f32,
    len: usize,
) -> AvmStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(features, "features")?;
        non_null(out, "out")?;
        let m = &(*model).inner;
        if len != m.config.embed_dim {
            return Err(Fail(
                AvmStatus::Parameter,
                format!("output holds {len} floats, embedding has {}", m.config.embed_dim),
            ));
        }
        let seq = &(*features).inner;
        let e = m.embed_sequences(seq.modality, &[seq])?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(e.data());
        Ok(())
    })
}

/// Rank `n` audio candidates for a video query. The best `top_k`
/// candidate positions go to `out_indices` and their cosine similarities
/// to `out_scores`, best first; equal scores keep candidate order.
///
/// # Safety
/// `model` and `query` must be live handles, `candidates` must point to
/// `n` live handles, and both outputs must hold `top_k` elements.
#[no_mangle]
pub unsafe extern "C" fn avm_recommend(
    model: *const AvmModel,
    query: *const AvmFeatures,
    candidates: *const *const AvmFeatures,
    n: usize,
    top_k: usize,
    out_indices: *mut usize,
    out_scores: *mut f64,
) -> AvmStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(query, "query")?;
        non_null(candidates, "candidates")?;
        non_null(out_indices, "out_indices")?;
        non_null(out_scores, "out_scores")?;
        let handles = std::slice::from_raw_parts(candidates, n);
        let mut seqs = Vec::with_capacity(n);
        for (i, &h) in handles.iter().enumerate() {
            non_null(h, &format!("candidate {i}"))?;
            // positions travel in the clip id so duplicates stay distinct
            let mut s = (*h).inner.clone();
            s.clip_id = i.to_string();
            seqs.push(s);
        }
        let ranked = recommend(&(*model).inner, &(*query).inner, &seqs, top_k)?;
        let idx = std::slice::from_raw_parts_mut(out_indices, top_k);
        let scores = std::slice::from_raw_parts_mut(out_scores, top_k);
        for (i, r) in ranked.iter().enumerate() {
            idx[i] = r.clip_id.parse().expect("position id");
            scores[i] = r.similarity;
        }
        Ok(())
    })
}

/// `k / n`, the recall@k of uniformly random ranking.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avm_random_baseline(k: usize, n: usize, out: *mut f64) -> AvmStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = random_baseline(k, n)?;
        Ok(())
    })
}
