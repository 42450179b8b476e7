//! C interface to xlprompt.
//!
//! Every function returns an [`XlpStatus`]; on failure a message for the
//! calling thread is available from [`xlp_last_error`]. Objects are opaque
//! handles created by `*_open`/`*_load`/`*_from_vectors` and released with
//! the matching `*_free`. Strings returned through out-parameters are owned
//! by the caller and released with [`xlp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;
use std::slice;

use xlprompt::corpus::{Label, LabelSpace, LanguageCode};
use xlprompt::embedding::{cosine_similarity, EmbeddingIndex, HashingEmbedder, SimilarityHit, Vector};
use xlprompt::eval::{emit_all, macro_f1, run_experiment, single_prompt, ExperimentConfig, Resources, RunOptions};
use xlprompt::prompt::Strategy;
use xlprompt::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XlpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    DimensionMismatch = 5,
    OutOfRange = 6,
    /// The experiment or prompt cannot be planned (missing aligner,
    /// verbalizer, index or other dependency).
    Plan = 7,
    /// The test input alone exceeds the token budget.
    Unrepresentable = 8,
    Transport = 9,
    Protocol = 10,
    CacheMiss = 11,
    /// The library panicked; the handle involved should be freed.
    Panic = 12,
    Internal = 13,
}

fn status_of(error: &Error) -> XlpStatus {
    match error {
        Error::Io { .. } => XlpStatus::Io,
        Error::Config { .. } => XlpStatus::Config,
        Error::DimensionMismatch { .. } => XlpStatus::DimensionMismatch,
        Error::KOutOfRange { .. } | Error::SampleTooLarge { .. } => XlpStatus::OutOfRange,
        Error::Plan(_)
        | Error::MissingAligner { .. }
        | Error::MissingVerbalizer { .. }
        | Error::MissingDependency { .. }
        | Error::LabelSpaceMismatch { .. } => XlpStatus::Plan,
        Error::Unrepresentable { .. } => XlpStatus::Unrepresentable,
        Error::Transport { .. } => XlpStatus::Transport,
        Error::Protocol(_) => XlpStatus::Protocol,
        Error::CacheMiss(_) => XlpStatus::CacheMiss,
        Error::Record { .. }
        | Error::UnknownLanguage(_)
        | Error::UnknownLabel { .. }
        | Error::ZeroNorm
        | Error::NonFinite
        | Error::IndexFormat(_)
        | Error::InvalidArgument(_) => XlpStatus::InvalidArgument,
        _ => XlpStatus::Internal,
    }
}

struct Failure(XlpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: Option<String>) {
    let message = message.map(|m| CString::new(m.replace('\0', " ")).unwrap_or_default());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> XlpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error(None);
            XlpStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(Some(message));
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_last_error(Some(format!("internal panic: {message}")));
            XlpStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(XlpStatus::NullArgument, format!("`{name}` is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(XlpStatus::InvalidArgument, message.into())
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{name}` is not UTF-8")))
}

unsafe fn optional_text<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, name).map(Some)
    }
}

unsafe fn floats<'a>(p: *const f32, n: usize, name: &str) -> Result<&'a [f32], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn strings<'a>(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<&'a str>, Failure> {
    if p.is_null() {
        return if n == 0 { Ok(Vec::new()) } else { Err(null(name)) };
    }
    slice::from_raw_parts(p, n).iter().map(|&s| text(s, name)).collect()
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| invalid("string contains a NUL byte"))
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn xlp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn xlp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn xlp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Cosine similarity of two `dim`-long vectors.
///
/// # Safety
/// `a` and `b` must point to `dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xlp_cosine_similarity(a: *const f32, b: *const f32, dim: usize, out_value: *mut f64) -> XlpStatus {
    guard(|| {
        let a = Vector::new(floats(a, dim, "a")?.to_vec())?;
        let b = Vector::new(floats(b, dim, "b")?.to_vec())?;
        *out(out_value, "out_value")? = cosine_similarity(&a, &b)?;
        Ok(())
    })
}

/// Writes the `dim`-dimensional character-trigram hashing embedding of
/// `text` to `out_vector`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_vector` must have room for
/// `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn xlp_hashing_embed(text_in: *const c_char, dim: usize, out_vector: *mut f32) -> XlpStatus {
    guard(|| {
        let t = text(text_in, "text")?;
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        if out_vector.is_null() {
            return Err(null("out_vector"));
        }
        let v = HashingEmbedder::new(dim).embed_one(t);
        slice::from_raw_parts_mut(out_vector, dim).copy_from_slice(v.as_slice());
        Ok(())
    })
}

/// Macro-F1 of `n` predictions against `n` gold labels over the label set
/// `labels`.
///
/// # Safety
/// The arrays must hold `n`, `n` and `n_labels` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn xlp_macro_f1(
    predictions: *const *const c_char,
    golds: *const *const c_char,
    n: usize,
    labels: *const *const c_char,
    n_labels: usize,
    out_value: *mut f64,
) -> XlpStatus {
    guard(|| {
        let predictions = strings(predictions, n, "predictions")?;
        let golds = strings(golds, n, "golds")?;
        let labels = strings(labels, n_labels, "labels")?;
        let lang: LanguageCode = "xx".parse()?;
        let space = LabelSpace::new(
            lang,
            labels.iter().map(|l| Label { id: l.to_string(), verbalization: l.to_string() }).collect(),
        )?;
        *out(out_value, "out_value")? = macro_f1(&predictions, &golds, &space)?;
        Ok(())
    })
}

/// Exact cosine index over unit vectors.
pub struct XlpIndex {
    inner: EmbeddingIndex,
}

/// Builds an index from `n` row-major vectors of `dim` floats, one id each.
///
/// # Safety
/// `ids` must hold `n` values and `data` `n * dim` floats; `out_index` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn xlp_index_from_vectors(
    fingerprint: *const c_char,
    ids: *const u64,
    data: *const f32,
    n: usize,
    dim: usize,
    out_index: *mut *mut XlpIndex,
) -> XlpStatus {
    guard(|| {
        let slot = out(out_index, "out_index")?;
        let fingerprint = optional_text(fingerprint, "fingerprint")?.unwrap_or("ffi");
        if ids.is_null() {
            return Err(null("ids"));
        }
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let ids = slice::from_raw_parts(ids, n);
        let data = floats(data, n * dim, "data")?;
        let entries = ids
            .iter()
            .zip(data.chunks_exact(dim))
            .map(|(&id, row)| Ok((usize::try_from(id).map_err(|_| invalid("id too large"))?, Vector::new(row.to_vec())?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let inner = EmbeddingIndex::from_vectors(fingerprint, entries)?;
        *slot = Box::into_raw(Box::new(XlpIndex { inner }));
        Ok(())
    })
}

/// Loads an index file written by `xlprompt index` or [`xlp_index_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xlp_index_load(path: *const c_char, out_index: *mut *mut XlpIndex) -> XlpStatus {
    guard(|| {
        let slot = out(out_index, "out_index")?;
        let inner = EmbeddingIndex::load(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(XlpIndex { inner }));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn xlp_index_save(index: *const XlpIndex, path: *const c_char) -> XlpStatus {
    guard(|| {
        let index = index.as_ref().ok_or_else(|| null("index"))?;
        index.inner.save(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Number of entries, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn xlp_index_len(index: *const XlpIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.len())
}

/// Vector dimension, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn xlp_index_dim(index: *const XlpIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.dim())
}

unsafe fn search(
    index: *const XlpIndex,
    query: *const f32,
    dim: usize,
    k: usize,
    out_ids: *mut u64,
    out_scores: *mut f64,
    most_similar: bool,
) -> XlpStatus {
    guard(|| {
        let index = index.as_ref().ok_or_else(|| null("index"))?;
        let q = Vector::new(floats(query, dim, "query")?.to_vec())?;
        if out_ids.is_null() || out_scores.is_null() {
            return Err(null("out_ids/out_scores"));
        }
        let hits: Vec<SimilarityHit> = if most_similar { index.inner.top_k(&q, k)? } else { index.inner.bottom_k(&q, k)? };
        let ids = slice::from_raw_parts_mut(out_ids, k);
        let scores = slice::from_raw_parts_mut(out_scores, k);
        for (i, hit) in hits.iter().enumerate() {
            ids[i] = hit.example_id as u64;
            scores[i] = hit.score;
        }
        Ok(())
    })
}

/// The `k` most similar entries, by descending score then ascending id.
///
/// # Safety
/// `query` must hold `dim` floats; `out_ids` and `out_scores` room for `k`
/// values each.
#[no_mangle]
pub unsafe extern "C" fn xlp_index_top_k(
    index: *const XlpIndex,
    query: *const f32,
    dim: usize,
    k: usize,
    out_ids: *mut u64,
    out_scores: *mut f64,
) -> XlpStatus {
    search(index, query, dim, k, out_ids, out_scores, true)
}

/// The `k` least similar entries, by ascending score then ascending id.
///
/// # Safety
/// As for [`xlp_index_top_k`].
#[no_mangle]
pub unsafe extern "C" fn xlp_index_bottom_k(
    index: *const XlpIndex,
    query: *const f32,
    dim: usize,
    k: usize,
    out_ids: *mut u64,
    out_scores: *mut f64,
) -> XlpStatus {
    search(index, query, dim, k, out_ids, out_scores, false)
}

/// # Safety
/// `index` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xlp_index_free(index: *mut XlpIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// An experiment config with its dataset, scorer and other resources
/// loaded.
pub struct XlpEngine {
    config: ExperimentConfig,
    resources: Resources,
}

/// Loads the experiment config at `config_path`, applying `n_overrides`
/// `key=value` overrides in order.
///
/// # Safety
/// `config_path` must be a NUL-terminated string, `overrides` an array of
/// `n_overrides` such strings (or null when zero), `out_engine` writable.
#[no_mangle]
pub unsafe extern "C" fn xlp_engine_open(
    config_path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out_engine: *mut *mut XlpEngine,
) -> XlpStatus {
    guard(|| {
        let slot = out(out_engine, "out_engine")?;
        let path = PathBuf::from(text(config_path, "config_path")?);
        let overrides: Vec<String> = strings(overrides, n_overrides, "overrides")?.into_iter().map(String::from).collect();
        let config = ExperimentConfig::load(&path, &overrides)?;
        let resources = Resources::from_config(&config)?;
        *slot = Box::into_raw(Box::new(XlpEngine { config, resources }));
        Ok(())
    })
}

/// Builds the prompt `strategy` produces for test example `test_id` and
/// returns the plan as JSON. `source` may be null for the config's first
/// source language.
///
/// # Safety
/// `engine` must be a live handle, strings NUL-terminated, `out_json`
/// writable. Release the result with [`xlp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn xlp_engine_show_prompt(
    engine: *const XlpEngine,
    strategy: *const c_char,
    test_id: usize,
    source: *const c_char,
    seed: u64,
    out_json: *mut *mut c_char,
) -> XlpStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let slot = out(out_json, "out_json")?;
        let strategy: Strategy = text(strategy, "strategy")?.parse()?;
        let source: Option<LanguageCode> = optional_text(source, "source")?.map(str::parse).transpose()?;
        let plan = single_prompt(&engine.config, &engine.resources, &strategy, test_id, source.as_ref(), seed)?;
        *slot = owned_string(serde_json::to_string(&plan).map_err(|e| invalid(e.to_string()))?)?;
        Ok(())
    })
}

/// Runs the configured grid and returns the report as JSON. When `out_dir`
/// is not null, reports and audit trails are written there too. Failed
/// cells are part of the report, not an error.
///
/// # Safety
/// `engine` must be a live handle, `out_dir` null or NUL-terminated,
/// `out_json` writable. Release the result with [`xlp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn xlp_engine_run(
    engine: *const XlpEngine,
    out_dir: *const c_char,
    out_json: *mut *mut c_char,
) -> XlpStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let slot = out(out_json, "out_json")?;
        let dir = optional_text(out_dir, "out_dir")?.map(PathBuf::from);
        let options = RunOptions { out_dir: dir.clone(), interrupt: None };
        let report = run_experiment(&engine.config, &engine.resources, &options)?;
        engine.resources.scorer.save()?;
        if let Some(dir) = &dir {
            emit_all(&report, dir)?;
        }
        *slot = owned_string(serde_json::to_string(&report).map_err(|e| invalid(e.to_string()))?)?;
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xlp_engine_free(engine: *mut XlpEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}
