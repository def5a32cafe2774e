//! C ABI for the slc pipeline.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`/`*_build` and
//! released by the matching `*_free`. Every fallible call returns an [`SlcStatus`]; on failure
//! [`slc_last_error_message`] describes the error. Strings returned through `out_*` pointers
//! are owned by the caller and must be released with [`slc_string_free`]. Structured results
//! (selections, turns, cue reports) are returned as JSON text.
//!
//! Handles are not synchronized: a handle may be used from any thread, but not from two
//! threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use slc::backends::ImageRef;
use slc::config::AppConfig;
use slc::detection::{self, DetectionError, Query};
use slc::dictionary::{self, Dictionary, DictionaryError};
use slc::pipeline::{Ablation, Pipeline, PipelineError, PreparedScenario};
use slc::reflection::{self, YesNo};
use slc::registry::{ConceptId, Registry, RegistryError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    DuplicateId = 4,
    MalformedId = 5,
    DimensionMismatch = 6,
    Io = 7,
    Parse = 8,
    Backend = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

pub struct SlcRegistry {
    inner: Registry,
}

pub struct SlcDictionary {
    inner: Dictionary,
}

pub struct SlcPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: SlcStatus,
    message: String,
}

impl Failure {
    fn new(status: SlcStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<RegistryError> for Failure {
    fn from(e: RegistryError) -> Self {
        let status = match &e {
            RegistryError::DuplicateId(_) => SlcStatus::DuplicateId,
            RegistryError::MalformedId(_) => SlcStatus::MalformedId,
            RegistryError::DimensionMismatch { .. } => SlcStatus::DimensionMismatch,
            RegistryError::Io(_) => SlcStatus::Io,
            RegistryError::Parse(_) | RegistryError::Corrupt(_) | RegistryError::UnsupportedVersion(_) => SlcStatus::Parse,
            _ => SlcStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<DictionaryError> for Failure {
    fn from(e: DictionaryError) -> Self {
        let status = match &e {
            DictionaryError::DimensionMismatch { .. } => SlcStatus::DimensionMismatch,
            DictionaryError::Io(_) => SlcStatus::Io,
            DictionaryError::Parse(_) | DictionaryError::UnsupportedVersion(_) => SlcStatus::Parse,
            _ => SlcStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<DetectionError> for Failure {
    fn from(e: DetectionError) -> Self {
        let status = match &e {
            DetectionError::Backend(_) => SlcStatus::Backend,
            DetectionError::Unparseable | DetectionError::InvalidPresent(_) => SlcStatus::Parse,
            _ => SlcStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Selection(d) => d.into(),
            PipelineError::Detection(d) => d.into(),
            other => Failure::new(SlcStatus::Backend, other.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(SlcStatus::Parse, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `body`, converting errors and panics into a status plus the thread's last error.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SlcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            SlcStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(_) => {
            set_last_error("internal panic");
            SlcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(SlcStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(SlcStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(SlcStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(SlcStatus::NullPointer, format!("{name} is null")))
}

unsafe fn put<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(SlcStatus::NullPointer, format!("{name} is null")));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure::new(SlcStatus::InvalidArgument, "result contains a nul byte"))?;
    put(out, c.into_raw(), "out")
}

/// Message for the last failed call on this thread, or null after a successful call. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn slc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn slc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn slc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- registry ----

#[no_mangle]
pub extern "C" fn slc_registry_new() -> *mut SlcRegistry {
    Box::into_raw(Box::new(SlcRegistry { inner: Registry::new() }))
}

/// Loads a registry file; a missing file yields an empty registry.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn slc_registry_load(path: *const c_char, out: *mut *mut SlcRegistry) -> SlcStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = Registry::load(Path::new(path))?;
        put(out, Box::into_raw(Box::new(SlcRegistry { inner })), "out")
    })
}

/// # Safety
/// `registry` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn slc_registry_save(registry: *const SlcRegistry, path: *const c_char) -> SlcStatus {
    guard(|| {
        let r = handle(registry, "registry")?;
        r.inner.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `registry` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn slc_registry_free(registry: *mut SlcRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Number of registered concepts; 0 for a null handle.
///
/// # Safety
/// `registry` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slc_registry_len(registry: *const SlcRegistry) -> usize {
    registry.as_ref().map_or(0, |r| r.inner.len())
}

/// Registers a concept. `embeddings` holds `count` row-major vectors of `dimension` values.
///
/// # Safety
/// `registry` must be a live handle; `id` and `description` valid C strings; `embeddings`
/// must point to `count * dimension` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn slc_registry_register(
    registry: *mut SlcRegistry,
    id: *const c_char,
    description: *const c_char,
    embeddings: *const f64,
    count: usize,
    dimension: usize,
) -> SlcStatus {
    guard(|| {
        let r = handle_mut(registry, "registry")?;
        let id = str_arg(id, "id")?;
        let description = str_arg(description, "description")?;
        if count == 0 || dimension == 0 {
            return Err(RegistryError::EmptyEmbeddings.into());
        }
        if embeddings.is_null() {
            return Err(Failure::new(SlcStatus::NullPointer, "embeddings is null"));
        }
        let total = count
            .checked_mul(dimension)
            .ok_or_else(|| Failure::new(SlcStatus::InvalidArgument, "count * dimension overflows"))?;
        let flat = std::slice::from_raw_parts(embeddings, total);
        let rows = flat.chunks(dimension).map(<[f64]>::to_vec).collect();
        r.inner.register_concept(id, description, rows)?;
        Ok(())
    })
}

/// Writes the scenario embedding of all registered concepts into `out` (capacity `capacity`)
/// and its length into `out_len`. Returns `BufferTooSmall` with `out_len` set when `capacity`
/// is insufficient.
///
/// # Safety
/// `registry` must be a live handle; `out` must hold `capacity` writable doubles; `out_len`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn slc_registry_scenario_embedding(
    registry: *const SlcRegistry,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> SlcStatus {
    guard(|| {
        let r = handle(registry, "registry")?;
        let scenario = r.inner.scenario()?;
        let emb = scenario.embedding();
        put(out_len, emb.len(), "out_len")?;
        if capacity < emb.len() {
            return Err(Failure::new(
                SlcStatus::BufferTooSmall,
                format!("need {} doubles, have {capacity}", emb.len()),
            ));
        }
        if out.is_null() {
            return Err(Failure::new(SlcStatus::NullPointer, "out is null"));
        }
        ptr::copy_nonoverlapping(emb.as_ptr(), out, emb.len());
        Ok(())
    })
}

// ---- dictionary ----

/// Clusters the registry into `k` meta-concepts. `adapter_refs_json` maps cluster index to
/// adapter identifier (object or array); null names them `metac-<index>`.
///
/// # Safety
/// `registry` must be a live handle; `adapter_refs_json` null or a valid C string; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn slc_dictionary_build(
    registry: *const SlcRegistry,
    k: usize,
    seed: u64,
    adapter_refs_json: *const c_char,
    out: *mut *mut SlcDictionary,
) -> SlcStatus {
    guard(|| {
        let r = handle(registry, "registry")?;
        let refs = if adapter_refs_json.is_null() {
            (0..k).map(|i| (i, format!("metac-{i}"))).collect()
        } else {
            dictionary::parse_adapter_refs(str_arg(adapter_refs_json, "adapter_refs_json")?)?
        };
        let inner = dictionary::build_dictionary(r.inner.concepts(), k, seed, &refs)?;
        put(out, Box::into_raw(Box::new(SlcDictionary { inner })), "out")
    })
}

/// # Safety
/// `path` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn slc_dictionary_load(path: *const c_char, out: *mut *mut SlcDictionary) -> SlcStatus {
    guard(|| {
        let inner = Dictionary::load(Path::new(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(SlcDictionary { inner })), "out")
    })
}

/// # Safety
/// `dictionary` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn slc_dictionary_save(dictionary: *const SlcDictionary, path: *const c_char) -> SlcStatus {
    guard(|| {
        let d = handle(dictionary, "dictionary")?;
        d.inner.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `dictionary` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn slc_dictionary_free(dictionary: *mut SlcDictionary) {
    if !dictionary.is_null() {
        drop(Box::from_raw(dictionary));
    }
}

/// Selects the `top_k` adapters for `embedding` (length `dimension`). The selection is written
/// to `out_json` as `{"chosen": [{index, adapter_ref, score, weight}], "top_k": n}`.
///
/// # Safety
/// `dictionary` must be a live handle; `embedding` must hold `dimension` readable doubles;
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn slc_dictionary_select(
    dictionary: *const SlcDictionary,
    embedding: *const f64,
    dimension: usize,
    top_k: usize,
    out_json: *mut *mut c_char,
) -> SlcStatus {
    guard(|| {
        let d = handle(dictionary, "dictionary")?;
        if embedding.is_null() {
            return Err(Failure::new(SlcStatus::NullPointer, "embedding is null"));
        }
        let emb = std::slice::from_raw_parts(embedding, dimension);
        let selection = d.inner.select(emb, top_k)?;
        put_string(out_json, serde_json::to_string(&selection)?)
    })
}

/// Index of the top-ranked adapter for `embedding`, written to `out_index`.
///
/// # Safety
/// As for [`slc_dictionary_select`]; `out_index` writable.
#[no_mangle]
pub unsafe extern "C" fn slc_dictionary_select_index(
    dictionary: *const SlcDictionary,
    embedding: *const f64,
    dimension: usize,
    out_index: *mut usize,
) -> SlcStatus {
    guard(|| {
        let d = handle(dictionary, "dictionary")?;
        if embedding.is_null() {
            return Err(Failure::new(SlcStatus::NullPointer, "embedding is null"));
        }
        let selection = d.inner.select(std::slice::from_raw_parts(embedding, dimension), 1)?;
        put(out_index, selection.primary().index, "out_index")
    })
}

// ---- pipeline ----

/// Builds a pipeline from a TOML config file (only its model backends are used).
///
/// # Safety
/// `config_path` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn slc_pipeline_from_config(config_path: *const c_char, out: *mut *mut SlcPipeline) -> SlcStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let config = AppConfig::load(Path::new(path)).map_err(|e| Failure::new(SlcStatus::InvalidArgument, e.to_string()))?;
        let inner = config
            .pipeline()
            .map_err(|e| Failure::new(SlcStatus::InvalidArgument, e.to_string()))?;
        put(out, Box::into_raw(Box::new(SlcPipeline { inner })), "out")
    })
}

/// # Safety
/// `pipeline` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn slc_pipeline_free(pipeline: *mut SlcPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Answers `question` about `image` (path or URL) for the scenario of every registered
/// concept. The full turn (answer, cues, verified cues, audit, adapter, transcript) is written
/// to `out_json`.
///
/// # Safety
/// Handles must be live; strings valid C strings; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn slc_pipeline_ask(
    pipeline: *const SlcPipeline,
    registry: *const SlcRegistry,
    dictionary: *const SlcDictionary,
    image: *const c_char,
    question: *const c_char,
    top_k: usize,
    use_small: bool,
    use_reflection: bool,
    out_json: *mut *mut c_char,
) -> SlcStatus {
    guard(|| {
        let p = handle(pipeline, "pipeline")?;
        let r = handle(registry, "registry")?;
        let d = handle(dictionary, "dictionary")?;
        let query = Query::new(ImageRef::parse(str_arg(image, "image")?), str_arg(question, "question")?)?;
        let prepared = PreparedScenario::new(r.inner.scenario()?, &d.inner, top_k)?;
        let turn = p.inner.ask(
            &prepared,
            &query,
            Ablation {
                use_small,
                use_reflection,
            },
        )?;
        put_string(out_json, serde_json::to_string(&turn)?)
    })
}

// ---- parsing helpers ----

/// Parses a detector reply against `ids_json` (a JSON array of concept ids). The complete cue
/// report is written to `out_json`.
///
/// # Safety
/// Strings must be valid C strings; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn slc_parse_cue_report(
    raw_reply: *const c_char,
    ids_json: *const c_char,
    out_json: *mut *mut c_char,
) -> SlcStatus {
    guard(|| {
        let raw = str_arg(raw_reply, "raw_reply")?;
        let ids: Vec<ConceptId> = serde_json::from_str(str_arg(ids_json, "ids_json")?)?;
        let report = detection::parse_cue_report(raw, &ids)?;
        put_string(out_json, serde_json::to_string(&report)?)
    })
}

/// Scans `raw` for `expected_count` yes/no answers, writing 1 for yes and 0 for no into `out`.
///
/// # Safety
/// `raw` must be a valid C string; `out` must hold `expected_count` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn slc_parse_yes_no(raw: *const c_char, expected_count: usize, out: *mut u8) -> SlcStatus {
    guard(|| {
        let raw = str_arg(raw, "raw")?;
        if expected_count == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(Failure::new(SlcStatus::NullPointer, "out is null"));
        }
        let answers = reflection::parse_yes_no(raw, expected_count);
        for (i, a) in answers.into_iter().enumerate() {
            out.add(i).write(u8::from(a == YesNo::Yes));
        }
        Ok(())
    })
}
