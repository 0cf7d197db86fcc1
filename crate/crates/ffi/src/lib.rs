//! C ABI over the `mgsa` crate.
//!
//! Every fallible call returns an [`MgsaStatus`]; on failure the message is
//! available from [`mgsa_last_error`] on the same thread. Strings returned
//! through out-pointers are owned by the caller and released with
//! [`mgsa_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mgsa::config::ModelConfig;
use mgsa::error::Error;
use mgsa::kg::{Example, KnowledgeGraph, Triple};
use mgsa::model::Model;
use mgsa::pipeline::prepare_graph;
use mgsa::seq2seq::{beam_generate, greedy_generate};
use mgsa::vocab::Vocab;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgsaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidGraph = 5,
    Checkpoint = 6,
    Internal = 7,
}

/// Opaque handle to a loaded model.
pub struct MgsaModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MgsaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            "io" => MgsaStatus::Io,
            "parse" => MgsaStatus::Parse,
            "validation" | "too_long" => MgsaStatus::InvalidGraph,
            "checkpoint" | "config" => MgsaStatus::Checkpoint,
            _ => MgsaStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MgsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MgsaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside mgsa");
            MgsaStatus::Internal
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MgsaStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MgsaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn check_out<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(MgsaStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn into_c(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(MgsaStatus::Internal, "output contains a NUL byte".into()))
}

/// `[["head", "relation", "tail"], ...]`
fn parse_graph(json: &str) -> Result<KnowledgeGraph, Failure> {
    let rows: Vec<[String; 3]> =
        serde_json::from_str(json).map_err(|e| Failure(MgsaStatus::Parse, format!("triples: {e}")))?;
    let triples = rows.iter().map(|[h, r, t]| Triple::new(h, r, t)).collect();
    Ok(KnowledgeGraph::new(triples)?)
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mgsa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `mgsa train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mgsa_model_load(path: *const c_char, out: *mut *mut MgsaModel) -> MgsaStatus {
    guard(|| {
        check_out(out, "out")?;
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let model = Model::load(path)?;
        *out = Box::into_raw(Box::new(MgsaModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`mgsa_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`mgsa_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgsa_model_free(model: *mut MgsaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mgsa_model_vocab_size(model: *const MgsaModel, out: *mut usize) -> MgsaStatus {
    guard(|| {
        check_out(out, "out")?;
        let m = model
            .as_ref()
            .ok_or_else(|| Failure(MgsaStatus::NullArgument, "model is null".into()))?;
        *out = m.model.vocab.len();
        Ok(())
    })
}

/// Generates text for a graph given as a JSON array of
/// `[head, relation, tail]` string triples. `beam` 0 or 1 decodes greedily.
///
/// # Safety
/// `model` must be a live handle, `triples_json` NUL-terminated, and `out` a
/// valid pointer. The string stored in `out` must be released with
/// [`mgsa_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mgsa_generate(
    model: *const MgsaModel,
    triples_json: *const c_char,
    beam: u32,
    out: *mut *mut c_char,
) -> MgsaStatus {
    guard(|| {
        check_out(out, "out")?;
        *out = ptr::null_mut();
        let m = model
            .as_ref()
            .ok_or_else(|| Failure(MgsaStatus::NullArgument, "model is null".into()))?;
        let g = parse_graph(read_str(triples_json, "triples_json")?)?;
        // the reference is never read during decoding
        let ex = Example::new(g, vec!["-".into()])?;
        let text = if beam <= 1 {
            greedy_generate(&m.model, &ex)?
        } else {
            beam_generate(&m.model, &ex, beam as usize)?
        };
        *out = into_c(text)?;
        Ok(())
    })
}

/// Structure matrices of a graph as JSON with keys `units`, `rel_e`, `adj`
/// and `rel_w`, using the default model configuration.
///
/// # Safety
/// `triples_json` must be NUL-terminated and `out` a valid pointer. The
/// string stored in `out` must be released with [`mgsa_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mgsa_structure_matrices(triples_json: *const c_char, out: *mut *mut c_char) -> MgsaStatus {
    guard(|| {
        check_out(out, "out")?;
        *out = ptr::null_mut();
        let g = parse_graph(read_str(triples_json, "triples_json")?)?;
        let p = prepare_graph(&g, &Vocab::from_words([]), &ModelConfig::default())?;
        let units: Vec<&str> = (0..p.graph.num_units()).map(|u| p.graph.unit_label(u)).collect();
        let v = serde_json::json!({
            "units": units,
            "rel_e": p.matrices.rel_e,
            "adj": p.matrices.adj,
            "rel_w": p.matrices.rel_w,
        });
        *out = into_c(v.to_string())?;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mgsa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn mgsa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
