//! C ABI over the codchain library.
//!
//! Every function returns a [`CcStatus`]. On failure the message is kept per
//! thread and read with [`cc_last_error`]. Handles are opaque and released
//! with their `_free` function. Strings returned through `out` pointers are
//! owned by the caller and released with [`cc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use codchain::acme::CausalGraph;
use codchain::eval::corpus_bleu;
use codchain::icd::{normalize_code, CodeSystem};
use codchain::model::Seq2Seq;
use codchain::search::{beam_decode, greedy_decode, Conditioned};
use codchain::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Parse = 4,
    Io = 5,
    Model = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcSystem {
    Icd9 = 9,
    Icd10 = 10,
}

/// Systems cross the boundary as plain integers so that unknown values are
/// rejected rather than undefined.
fn system_of(raw: u32) -> Result<CodeSystem, Failure> {
    match raw {
        x if x == CcSystem::Icd9 as u32 => Ok(CodeSystem::Icd9),
        x if x == CcSystem::Icd10 as u32 => Ok(CodeSystem::Icd10),
        other => Err(Failure(CcStatus::InvalidArgument, format!("unknown code system {other}"))),
    }
}

/// Corpus BLEU. `p2` is meaningful only when `has_p2` is true.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CcBleu {
    pub p1: f64,
    pub p2: f64,
    pub has_p2: bool,
    pub bp: f64,
    pub score: f64,
}

/// Causal-relationship table.
pub struct CcGraph {
    inner: CausalGraph,
}

/// Trained encoder-decoder.
pub struct CcModel {
    inner: Seq2Seq,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::Io { .. } => CcStatus::Io,
            Error::OutOfVocabIndex { .. } | Error::NonFiniteLoss | Error::NonFiniteGradient(_) | Error::Checkpoint(_) => CcStatus::Model,
            _ => CcStatus::Parse,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Failure(CcStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn read_strs<'a>(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<&'a str>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    (0..n).map(|i| unsafe { read_str(*p.add(i), what) }).collect()
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    unsafe { out.write(value) };
    Ok(())
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn cc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Normalizes `raw` into dot-free uppercase form. `system` is a `CcSystem`.
///
/// # Safety
/// `raw` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_normalize_code(raw: *const c_char, system: u32, out: *mut *mut c_char) -> CcStatus {
    guard(|| {
        let raw = unsafe { read_str(raw, "raw") }?;
        let code = normalize_code(raw, system_of(system)?)?;
        unsafe { write_out(out, to_c_string(code.as_str().to_string()), "out") }
    })
}

/// Loads an ACME table from a file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_graph_load(path: *const c_char, out: *mut *mut CcGraph) -> CcStatus {
    guard(|| {
        let path = unsafe { read_str(path, "path") }?;
        let g = CausalGraph::load(path)?;
        unsafe { write_out(out, Box::into_raw(Box::new(CcGraph { inner: g })), "out") }
    })
}

/// Parses an ACME table held in memory.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_graph_parse(text: *const c_char, out: *mut *mut CcGraph) -> CcStatus {
    guard(|| {
        let text = unsafe { read_str(text, "text") }?;
        let g = CausalGraph::parse(text, "<memory>".as_ref())?;
        unsafe { write_out(out, Box::into_raw(Box::new(CcGraph { inner: g })), "out") }
    })
}

/// # Safety
/// `graph` must come from `cc_graph_load` or `cc_graph_parse`, or be null.
#[no_mangle]
pub unsafe extern "C" fn cc_graph_free(graph: *mut CcGraph) {
    if !graph.is_null() {
        drop(unsafe { Box::from_raw(graph) });
    }
}

/// Number of table lines read.
///
/// # Safety
/// `graph` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_graph_rule_count(graph: *const CcGraph, out: *mut usize) -> CcStatus {
    guard(|| {
        let g = unsafe { handle(graph, "graph") }?;
        unsafe { write_out(out, g.inner.rule_count(), "out") }
    })
}

/// Whether `cause` may directly lead to `effect`. Codes must be normalized.
///
/// # Safety
/// `graph` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cc_graph_is_valid_pair(
    graph: *const CcGraph,
    cause: *const c_char,
    effect: *const c_char,
    out: *mut bool,
) -> CcStatus {
    guard(|| {
        let g = unsafe { handle(graph, "graph") }?;
        let (c, e) = unsafe { (read_str(cause, "cause")?, read_str(effect, "effect")?) };
        unsafe { write_out(out, g.inner.is_valid_pair_str(c, e), "out") }
    })
}

/// Checks a chain, underlying cause first. `first_bad` receives the index
/// of the first invalid pair, or -1.
///
/// # Safety
/// `codes` must hold `n` NUL-terminated strings; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_graph_chain_is_valid(
    graph: *const CcGraph,
    codes: *const *const c_char,
    n: usize,
    valid: *mut bool,
    first_bad: *mut isize,
) -> CcStatus {
    guard(|| {
        let g = unsafe { handle(graph, "graph") }?;
        let chain = unsafe { read_strs(codes, n, "codes") }?;
        if chain.is_empty() {
            return Err(Failure(CcStatus::InvalidArgument, "chain is empty".into()));
        }
        let v = g.inner.chain_is_valid(&chain);
        unsafe {
            write_out(valid, v.valid, "valid")?;
            write_out(first_bad, v.first_bad_index.map_or(-1, |i| i as isize), "first_bad")
        }
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_model_load(path: *const c_char, out: *mut *mut CcModel) -> CcStatus {
    guard(|| {
        let path = unsafe { read_str(path, "path") }?;
        let m = Seq2Seq::load(path)?;
        unsafe { write_out(out, Box::into_raw(Box::new(CcModel { inner: m })), "out") }
    })
}

/// # Safety
/// `model` must come from `cc_model_load`, or be null.
#[no_mangle]
pub unsafe extern "C" fn cc_model_free(model: *mut CcModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Proposes up to `beam_size` chains for priority-ordered source codes.
/// `out_json` receives a JSON array of `{chain, log_prob, finished,
/// edge_valid}`, best first. `graph` may be null unless `constrained`.
/// `system` is a `CcSystem`.
///
/// # Safety
/// Handles must be live or null as documented; `codes` must hold `n`
/// NUL-terminated strings; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_model_translate(
    model: *const CcModel,
    graph: *const CcGraph,
    codes: *const *const c_char,
    n: usize,
    system: u32,
    beam_size: usize,
    max_len: usize,
    constrained: bool,
    out_json: *mut *mut c_char,
) -> CcStatus {
    guard(|| {
        let m = &unsafe { handle(model, "model") }?.inner;
        let graph = unsafe { graph.as_ref() }.map(|g| &g.inner);
        let raw = unsafe { read_strs(codes, n, "codes") }?;
        if raw.is_empty() || beam_size == 0 || max_len == 0 {
            return Err(Failure(CcStatus::InvalidArgument, "codes, beam_size and max_len must be non-empty".into()));
        }
        let system = system_of(system)?;
        let normalized = raw.iter().map(|c| normalize_code(c, system)).collect::<Result<Vec<_>, _>>()?;
        let mask = match (constrained, graph) {
            (false, _) => None,
            (true, Some(g)) => Some(g.build_constraint_mask(&m.tgt_vocab)),
            (true, None) => return Err(Failure(CcStatus::InvalidArgument, "constrained decoding needs a graph".into())),
        };
        let src = m.src_vocab.encode_all(&normalized);
        let cond = Conditioned::new(m, &src)?;
        let hyps = if beam_size == 1 {
            vec![greedy_decode(&cond, max_len, mask.as_ref())]
        } else {
            beam_decode(&cond, beam_size, max_len, mask.as_ref())
        };
        let list: Vec<serde_json::Value> = hyps
            .iter()
            .map(|h| {
                let chain = m.tgt_vocab.decode_codes(&h.tokens);
                let edge_valid = graph.map(|g| g.edge_validity(&chain));
                serde_json::json!({ "chain": chain, "log_prob": h.log_prob, "finished": h.finished, "edge_valid": edge_valid })
            })
            .collect();
        let text = serde_json::to_string(&list).map_err(Error::from)?;
        unsafe { write_out(out_json, to_c_string(text), "out_json") }
    })
}

/// Corpus BLEU over `n` candidate/reference pairs given as
/// whitespace-separated code sequences.
///
/// # Safety
/// `candidates` and `references` must each hold `n` NUL-terminated strings;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cc_corpus_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut CcBleu,
) -> CcStatus {
    guard(|| {
        let cands = unsafe { read_strs(candidates, n, "candidates") }?;
        let refs = unsafe { read_strs(references, n, "references") }?;
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let pairs: Vec<_> = cands.iter().zip(&refs).map(|(c, r)| (split(c), split(r))).collect();
        let b = corpus_bleu(&pairs)?;
        let report = CcBleu { p1: b.p1, p2: b.p2.unwrap_or(0.0), has_p2: b.p2.is_some(), bp: b.bp, score: b.score };
        unsafe { write_out(out, report, "out") }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status() {
        assert_eq!(guard(|| panic!("boom")), CcStatus::Panic);
        let msg = unsafe { CStr::from_ptr(cc_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
        assert_eq!(guard(|| Ok(())), CcStatus::Ok);
        assert!(cc_last_error().is_null());
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { cc_graph_load(ptr::null(), &mut out) }, CcStatus::NullPointer);
        assert!(out.is_null());
        let mut n = 0;
        assert_eq!(unsafe { cc_graph_rule_count(ptr::null(), &mut n) }, CcStatus::NullPointer);
    }
}
