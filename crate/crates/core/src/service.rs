//! HTTP API over a frozen model, validity graph and code dictionary.
//!
//! - `POST /v1/chains`: ranked chain proposals for a code list or a FHIR bundle
//! - `POST /v1/validate`: per-edge validity of a chain
//! - `GET /v1/codes?q=`: code autocomplete
//! - `GET /healthz`

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acme::{CausalGraph, ConstraintMask};
use crate::corpus::{Vocabulary, MAX_SRC_LEN};
use crate::error::{Error, Result};
use crate::icd::{map_sequence_9_to_10, normalize_code, CodeSystem, GemTable, MapPolicy, NormalizedCode};
use crate::model::Seq2Seq;
use crate::search::{beam_decode, greedy_decode, Conditioned};

const BUNDLED_DICTIONARY: &str = include_str!("../data/icd_demo.tsv");
pub const MAX_BEAM: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub code: String,
    pub system: CodeSystem,
    pub description: String,
}

/// Codes with short descriptions, sorted by code.
#[derive(Debug, Clone, Default)]
pub struct CodeDictionary {
    entries: Vec<CodeEntry>,
}

impl CodeDictionary {
    /// Lines of `system<TAB>code<TAB>description`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::CorpusParse { path: "<dictionary>".into(), line: i + 1, msg };
            let mut cols = line.splitn(3, '\t');
            let (Some(sys), Some(code), Some(desc)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad("expected system, code and description".into()));
            };
            let system = CodeSystem::parse(sys).ok_or_else(|| bad(format!("unknown system `{sys}`")))?;
            let code = normalize_code(code, system).map_err(|e| bad(e.to_string()))?;
            entries.push(CodeEntry { code: code.as_str().to_string(), system, description: desc.trim().to_string() });
        }
        entries.sort_by(|a, b| a.code.cmp(&b.code).then(a.system.cmp(&b.system)));
        Ok(Self { entries })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_DICTIONARY).expect("bundled dictionary parses")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose code starts with `prefix` (dots and case ignored).
    pub fn search(&self, prefix: &str, system: Option<CodeSystem>, limit: usize) -> Vec<CodeEntry> {
        let p: String = prefix.trim().chars().filter(|&c| c != '.').collect::<String>().to_ascii_uppercase();
        if p.is_empty() {
            return Vec::new();
        }
        let start = self.entries.partition_point(|e| e.code.as_str() < p.as_str());
        self.entries[start..]
            .iter()
            .take_while(|e| e.code.starts_with(&p))
            .filter(|e| system.is_none_or(|s| s == e.system))
            .take(limit)
            .cloned()
            .collect()
    }

    pub fn describe(&self, code: &str) -> Option<&str> {
        let i = self.entries.partition_point(|e| e.code.as_str() < code);
        self.entries.get(i).filter(|e| e.code == code).map(|e| e.description.as_str())
    }
}

/// Immutable state shared by all requests.
pub struct ServiceState {
    pub model: Seq2Seq,
    /// Coding system of the model's source side.
    pub model_system: CodeSystem,
    pub graph: Option<CausalGraph>,
    pub mask: Option<ConstraintMask>,
    pub gem: Option<GemTable>,
    pub dictionary: CodeDictionary,
    pub max_len: usize,
}

impl ServiceState {
    pub fn new(model: Seq2Seq, model_system: CodeSystem, graph: Option<CausalGraph>, gem: Option<GemTable>, dictionary: CodeDictionary) -> Self {
        let mask = graph.as_ref().map(|g| g.build_constraint_mask(&model.tgt_vocab));
        Self { model, model_system, graph, mask, gem, dictionary, max_len: 20 }
    }
}

/// Request failure with an HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn unprocessable(message: impl Into<String>) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRequest {
    #[serde(default)]
    pub codes: Option<Vec<String>>,
    #[serde(default)]
    pub system: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub constrained: bool,
    #[serde(default)]
    pub fhir_bundle: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainHypothesis {
    pub chain: Vec<String>,
    pub descriptions: Vec<Option<String>>,
    pub log_prob: f64,
    /// One flag per adjacent pair; null without a loaded table.
    pub edge_valid: Option<Vec<bool>>,
    pub finished: bool,
    /// Rows: generated codes then EOS; columns: source codes as decoded.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResponse {
    pub system: CodeSystem,
    /// Normalized input codes in priority order.
    pub codes: Vec<String>,
    /// Codes as fed to the model, after any crosswalk.
    pub model_codes: Vec<String>,
    /// Model inputs outside the training vocabulary.
    pub unknown_codes: Vec<String>,
    pub hypotheses: Vec<ChainHypothesis>,
}

fn system_of(uri: &str) -> Option<CodeSystem> {
    let s = uri.to_ascii_lowercase().replace(['-', '_', '.'], "");
    if s.contains("icd10") {
        Some(CodeSystem::Icd10)
    } else if s.contains("icd9") {
        Some(CodeSystem::Icd9)
    } else {
        None
    }
}

/// ICD codes of `Condition` resources in bundle order.
pub fn codes_from_fhir(bundle: &Value) -> std::result::Result<(CodeSystem, Vec<String>), ApiError> {
    let entries = bundle.get("entry").and_then(Value::as_array).ok_or_else(|| ApiError::unprocessable("fhir_bundle has no entry array"))?;
    let mut out: Vec<(CodeSystem, String)> = Vec::new();
    for entry in entries {
        let Some(res) = entry.get("resource") else { continue };
        if res.get("resourceType").and_then(Value::as_str) != Some("Condition") {
            continue;
        }
        let codings = res.pointer("/code/coding").and_then(Value::as_array).map(Vec::as_slice).unwrap_or_default();
        for coding in codings {
            let sys = coding.get("system").and_then(Value::as_str).and_then(system_of);
            if let (Some(sys), Some(code)) = (sys, coding.get("code").and_then(Value::as_str)) {
                out.push((sys, code.to_string()));
            }
        }
    }
    let Some(&(system, _)) = out.first() else {
        return Err(ApiError::unprocessable("fhir_bundle contains no ICD-9 or ICD-10 Condition codes"));
    };
    if out.iter().any(|(s, _)| *s != system) {
        return Err(ApiError::unprocessable("fhir_bundle mixes ICD-9 and ICD-10 codes"));
    }
    Ok((system, out.into_iter().map(|(_, c)| c).collect()))
}

/// Decodes chain proposals; the HTTP handler serializes exactly this value.
pub fn propose_chains(state: &ServiceState, req: &ChainRequest) -> std::result::Result<ChainResponse, ApiError> {
    let (system, raw) = match (&req.fhir_bundle, &req.codes) {
        (Some(b), _) => codes_from_fhir(b)?,
        (None, Some(codes)) => {
            let system = match &req.system {
                Some(s) => CodeSystem::parse(s).ok_or_else(|| ApiError::unprocessable(format!("unknown system `{s}`")))?,
                None => state.model_system,
            };
            (system, codes.clone())
        }
        (None, None) => return Err(ApiError::unprocessable("request needs `codes` or `fhir_bundle`")),
    };
    if raw.is_empty() || raw.len() > MAX_SRC_LEN {
        return Err(ApiError::unprocessable(format!("expected 1 to {MAX_SRC_LEN} codes, got {}", raw.len())));
    }
    if req.k == 0 || req.k > MAX_BEAM {
        return Err(ApiError::unprocessable(format!("k must be between 1 and {MAX_BEAM}")));
    }
    let codes: Vec<NormalizedCode> =
        raw.iter().map(|c| normalize_code(c, system)).collect::<Result<_>>().map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let model_codes = match (system, state.model_system) {
        (a, b) if a == b => codes.clone(),
        (CodeSystem::Icd9, CodeSystem::Icd10) => {
            let gem = state.gem.as_ref().ok_or_else(|| ApiError::unprocessable("model expects ICD-10 input and no GEM table is loaded"))?;
            map_sequence_9_to_10(&codes, gem, MapPolicy::First).codes
        }
        (a, b) => return Err(ApiError::unprocessable(format!("cannot convert {a} input for a {b} model"))),
    };
    let tokens: Vec<String> = model_codes.iter().map(|c| c.as_str().to_string()).collect();
    let src = state.model.src_vocab.encode_all(&tokens);
    let unknown_codes = tokens.iter().zip(&src).filter(|(_, &i)| i == Vocabulary::UNK).map(|(t, _)| t.clone()).collect();
    let mask = if req.constrained {
        Some(state.mask.as_ref().ok_or_else(|| ApiError::unprocessable("constrained decoding requested but no ACME table is loaded"))?)
    } else {
        None
    };
    let cond = Conditioned::new(&state.model, &src).map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() })?;
    let hyps = if req.k == 1 { vec![greedy_decode(&cond, state.max_len, mask)] } else { beam_decode(&cond, req.k, state.max_len, mask) };
    let hypotheses = hyps
        .into_iter()
        .map(|h| {
            let chain = state.model.tgt_vocab.decode_codes(&h.tokens);
            ChainHypothesis {
                descriptions: chain.iter().map(|c| state.dictionary.describe(c).map(String::from)).collect(),
                edge_valid: state.graph.as_ref().map(|g| g.edge_validity(&chain)),
                chain,
                log_prob: h.log_prob,
                finished: h.finished,
                attention: h.attention,
            }
        })
        .collect();
    Ok(ChainResponse {
        system,
        codes: codes.iter().map(|c| c.as_str().to_string()).collect(),
        model_codes: tokens,
        unknown_codes,
        hypotheses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateRequest {
    pub chain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateResponse {
    pub valid: bool,
    pub first_bad_index: Option<usize>,
    pub edge_valid: Vec<bool>,
}

pub fn validate_chain(state: &ServiceState, req: &ValidateRequest) -> std::result::Result<ValidateResponse, ApiError> {
    let graph = state.graph.as_ref().ok_or_else(|| ApiError { status: StatusCode::SERVICE_UNAVAILABLE, message: "no ACME table loaded".into() })?;
    if req.chain.is_empty() {
        return Err(ApiError::unprocessable("chain must not be empty"));
    }
    let chain: Vec<NormalizedCode> =
        req.chain.iter().map(|c| normalize_code(c, CodeSystem::Icd10)).collect::<Result<_>>().map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let v = graph.chain_is_valid(&chain);
    Ok(ValidateResponse { valid: v.valid, first_bad_index: v.first_bad_index, edge_valid: graph.edge_validity(&chain) })
}

#[derive(Debug, Deserialize)]
struct CodesQuery {
    #[serde(default)]
    q: String,
    #[serde(default)]
    system: Option<String>,
    #[serde(default)]
    limit: Option<usize>,
}

async fn chains(State(state): State<Arc<ServiceState>>, Json(req): Json<ChainRequest>) -> std::result::Result<Json<ChainResponse>, ApiError> {
    let st = state.clone();
    tokio::task::spawn_blocking(move || propose_chains(&st, &req))
        .await
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() })?
        .map(Json)
}

async fn validate(State(state): State<Arc<ServiceState>>, Json(req): Json<ValidateRequest>) -> std::result::Result<Json<ValidateResponse>, ApiError> {
    validate_chain(&state, &req).map(Json)
}

async fn codes(State(state): State<Arc<ServiceState>>, Query(q): Query<CodesQuery>) -> std::result::Result<Json<Vec<CodeEntry>>, ApiError> {
    let system = match q.system.as_deref() {
        Some(s) => Some(CodeSystem::parse(s).ok_or_else(|| ApiError::unprocessable(format!("unknown system `{s}`")))?),
        None => None,
    };
    Ok(Json(state.dictionary.search(&q.q, system, q.limit.unwrap_or(20).min(200))))
}

async fn healthz() -> Json<Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/chains", post(chains))
        .route("/v1/validate", post(validate))
        .route("/v1/codes", get(codes))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until the process exits.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
    axum::serve(listener, router(state)).await.map_err(|e| Error::io(addr.to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_search() {
        let d = CodeDictionary::bundled();
        assert!(d.len() > 50);
        let hits = d.search("i50", None, 10);
        assert!(!hits.is_empty());
        assert!(hits.iter().all(|e| e.code.starts_with("I50")));
        assert!(d.search("ZZ9", None, 10).is_empty());
        assert!(d.search("", None, 10).is_empty());
        assert_eq!(d.search("4", Some(CodeSystem::Icd9), 2).len(), 2);
        assert_eq!(d.describe("I500"), Some("Congestive heart failure"));
        assert!(CodeDictionary::parse("icd10\tI500\n").is_err());
        assert!(CodeDictionary::parse("icd11\tI500\tx\n").is_err());
    }

    #[test]
    fn fhir_extraction() {
        let bundle = serde_json::json!({
            "resourceType": "Bundle",
            "entry": [
                {"resource": {"resourceType": "Patient"}},
                {"resource": {"resourceType": "Condition", "code": {"coding": [{"system": "http://hl7.org/fhir/sid/icd-9-cm", "code": "428.0"}]}}},
                {"resource": {"resourceType": "Condition", "code": {"coding": [{"system": "http://snomed.info/sct", "code": "1234"}, {"system": "http://hl7.org/fhir/sid/icd-9-cm", "code": "189.0"}]}}}
            ]
        });
        assert_eq!(codes_from_fhir(&bundle).unwrap(), (CodeSystem::Icd9, vec!["428.0".to_string(), "189.0".to_string()]));
        let mixed = serde_json::json!({"entry": [
            {"resource": {"resourceType": "Condition", "code": {"coding": [{"system": "icd-9", "code": "4280"}]}}},
            {"resource": {"resourceType": "Condition", "code": {"coding": [{"system": "http://hl7.org/fhir/sid/icd-10", "code": "I500"}]}}}
        ]});
        assert!(codes_from_fhir(&mixed).is_err());
        assert!(codes_from_fhir(&serde_json::json!({"entry": []})).is_err());
        assert!(codes_from_fhir(&serde_json::json!({})).is_err());
    }
}
