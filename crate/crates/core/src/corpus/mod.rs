//! Decedent records, parallel-corpus files, vocabularies, splits and the
//! synthetic corpus generator.

mod split;
mod synth;
mod vocab;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::icd::{normalize_code, CodeSystem, NormalizedCode};

pub use split::{kfold, split, Fold, SplitSpec, Splits};
pub use synth::{generate_synthetic, SyntheticConfig, SyntheticCorpus, SyntheticOracle};
pub use vocab::{Side, Vocabulary};

pub const MAX_SRC_LEN: usize = 45;
pub const MAX_TGT_LEN: usize = 18;

/// One decedent: priority-ordered diagnoses and the causal chain, underlying
/// cause first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub id: String,
    pub src: Vec<NormalizedCode>,
    pub tgt: Vec<NormalizedCode>,
}

impl Record {
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Error::InvalidRecord { id: self.id.clone(), msg };
        if self.src.is_empty() || self.src.len() > MAX_SRC_LEN {
            return Err(bad(format!("source length {} outside 1..={MAX_SRC_LEN}", self.src.len())));
        }
        if self.tgt.is_empty() || self.tgt.len() > MAX_TGT_LEN {
            return Err(bad(format!("target length {} outside 1..={MAX_TGT_LEN}", self.tgt.len())));
        }
        Ok(())
    }

    pub fn src_tokens(&self) -> Vec<String> {
        self.src.iter().map(|c| c.as_str().to_string()).collect()
    }

    pub fn tgt_tokens(&self) -> Vec<String> {
        self.tgt.iter().map(|c| c.as_str().to_string()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    src: Vec<String>,
    tgt: Vec<String>,
}

fn parse_line(line: &str, system: CodeSystem, path: &Path, lineno: usize) -> Result<Vec<NormalizedCode>> {
    line.split_whitespace()
        .map(|tok| {
            normalize_code(tok, system).map_err(|e| Error::CorpusParse {
                path: path.to_path_buf(),
                line: lineno,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load aligned `.src` / `.tgt` files; record `i` pairs line `i` of each.
/// Target codes are always ICD-10.
pub fn load_parallel(src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>, src_system: CodeSystem) -> Result<Vec<Record>> {
    let (src_path, tgt_path) = (src_path.as_ref(), tgt_path.as_ref());
    let src_text = read(src_path)?;
    let tgt_text = read(tgt_path)?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch { src_lines: src_lines.len(), tgt_lines: tgt_lines.len() });
    }
    let mut records = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let record = Record {
            id: format!("{}", i + 1),
            src: parse_line(s, src_system, src_path, i + 1)?,
            tgt: parse_line(t, CodeSystem::Icd10, tgt_path, i + 1)?,
        };
        record.check()?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_parallel(records: &[Record], src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>) -> Result<()> {
    let join = |codes: &[NormalizedCode]| codes.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" ");
    let mut src = String::new();
    let mut tgt = String::new();
    for r in records {
        src.push_str(&join(&r.src));
        src.push('\n');
        tgt.push_str(&join(&r.tgt));
        tgt.push('\n');
    }
    write_file(src_path.as_ref(), src.as_bytes())?;
    write_file(tgt_path.as_ref(), tgt.as_bytes())
}

/// One JSON object per line: `{"id": .., "src": [..], "tgt": [..]}`.
pub fn load_jsonl(path: impl AsRef<Path>, src_system: CodeSystem) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::CorpusParse { path: path.to_path_buf(), line: i + 1, msg };
        let raw: JsonRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let codes = |toks: &[String], sys| {
            toks.iter().map(|t| normalize_code(t, sys).map_err(|e| err(e.to_string()))).collect::<Result<Vec<_>>>()
        };
        let record = Record { src: codes(&raw.src, src_system)?, tgt: codes(&raw.tgt, CodeSystem::Icd10)?, id: raw.id };
        record.check()?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl(records: &[Record], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let j = JsonRecord { id: r.id.clone(), src: r.src_tokens(), tgt: r.tgt_tokens() };
        serde_json::to_writer(&mut out, &j)?;
        out.push(b'\n');
    }
    write_file(path.as_ref(), &out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// SHA-256 over ids and codes, in order. Used to prove a fold was not touched.
pub fn corpus_hash(records: &[Record]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update([0]);
        for c in &r.src {
            h.update(c.as_str().as_bytes());
            h.update([1]);
        }
        h.update([2]);
        for c in &r.tgt {
            h.update(c.as_str().as_bytes());
            h.update([1]);
        }
        h.update([3]);
    }
    hex::encode(h.finalize())
}
