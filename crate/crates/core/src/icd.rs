//! ICD-9 / ICD-10 code normalization and the ICD-9 to ICD-10 General
//! Equivalence Mapping (GEM).
//!
//! Codes are stored undotted and uppercase (`J449`, `1890`). The dotted form
//! (`J44.9`, `189.0`) is produced only for display.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token substituted for ICD-9 codes with no GEM target.
pub const UNMAPPED_TOKEN: &str = "UNK-CODE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeSystem {
    Icd9,
    Icd10,
}

impl CodeSystem {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "icd9" | "icd9cm" | "9" => Some(CodeSystem::Icd9),
            "icd10" | "icd10cm" | "10" => Some(CodeSystem::Icd10),
            _ => None,
        }
    }
}

impl fmt::Display for CodeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeSystem::Icd9 => "icd9",
            CodeSystem::Icd10 => "icd10",
        })
    }
}

/// A validated, dot-free, uppercase ICD code.
///
/// The only value that does not satisfy the code syntax is the
/// [`UNMAPPED_TOKEN`] sentinel produced by [`map_sequence_9_to_10`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NormalizedCode {
    text: String,
    system: CodeSystem,
}

impl NormalizedCode {
    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn system(&self) -> CodeSystem {
        self.system
    }

    pub fn unmapped() -> Self {
        Self { text: UNMAPPED_TOKEN.to_string(), system: CodeSystem::Icd10 }
    }

    pub fn is_unmapped(&self) -> bool {
        self.text == UNMAPPED_TOKEN
    }

    /// Display form with the conventional decimal point.
    pub fn dotted(&self) -> String {
        let split = match self.system {
            CodeSystem::Icd10 => 3,
            CodeSystem::Icd9 if self.text.starts_with('E') => 4,
            CodeSystem::Icd9 => 3,
        };
        if self.is_unmapped() || self.text.len() <= split {
            self.text.clone()
        } else {
            format!("{}.{}", &self.text[..split], &self.text[split..])
        }
    }
}

impl fmt::Display for NormalizedCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl AsRef<str> for NormalizedCode {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

fn malformed(raw: &str, reason: &'static str) -> Error {
    Error::MalformedCode { raw: raw.to_string(), reason }
}

/// Trim, drop dots, uppercase and validate a code for `system`.
pub fn normalize_code(raw: &str, system: CodeSystem) -> Result<NormalizedCode> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(malformed(raw, "empty code"));
    }
    let text: String = trimmed.chars().filter(|&c| c != '.').collect::<String>().to_ascii_uppercase();
    if !text.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit()) {
        return Err(malformed(raw, "illegal character"));
    }
    if !(3..=7).contains(&text.len()) {
        return Err(malformed(raw, "length must be 3 to 7 characters"));
    }
    let first = text.as_bytes()[0] as char;
    let leading_ok = match system {
        CodeSystem::Icd9 => first.is_ascii_digit() || first == 'E' || first == 'V',
        CodeSystem::Icd10 => first.is_ascii_uppercase(),
    };
    if !leading_ok {
        return Err(malformed(raw, "wrong leading character for coding system"));
    }
    Ok(NormalizedCode { text, system })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemTarget {
    pub code: NormalizedCode,
    /// Raw flag field, verbatim.
    pub flags: String,
}

/// ICD-9 to ICD-10 crosswalk. Immutable after load.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GemTable {
    entries: BTreeMap<String, Vec<GemTarget>>,
}

/// Disambiguation for one-to-many GEM rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapPolicy {
    /// First listed target wins.
    #[default]
    First,
}

impl GemTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<GemTarget>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::GemParse { path: origin.to_path_buf(), line: i + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let flags = fields[2];
            if !flags.chars().all(|c| c.is_ascii_digit()) {
                return Err(err(format!("flag field {flags:?} is not numeric")));
            }
            let source = normalize_code(fields[0], CodeSystem::Icd9).map_err(|e| err(e.to_string()))?;
            // CMS "no map" rows carry target NoDx and the second flag digit set.
            if flags.as_bytes().get(1) == Some(&b'1') || fields[1].eq_ignore_ascii_case("NoDx") {
                continue;
            }
            let target = normalize_code(fields[1], CodeSystem::Icd10).map_err(|e| err(e.to_string()))?;
            entries
                .entry(source.text)
                .or_default()
                .push(GemTarget { code: target, flags: flags.to_string() });
        }
        Ok(Self { entries })
    }

    pub fn lookup(&self, code: &str) -> Option<&[GemTarget]> {
        self.entries.get(code).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn map_code(&self, code: &NormalizedCode, policy: MapPolicy) -> Option<&NormalizedCode> {
        let targets = self.lookup(code.as_str())?;
        match policy {
            MapPolicy::First => targets.first().map(|t| &t.code),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappedSequence {
    pub codes: Vec<NormalizedCode>,
    pub unmapped_count: usize,
}

/// Replace every ICD-9 code by its ICD-10 GEM target. Unmappable codes become
/// [`UNMAPPED_TOKEN`], so length and positions are preserved.
pub fn map_sequence_9_to_10(codes: &[NormalizedCode], gem: &GemTable, policy: MapPolicy) -> MappedSequence {
    let mut unmapped_count = 0;
    let codes = codes
        .iter()
        .map(|c| match gem.map_code(c, policy) {
            Some(t) => t.clone(),
            None => {
                unmapped_count += 1;
                NormalizedCode::unmapped()
            }
        })
        .collect();
    MappedSequence { codes, unmapped_count }
}
