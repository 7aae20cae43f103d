//! Core domain types and JSONL persistence.
//!
//! A dataset is a sequence of [`CandidatePool`]s, one per source sentence,
//! written one JSON object per line with a fixed field order
//! (`source`, `candidates`, `scorecards`). Every float is written with 17
//! significant digits so that reading a file back reproduces the exact bits.
//!
//! Candidate token sequences carry their terminal EOS token (id equal to the
//! target vocabulary size), so a candidate is never empty: a full omission is
//! the one-token sequence `[EOS]`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Token;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceUnit {
    pub id: String,
    pub tokens: Vec<Token>,
    /// Free-form direction tag, e.g. `"syn→syn"`.
    pub direction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PolicySample,
    /// A policy sample that hit the length cap and had EOS forced.
    PolicySampleCapped,
    OracleReference,
    Corrupted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    None,
    Partial,
    Full,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::None, Severity::Partial, Severity::Full];

    /// Ordinal "human label" used for correlation analysis: none=2, partial=1, full=0.
    pub fn label_rank(self) -> f64 {
        match self {
            Severity::None => 2.0,
            Severity::Partial => 1.0,
            Severity::Full => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::None => "none",
            Severity::Partial => "partial",
            Severity::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionLabel {
    pub hallucination: Severity,
    pub omission: Severity,
}

impl CorruptionLabel {
    pub const CLEAN: CorruptionLabel = CorruptionLabel {
        hallucination: Severity::None,
        omission: Severity::None,
    };

    pub fn is_valid(&self) -> bool {
        !(self.hallucination == Severity::Full && self.omission == Severity::Full)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<Token>,
    pub provenance: Provenance,
    pub corruption: Option<CorruptionLabel>,
}

impl Candidate {
    pub fn new(tokens: Vec<Token>, provenance: Provenance) -> Self {
        Candidate {
            tokens,
            provenance,
            corruption: None,
        }
    }

    pub fn corrupted(tokens: Vec<Token>, label: CorruptionLabel) -> Self {
        Candidate {
            tokens,
            provenance: Provenance::Corrupted,
            corruption: Some(label),
        }
    }

    /// The corruption label, treating uncorrupted candidates as clean.
    pub fn label(&self) -> CorruptionLabel {
        self.corruption.unwrap_or(CorruptionLabel::CLEAN)
    }
}

/// Per-candidate scores. Unfilled fields are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    #[serde(with = "float17")]
    pub r_qe: f64,
    #[serde(with = "float17")]
    pub s_align: f64,
    #[serde(with = "float17")]
    pub r_s: f64,
    #[serde(with = "float17")]
    pub r_d: f64,
    #[serde(with = "float17")]
    pub rs_hat: f64,
    #[serde(with = "float17")]
    pub rd_hat: f64,
    #[serde(with = "float17")]
    pub r_fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub source: SourceUnit,
    pub candidates: Vec<Candidate>,
    pub scorecards: Vec<ScoreCard>,
}

impl CandidatePool {
    /// A pool with zeroed score cards.
    pub fn new(source: SourceUnit, candidates: Vec<Candidate>) -> Self {
        let scorecards = vec![ScoreCard::default(); candidates.len()];
        CandidatePool {
            source,
            candidates,
            scorecards,
        }
    }

    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn static_scores(&self) -> Vec<f64> {
        self.scorecards.iter().map(|c| c.r_s).collect()
    }

    /// Check every type invariant of the pool and its members.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Invariant {
            pool: self.source.id.clone(),
            message,
        };
        if self.source.id.is_empty() {
            return Err(fail("source id is empty".into()));
        }
        if self.source.tokens.is_empty() {
            return Err(fail("source tokens are empty".into()));
        }
        if self.candidates.len() != self.scorecards.len() {
            return Err(fail(format!(
                "K mismatch: {} candidates vs {} scorecards",
                self.candidates.len(),
                self.scorecards.len()
            )));
        }
        if self.candidates.len() < 2 {
            return Err(fail(format!("K = {} but at least 2 candidates are required", self.candidates.len())));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if c.tokens.is_empty() {
                return Err(fail(format!("candidate {i} has no tokens")));
            }
            match (c.provenance, c.corruption) {
                (Provenance::Corrupted, None) => {
                    return Err(fail(format!("candidate {i} is corrupted but has no corruption label")))
                }
                (Provenance::Corrupted, Some(label)) if !label.is_valid() => {
                    return Err(fail(format!(
                        "candidate {i} is labelled both full hallucination and full omission"
                    )))
                }
                (Provenance::Corrupted, Some(_)) => {}
                (_, Some(_)) => {
                    return Err(fail(format!(
                        "candidate {i} carries a corruption label but provenance is not corrupted"
                    )))
                }
                (_, None) => {}
            }
        }
        for (i, s) in self.scorecards.iter().enumerate() {
            let fields = [s.r_qe, s.s_align, s.r_s, s.r_d, s.rs_hat, s.rd_hat, s.r_fused];
            if fields.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("scorecard {i} has a non-finite field")));
            }
        }
        Ok(())
    }
}

/// Check per-pool invariants plus id uniqueness across the dataset.
pub fn validate_dataset(pools: &[CandidatePool]) -> Result<()> {
    let mut seen = HashSet::with_capacity(pools.len());
    for pool in pools {
        pool.validate()?;
        if !seen.insert(pool.source.id.as_str()) {
            return Err(Error::Invariant {
                pool: pool.source.id.clone(),
                message: "duplicate source id".into(),
            });
        }
    }
    Ok(())
}

/// Serialize one pool as a single JSON line (no trailing newline).
pub fn pool_to_line(pool: &CandidatePool) -> Result<String> {
    serde_json::to_string(pool).map_err(|e| Error::Invariant {
        pool: pool.source.id.clone(),
        message: format!("cannot serialize: {e}"),
    })
}

pub fn write_pools(pools: &[CandidatePool], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for pool in pools {
        let line = pool_to_line(pool)?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pools(path: &Path) -> Result<Vec<CandidatePool>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pools = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pool: CandidatePool = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        pools.push(pool);
    }
    validate_dataset(&pools)?;
    Ok(pools)
}

/// Vocabulary file: one token per line, line index = token id.
pub fn write_vocab(tokens: &[String], path: &Path) -> Result<()> {
    let mut body = String::new();
    for t in tokens {
        if t.contains('\n') || t.is_empty() {
            return Err(Error::contract(format!("invalid vocabulary entry {t:?}")));
        }
        body.push_str(t);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || !seen.insert(line) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("empty or duplicate vocabulary entry {line:?}"),
            });
        }
        tokens.push(line.to_string());
    }
    Ok(tokens)
}

/// Serde adapter writing `f64` with 17 significant digits (`{:.16e}`).
///
/// 17 significant digits is the smallest width that round-trips every f64;
/// the reader relies on serde_json's `float_roundtrip` parser.
pub mod float17 {
    use serde::{de::Error as _, ser::Error as _, Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::value::RawValue;

    pub fn format(v: f64) -> Option<String> {
        v.is_finite().then(|| format!("{v:.16e}"))
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        let text = format(*v).ok_or_else(|| S::Error::custom(format!("non-finite float {v}")))?;
        RawValue::from_string(text).map_err(S::Error::custom)?.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let v = f64::deserialize(d)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(D::Error::custom("non-finite float"))
        }
    }

    /// Same encoding for a whole vector.
    pub mod vec {
        use serde::{ser::SerializeSeq, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&super::Wrapped(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<f64>::deserialize(d)
        }
    }

    pub(crate) struct Wrapped(pub f64);

    impl Serialize for Wrapped {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            serialize(&self.0, s)
        }
    }
}
