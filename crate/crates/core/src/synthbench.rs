//! Synthetic translation task with controlled corruption and oracle scorers.
//!
//! Sources are drawn from a small Markov grammar over `vocab` tokens and
//! translated token-by-token through a fixed bijection. Corrupted variants of
//! the reference carry known hallucination/omission severities, which stand in
//! for human labels in the correlation analysis.
//!
//! Two oracles score candidates on a 0–100 scale:
//!
//! - [`CoverageOracle`]: `100 * recall * precision` of aligned tokens, which is
//!   exactly zero for a full hallucination or a full omission.
//! - [`FlawedQe`]: a fluency-dominated score with extra noise in the
//!   mid-coverage band, i.e. a quality estimator that cannot tell a fluent
//!   hallucination from a faithful translation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Candidate, CandidatePool, CorruptionLabel, Provenance, Severity, SourceUnit};
use crate::error::{Error, Result};
use crate::reward::{Scorer, ScorerError};
use crate::seed;
use crate::Token;

/// Direction tag written on generated sources.
pub const DIRECTION: &str = "syn→syn";

/// Parameters of the synthetic language pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Size of both the source and the target vocabulary.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of allowed successors of each token in the source grammar.
    pub branching: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab: 12,
            min_len: 3,
            max_len: 8,
            branching: 3,
            seed: 0,
        }
    }
}

/// A fixed synthetic language pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthTask {
    config: TaskConfig,
    /// `mapping[s]` is the target token aligned with source token `s`.
    mapping: Vec<Token>,
    /// Allowed successors of each source token.
    successors: Vec<Vec<Token>>,
    /// `plausible[a * vocab + b]`: target bigram `a b` occurs in the grammar.
    plausible: Vec<bool>,
}

impl SynthTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        let TaskConfig {
            vocab,
            min_len,
            max_len,
            branching,
            seed: task_seed,
        } = config;
        if vocab < 3 {
            return Err(Error::contract(format!("task.vocab must be at least 3, got {vocab}")));
        }
        if min_len < 2 || min_len > max_len {
            return Err(Error::contract(format!(
                "task length range [{min_len}, {max_len}] must satisfy 2 <= min_len <= max_len"
            )));
        }
        if max_len >= vocab {
            return Err(Error::contract(format!(
                "task.max_len = {max_len} must be below task.vocab = {vocab} so every source leaves an unaligned token"
            )));
        }
        if branching == 0 || branching > vocab {
            return Err(Error::contract(format!("task.branching must be in 1..={vocab}, got {branching}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(task_seed, 0x7A5C));
        let mut mapping: Vec<Token> = (0..vocab as Token).collect();
        mapping.shuffle(&mut rng);
        let all: Vec<Token> = (0..vocab as Token).collect();
        let successors: Vec<Vec<Token>> = (0..vocab)
            .map(|_| {
                let mut s: Vec<Token> = all.choose_multiple(&mut rng, branching).copied().collect();
                s.sort_unstable();
                s
            })
            .collect();
        let mut plausible = vec![false; vocab * vocab];
        for (a, succ) in successors.iter().enumerate() {
            for &b in succ {
                plausible[mapping[a] as usize * vocab + mapping[b as usize] as usize] = true;
            }
        }
        Ok(SynthTask {
            config,
            mapping,
            successors,
            plausible,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    /// EOS id on the target side.
    pub fn eos(&self) -> Token {
        self.config.vocab as Token
    }

    pub fn mapping(&self) -> &[Token] {
        &self.mapping
    }

    pub fn is_plausible_bigram(&self, a: Token, b: Token) -> bool {
        let v = self.config.vocab;
        (a as usize) < v && (b as usize) < v && self.plausible[a as usize * v + b as usize]
    }

    /// Draw one source sentence from the grammar.
    pub fn sample_source(&self, rng: &mut impl Rng) -> Vec<Token> {
        let len = rng.random_range(self.config.min_len..=self.config.max_len);
        let mut out = Vec::with_capacity(len);
        let mut tok = rng.random_range(0..self.config.vocab as Token);
        out.push(tok);
        while out.len() < len {
            tok = *self.successors[tok as usize].choose(rng).expect("branching >= 1");
            out.push(tok);
        }
        out
    }

    /// The faithful translation of `source`, terminated by EOS.
    pub fn reference(&self, source: &[Token]) -> Vec<Token> {
        let mut out: Vec<Token> = source.iter().map(|&s| self.mapping[s as usize]).collect();
        out.push(self.eos());
        out
    }

    /// Target tokens not aligned with any token of `source`.
    fn unaligned(&self, source: &[Token]) -> Vec<Token> {
        let image: HashSet<Token> = source.iter().map(|&s| self.mapping[s as usize]).collect();
        (0..self.config.vocab as Token).filter(|t| !image.contains(t)).collect()
    }

    /// Split off the EOS terminator and check token ranges.
    fn content<'a>(&self, source: &[Token], candidate: &'a [Token]) -> std::result::Result<&'a [Token], ScorerError> {
        let v = self.config.vocab as Token;
        if source.is_empty() || source.iter().any(|&t| t >= v) {
            return Err(ScorerError(format!("source token outside vocabulary of {v}")));
        }
        let body = match candidate.split_last() {
            Some((&last, body)) if last == self.eos() => body,
            _ => candidate,
        };
        if body.iter().any(|&t| t >= v) {
            return Err(ScorerError(format!("candidate token outside vocabulary of {v}")));
        }
        Ok(body)
    }

    /// `100 * recall * precision` over aligned tokens.
    pub fn coverage(&self, source: &[Token], candidate: &[Token]) -> std::result::Result<f64, ScorerError> {
        let body = self.content(source, candidate)?;
        if body.is_empty() {
            return Ok(0.0);
        }
        let present: HashSet<Token> = body.iter().copied().collect();
        let image: HashSet<Token> = source.iter().map(|&s| self.mapping[s as usize]).collect();
        let recalled = source
            .iter()
            .filter(|&&s| present.contains(&self.mapping[s as usize]))
            .count();
        let precise = body.iter().filter(|t| image.contains(t)).count();
        let recall = recalled as f64 / source.len() as f64;
        let precision = precise as f64 / body.len() as f64;
        Ok(100.0 * recall * precision)
    }

    /// Fraction of content tokens whose bigram with the previous token is
    /// plausible; the first token always counts. Empty content scores 0.
    pub fn fluency(&self, source: &[Token], candidate: &[Token]) -> std::result::Result<f64, ScorerError> {
        let body = self.content(source, candidate)?;
        if body.is_empty() {
            return Ok(0.0);
        }
        let ok = 1 + body.windows(2).filter(|w| self.is_plausible_bigram(w[0], w[1])).count();
        Ok(ok as f64 / body.len() as f64)
    }

    /// Apply one corruption to the reference of `source`.
    pub fn corrupt(&self, source: &[Token], label: CorruptionLabel, rng: &mut impl Rng) -> Result<Vec<Token>> {
        if !label.is_valid() {
            return Err(Error::contract("full hallucination combined with full omission"));
        }
        let n = source.len();
        let pick = |sev: Severity, rng: &mut dyn rand::RngCore| -> Vec<bool> {
            let count = match sev {
                Severity::None => 0,
                Severity::Partial => rng.random_range(1..n),
                Severity::Full => n,
            };
            let mut flags = vec![false; n];
            for i in rand::seq::index::sample(rng, n, count) {
                flags[i] = true;
            }
            flags
        };
        let replace = pick(label.hallucination, rng);
        let drop = pick(label.omission, rng);
        let unaligned = self.unaligned(source);
        let mut out = Vec::with_capacity(n + 1);
        for i in 0..n {
            if drop[i] && !replace[i] {
                continue;
            }
            let tok = if replace[i] {
                // prefer a hallucinated token that reads fluently on both sides
                let prev = out.last().copied();
                let next = (i + 1..n)
                    .find(|&j| !drop[j] || replace[j])
                    .filter(|&j| !replace[j])
                    .map(|j| self.mapping[source[j] as usize]);
                let fits_prev = |t: Token| prev.is_none_or(|p| self.is_plausible_bigram(p, t));
                let fits_next = |t: Token| next.is_none_or(|q| self.is_plausible_bigram(t, q));
                let both: Vec<Token> = unaligned.iter().copied().filter(|&t| fits_prev(t) && fits_next(t)).collect();
                let left: Vec<Token> = unaligned.iter().copied().filter(|&t| fits_prev(t)).collect();
                let pool = [&both, &left, &unaligned]
                    .into_iter()
                    .find(|p| !p.is_empty())
                    .expect("max_len < vocab leaves an unaligned token");
                *pool.choose(rng).expect("non-empty")
            } else {
                self.mapping[source[i] as usize]
            };
            out.push(tok);
        }
        out.push(self.eos());
        Ok(out)
    }
}

/// Category proportions for the K-1 non-reference slots of each pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeverityMix {
    pub none: f64,
    pub partial_hallucination: f64,
    pub full_hallucination: f64,
    pub partial_omission: f64,
    pub full_omission: f64,
}

impl Default for SeverityMix {
    fn default() -> Self {
        SeverityMix {
            none: 0.2,
            partial_hallucination: 0.25,
            full_hallucination: 0.15,
            partial_omission: 0.25,
            full_omission: 0.15,
        }
    }
}

impl SeverityMix {
    pub fn entries(&self) -> [(&'static str, f64, CorruptionLabel); 5] {
        let label = |hallucination, omission| CorruptionLabel { hallucination, omission };
        [
            ("none", self.none, CorruptionLabel::CLEAN),
            ("partial_hallucination", self.partial_hallucination, label(Severity::Partial, Severity::None)),
            ("full_hallucination", self.full_hallucination, label(Severity::Full, Severity::None)),
            ("partial_omission", self.partial_omission, label(Severity::None, Severity::Partial)),
            ("full_omission", self.full_omission, label(Severity::None, Severity::Full)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p, _) in self.entries() {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::contract(format!("severity_mix.{name} must be non-negative, got {p}")));
            }
        }
        let total: f64 = self.entries().iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("severity_mix proportions sum to {total}, expected 1")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> CorruptionLabel {
        let entries = self.entries();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (_, p, label) in entries {
            acc += p;
            if u < acc {
                return label;
            }
        }
        // rounding left u above the running total: take the last non-empty bin
        entries.iter().rev().find(|e| e.1 > 0.0).map_or(CorruptionLabel::CLEAN, |e| e.2)
    }
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_sources: usize,
    /// Candidates per pool, the reference included.
    pub k: usize,
    pub severity_mix: SeverityMix,
    pub seed: u64,
    /// Source ids are `{id_prefix}{index:05}`.
    pub id_prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_sources: 200,
            k: 16,
            severity_mix: SeverityMix::default(),
            seed: 1,
            id_prefix: "s".into(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::contract("corpus.n_sources must be positive"));
        }
        if self.k < 2 {
            return Err(Error::contract(format!("corpus.k must be at least 2, got {}", self.k)));
        }
        self.severity_mix.validate()
    }
}

/// Generate pools of the reference plus K-1 labelled variants.
///
/// Sources listed in `exclude` are redrawn, which keeps held-out corpora
/// disjoint from a training corpus. Each pool draws from its own derived seed.
pub fn gen_corpus(task: &SynthTask, cfg: &CorpusConfig, exclude: &HashSet<Vec<Token>>) -> Result<Vec<CandidatePool>> {
    cfg.validate()?;
    (0..cfg.n_sources)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, i as u64));
            let mut source = task.sample_source(&mut rng);
            let mut tries = 0;
            while exclude.contains(&source) {
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::contract("cannot draw a source outside the excluded set"));
                }
                source = task.sample_source(&mut rng);
            }
            let reference = task.reference(&source);
            let mut candidates = vec![Candidate::new(reference.clone(), Provenance::OracleReference)];
            for _ in 1..cfg.k {
                let label = cfg.severity_mix.draw(&mut rng);
                candidates.push(if label == CorruptionLabel::CLEAN {
                    Candidate::new(reference.clone(), Provenance::OracleReference)
                } else {
                    Candidate::corrupted(task.corrupt(&source, label, &mut rng)?, label)
                });
            }
            let unit = SourceUnit {
                id: format!("{}{i:05}", cfg.id_prefix),
                tokens: source,
                direction: DIRECTION.into(),
            };
            Ok(CandidatePool::new(unit, candidates))
        })
        .collect()
}

/// The source token sequences of a corpus, for use as an exclusion set.
pub fn source_set(pools: &[CandidatePool]) -> HashSet<Vec<Token>> {
    pools.iter().map(|p| p.source.tokens.clone()).collect()
}

/// Faithfulness oracle.
#[derive(Debug, Clone)]
pub struct CoverageOracle<'a> {
    pub task: &'a SynthTask,
}

impl Scorer for CoverageOracle<'_> {
    fn score(&self, source: &[Token], candidate: &[Token]) -> std::result::Result<f64, ScorerError> {
        self.task.coverage(source, candidate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleQeConfig {
    pub fluency_weight: f64,
    pub faithfulness_weight: f64,
    /// Noise standard deviation when the true coverage is in [30, 70].
    pub midrange_noise_sd: f64,
    /// Noise standard deviation everywhere else.
    pub base_noise_sd: f64,
    pub seed: u64,
}

impl Default for OracleQeConfig {
    fn default() -> Self {
        OracleQeConfig {
            fluency_weight: 0.65,
            faithfulness_weight: 0.35,
            midrange_noise_sd: 35.0,
            base_noise_sd: 2.0,
            seed: 0,
        }
    }
}

impl OracleQeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("qe.fluency_weight", self.fluency_weight),
            ("qe.faithfulness_weight", self.faithfulness_weight),
            ("qe.midrange_noise_sd", self.midrange_noise_sd),
            ("qe.base_noise_sd", self.base_noise_sd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::contract(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Lower and upper coverage bounds of the high-noise band.
pub const MIDRANGE: (f64, f64) = (30.0, 70.0);

/// Quality estimator with a built-in blind spot for fluent unfaithful output.
#[derive(Debug, Clone)]
pub struct FlawedQe<'a> {
    pub task: &'a SynthTask,
    pub config: OracleQeConfig,
}

impl Scorer for FlawedQe<'_> {
    fn score(&self, source: &[Token], candidate: &[Token]) -> std::result::Result<f64, ScorerError> {
        let cfg = &self.config;
        let coverage = self.task.coverage(source, candidate)?;
        let fluency = self.task.fluency(source, candidate)?;
        let sd = if (MIDRANGE.0..=MIDRANGE.1).contains(&coverage) {
            cfg.midrange_noise_sd
        } else {
            cfg.base_noise_sd
        };
        let noise = if sd > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::hash_tokens(cfg.seed, &[source, candidate]));
            Normal::new(0.0, sd).map_err(|e| ScorerError(e.to_string()))?.sample(&mut rng)
        } else {
            0.0
        };
        let raw = cfg.fluency_weight * 100.0 * fluency + cfg.faithfulness_weight * coverage + noise;
        Ok(raw.clamp(0.0, 100.0))
    }
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract(format!(
            "pearson needs two sequences of equal length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::contract("pearson correlation is undefined for zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One named metric's scores, `scores[pool][candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricScores {
    pub name: String,
    pub scores: Vec<Vec<f64>>,
}

/// Score every candidate of a corpus with a scorer.
pub fn score_matrix(pools: &[CandidatePool], name: &str, scorer: &dyn Scorer) -> Result<MetricScores> {
    let scores = pools
        .par_iter()
        .map(|p| {
            p.candidates
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    scorer.score(&p.source.tokens, &c.tokens).map_err(|e| Error::Scorer {
                        pool: p.source.id.clone(),
                        candidate: i,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricScores {
        name: name.into(),
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityCell {
    pub count: usize,
    /// Absent when no candidate has this severity.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTypeReport {
    pub none: SeverityCell,
    pub partial: SeverityCell,
    pub full: SeverityCell,
    /// Correlation with severity labels (none=2, partial=1, full=0).
    pub pearson_all: Option<f64>,
    pub pearson_without_partial: Option<f64>,
    /// `pearson_without_partial - pearson_all`.
    pub gain: Option<f64>,
}

impl ErrorTypeReport {
    pub fn cell(&self, s: Severity) -> &SeverityCell {
        match s {
            Severity::None => &self.none,
            Severity::Partial => &self.partial,
            Severity::Full => &self.full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub hallucination: ErrorTypeReport,
    pub omission: ErrorTypeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotivationReport {
    pub n_candidates: usize,
    pub metrics: Vec<MetricReport>,
}

fn error_type_report(points: &[(Severity, f64)]) -> ErrorTypeReport {
    let cell = |s: Severity| {
        let v: Vec<f64> = points.iter().filter(|p| p.0 == s).map(|p| p.1).collect();
        SeverityCell {
            count: v.len(),
            mean: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
        }
    };
    let corr = |keep: &dyn Fn(Severity) -> bool| {
        let (labels, scores): (Vec<f64>, Vec<f64>) = points
            .iter()
            .filter(|p| keep(p.0))
            .map(|p| (p.0.label_rank(), p.1))
            .unzip();
        pearson(&labels, &scores).ok()
    };
    let pearson_all = corr(&|_| true);
    let pearson_without_partial = corr(&|s| s != Severity::Partial);
    ErrorTypeReport {
        none: cell(Severity::None),
        partial: cell(Severity::Partial),
        full: cell(Severity::Full),
        pearson_all,
        pearson_without_partial,
        gain: pearson_all.zip(pearson_without_partial).map(|(a, b)| b - a),
    }
}

/// Per-severity means and correlation deltas for each metric.
///
/// The hallucination analysis uses every candidate without an omission, and
/// the omission analysis every candidate without a hallucination, so clean
/// candidates supply the "none" row of both.
pub fn motivation_report(pools: &[CandidatePool], metrics: &[MetricScores]) -> Result<MotivationReport> {
    for m in metrics {
        let shape_ok = m.scores.len() == pools.len() && m.scores.iter().zip(pools).all(|(s, p)| s.len() == p.k());
        if !shape_ok {
            return Err(Error::contract(format!("metric '{}' does not match the corpus shape", m.name)));
        }
    }
    let n_candidates = pools.iter().map(|p| p.k()).sum();
    let reports = metrics
        .iter()
        .map(|m| {
            let mut hall = Vec::new();
            let mut omit = Vec::new();
            for (pool, scores) in pools.iter().zip(&m.scores) {
                for (c, &s) in pool.candidates.iter().zip(scores) {
                    let label = c.label();
                    if label.omission == Severity::None {
                        hall.push((label.hallucination, s));
                    }
                    if label.hallucination == Severity::None {
                        omit.push((label.omission, s));
                    }
                }
            }
            MetricReport {
                name: m.name.clone(),
                hallucination: error_type_report(&hall),
                omission: error_type_report(&omit),
            }
        })
        .collect();
    Ok(MotivationReport {
        n_candidates,
        metrics: reports,
    })
}

impl MotivationReport {
    pub fn metric(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
        let gain = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:+.2}pt", 100.0 * x));
        let mut rows = vec![[
            "metric", "error", "none", "partial", "full", "r(all)", "r(no partial)", "gain",
        ]
        .map(String::from)
        .to_vec()];
        for m in &self.metrics {
            for (kind, r) in [("hallucination", &m.hallucination), ("omission", &m.omission)] {
                rows.push(vec![
                    m.name.clone(),
                    kind.into(),
                    fmt(r.none.mean, 2),
                    fmt(r.partial.mean, 2),
                    fmt(r.full.mean, 2),
                    fmt(r.pearson_all, 4),
                    fmt(r.pearson_without_partial, 4),
                    gain(r.gain),
                ]);
            }
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("candidates: {}\n", self.n_candidates);
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| {
                    if i < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

/// Header of the coverage-vs-QE scatter CSV.
pub const SCATTER_HEADER: &str = "source_id,candidate_idx,hallucination,omission,coverage,qe";

/// One CSV row per candidate with its labels, alignment score and QE score.
pub fn scatter_csv(pools: &[CandidatePool]) -> String {
    let mut out = String::from(SCATTER_HEADER);
    out.push('\n');
    for p in pools {
        for (i, (c, s)) in p.candidates.iter().zip(&p.scorecards).enumerate() {
            let label = c.label();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p.source.id,
                i,
                label.hallucination.as_str(),
                label.omission.as_str(),
                s.s_align,
                s.r_qe
            );
        }
    }
    out
}

/// Residual variance of `qe - coverage` inside and outside the mid band.
pub fn band_residual_variance(coverage: &[f64], qe: &[f64]) -> (Option<f64>, Option<f64>) {
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (c, q) in coverage.iter().zip(qe) {
        if (MIDRANGE.0..=MIDRANGE.1).contains(c) {
            inside.push(q - c);
        } else {
            outside.push(q - c);
        }
    }
    let var = |v: &[f64]| {
        (v.len() >= 2).then(|| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        })
    };
    (var(&inside), var(&outside))
}

/// Label counts per severity-mix category, in [`SeverityMix::entries`] order.
/// The first candidate of each pool (the reference) is skipped.
pub fn category_counts(pools: &[CandidatePool], mix: &SeverityMix) -> BTreeMap<&'static str, usize> {
    let mut counts: BTreeMap<&'static str, usize> = mix.entries().iter().map(|e| (e.0, 0)).collect();
    for p in pools {
        for c in p.candidates.iter().skip(1) {
            let label = c.label();
            if let Some(e) = mix.entries().iter().find(|e| e.2 == label) {
                *counts.get_mut(e.0).expect("initialised above") += 1;
            }
        }
    }
    counts
}
