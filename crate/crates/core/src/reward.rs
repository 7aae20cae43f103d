//! Offline static reward: a quality score plus a weighted factuality bonus.
//!
//! Both inputs live on a 0–100 scale and come from [`Scorer`] implementations,
//! so concrete models (neural QE, word aligners, remote services) can be
//! swapped in without touching the scoring pipeline.

use rayon::prelude::*;

use crate::datamodel::CandidatePool;
use crate::error::{Error, Result};
use crate::Token;

/// Failure reported by a scorer for a single (source, candidate) input.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct ScorerError(pub String);

/// A deterministic 0–100 scorer of a candidate translation given its source.
pub trait Scorer: Send + Sync {
    fn score(&self, source: &[Token], candidate: &[Token]) -> std::result::Result<f64, ScorerError>;

    /// Whether concurrent calls are allowed. Serial scorers are evaluated in
    /// candidate order on the calling thread.
    fn concurrent(&self) -> bool {
        true
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, source: &[Token], candidate: &[Token]) -> std::result::Result<f64, ScorerError> {
        (**self).score(source, candidate)
    }

    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticRewardConfig {
    /// Weight of the factuality bonus.
    pub lambda_f: f64,
}

impl Default for StaticRewardConfig {
    fn default() -> Self {
        StaticRewardConfig { lambda_f: 1.0 }
    }
}

impl StaticRewardConfig {
    pub fn new(lambda_f: f64) -> Result<Self> {
        let cfg = StaticRewardConfig { lambda_f };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f.is_finite() && self.lambda_f >= 0.0) {
            return Err(Error::contract(format!(
                "lambda_f must be a finite non-negative number, got {}",
                self.lambda_f
            )));
        }
        Ok(())
    }

    /// Upper end of the static score range, `100 * (1 + lambda_f)`.
    pub fn max_score(&self) -> f64 {
        100.0 * (1.0 + self.lambda_f)
    }
}

fn check_unit_range(name: &str, v: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::contract(format!("{name} = {v} is outside [0, 100]")));
    }
    Ok(())
}

/// `r_qe + lambda_f * s_align`.
pub fn static_score(r_qe: f64, s_align: f64, cfg: &StaticRewardConfig) -> Result<f64> {
    cfg.validate()?;
    check_unit_range("r_qe", r_qe)?;
    check_unit_range("s_align", s_align)?;
    Ok(r_qe + cfg.lambda_f * s_align)
}

fn run_scorer(pool: &CandidatePool, scorer: &dyn Scorer, what: &str) -> Result<Vec<f64>> {
    let source = &pool.source.tokens;
    let one = |(i, c): (usize, &crate::datamodel::Candidate)| -> Result<f64> {
        let fail = |message: String| Error::Scorer {
            pool: pool.source.id.clone(),
            candidate: i,
            message,
        };
        let v = scorer
            .score(source, &c.tokens)
            .map_err(|e| fail(format!("{what}: {e}")))?;
        if !(0.0..=100.0).contains(&v) {
            return Err(fail(format!("{what} returned {v}, outside [0, 100]")));
        }
        Ok(v)
    };
    // indexed collect keeps candidate order regardless of completion order
    if scorer.concurrent() {
        pool.candidates.par_iter().enumerate().map(one).collect()
    } else {
        pool.candidates.iter().enumerate().map(one).collect()
    }
}

/// Fill `r_qe`, `s_align` and `r_s` on every score card of the pool.
pub fn score_pool(
    pool: &CandidatePool,
    qe: &dyn Scorer,
    align: &dyn Scorer,
    cfg: &StaticRewardConfig,
) -> Result<CandidatePool> {
    cfg.validate()?;
    if pool.k() < 2 {
        return Err(Error::contract(format!(
            "pool '{}' has K = {}, need at least 2",
            pool.source.id,
            pool.k()
        )));
    }
    let q = run_scorer(pool, qe, "quality scorer")?;
    let a = run_scorer(pool, align, "alignment scorer")?;
    let mut out = pool.clone();
    for ((card, q), a) in out.scorecards.iter_mut().zip(q).zip(a) {
        card.r_qe = q;
        card.s_align = a;
        card.r_s = static_score(q, a, cfg)?;
    }
    Ok(out)
}

/// [`score_pool`] over a dataset, pools in parallel, output in input order.
pub fn score_corpus(
    pools: &[CandidatePool],
    qe: &dyn Scorer,
    align: &dyn Scorer,
    cfg: &StaticRewardConfig,
) -> Result<Vec<CandidatePool>> {
    if qe.concurrent() && align.concurrent() {
        pools.par_iter().map(|p| score_pool(p, qe, align, cfg)).collect()
    } else {
        pools.iter().map(|p| score_pool(p, qe, align, cfg)).collect()
    }
}
