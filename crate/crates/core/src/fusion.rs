//! Per-pool normalization and the curriculum-weighted fused score.
//!
//! Static scores and policy log-probabilities live on unrelated scales, so each
//! is z-scored across the K candidates of a pool before blending:
//!
//! ```text
//! r_fused = (1 - alpha_t) * z(r_s) + alpha_t * z(r_d)
//! ```
//!
//! `alpha_t` ramps linearly from `alpha_start` to `alpha_end` over the run and
//! advances once per optimizer step.

use crate::error::{Error, Result};

/// Population standard deviations at or below this are treated as zero.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// Z-score with population (divide-by-K) standard deviation.
///
/// A pool whose values are all (numerically) equal normalizes to all zeros.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::contract(format!(
            "zscore needs at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("zscore input contains a non-finite value"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= ZERO_VARIANCE {
        return Ok(vec![0.0; values.len()]);
    }
    let mut out: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    // second centering pass removes the rounding residue of the first
    let resid = out.iter().sum::<f64>() / n;
    out.iter_mut().for_each(|v| *v -= resid);
    Ok(out)
}

/// Linear schedule for the dynamic-score weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_steps: u64,
}

impl CurriculumSchedule {
    pub fn new(alpha_start: f64, alpha_end: f64, total_steps: u64) -> Result<Self> {
        let s = CurriculumSchedule {
            alpha_start,
            alpha_end,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// The 0.1 → 0.9 ramp.
    pub fn standard(total_steps: u64) -> Result<Self> {
        Self::new(0.1, 0.9, total_steps)
    }

    /// `alpha_t` fixed at zero: ranking by static score only.
    pub fn static_only(total_steps: u64) -> Result<Self> {
        Self::new(0.0, 0.0, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.alpha_start && self.alpha_start <= self.alpha_end && self.alpha_end <= 1.0;
        if !ok {
            return Err(Error::contract(format!(
                "curriculum requires 0 <= alpha_start <= alpha_end <= 1, got {} -> {}",
                self.alpha_start, self.alpha_end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::contract("curriculum total_steps must be positive"));
        }
        Ok(())
    }
}

/// Weight of the dynamic score at optimizer step `t`; clamps past the end.
pub fn alpha_at(t: i64, sched: &CurriculumSchedule) -> Result<f64> {
    sched.validate()?;
    if t < 0 {
        return Err(Error::contract(format!("step index must be non-negative, got {t}")));
    }
    let t = t as u64;
    if t >= sched.total_steps {
        return Ok(sched.alpha_end);
    }
    let frac = t as f64 / sched.total_steps as f64;
    Ok(sched.alpha_start + (sched.alpha_end - sched.alpha_start) * frac)
}

/// Static and dynamic signals for one pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    pub static_scores: Vec<f64>,
    pub dynamic_scores: Vec<f64>,
}

impl FusionInputs {
    pub fn new(static_scores: Vec<f64>, dynamic_scores: Vec<f64>) -> Result<Self> {
        let f = FusionInputs {
            static_scores,
            dynamic_scores,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.static_scores.len() != self.dynamic_scores.len() {
            return Err(Error::contract(format!(
                "fusion inputs differ in length: {} static vs {} dynamic",
                self.static_scores.len(),
                self.dynamic_scores.len()
            )));
        }
        if self.static_scores.len() < 2 {
            return Err(Error::contract("fusion needs K >= 2"));
        }
        Ok(())
    }
}

/// Normalized components and the fused score for one pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub rs_hat: Vec<f64>,
    pub rd_hat: Vec<f64>,
    pub fused: Vec<f64>,
}

pub fn fuse_detailed(inputs: &FusionInputs, alpha: f64) -> Result<Fused> {
    inputs.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha = {alpha} is outside [0, 1]")));
    }
    let rs_hat = zscore(&inputs.static_scores)?;
    let rd_hat = zscore(&inputs.dynamic_scores)?;
    let fused = rs_hat
        .iter()
        .zip(&rd_hat)
        .map(|(s, d)| (1.0 - alpha) * s + alpha * d)
        .collect();
    Ok(Fused { rs_hat, rd_hat, fused })
}

/// `(1 - alpha) * zscore(static) + alpha * zscore(dynamic)`, elementwise.
pub fn fuse(inputs: &FusionInputs, alpha: f64) -> Result<Vec<f64>> {
    fuse_detailed(inputs, alpha).map(|f| f.fused)
}
