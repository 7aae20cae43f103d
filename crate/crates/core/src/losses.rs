//! The composite preference objective over one candidate pool.
//!
//! ```text
//! L = lambda_pref * L_dmdpo + lambda_rank * L_rank + lambda_bc * L_bc
//!
//! L_dmdpo = -sum_i w_i * log sigmoid(beta * (logp[w_i] - logp[l_i]))
//!   w     = softmax(fused_gap / tau_w)                (per pool, over its pairs)
//! L_rank  = -sum_k P_s(k) * log P_pi(k)
//!   P_s   = softmax(s / tau_s),  P_pi = softmax(logp / tau_s)
//! L_bc    = -logp[best]
//! ```
//!
//! Every loss returns its gradient with respect to the per-candidate sequence
//! log-probabilities. Pair weights, the ranking and the BC target come from the
//! fused score and are treated as constants (no gradient flows through them);
//! the policy chain-rules the log-probability gradient into its parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::zscore;
use crate::pairing::PreferencePair;

/// Which static signal feeds the ListNet target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankScoreSpace {
    /// Raw `r_s` on its 0–200 scale.
    Raw,
    /// Per-pool z-scored `r_s`.
    #[default]
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta: f64,
    pub tau_w: f64,
    pub tau_s: f64,
    pub lambda_pref: f64,
    pub lambda_rank: f64,
    pub lambda_bc: f64,
    pub rank_score_space: RankScoreSpace,
    /// Subtract the frozen reference log-ratio inside the DPO sigmoid.
    pub use_reference: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.1,
            tau_w: 0.3,
            tau_s: 0.4,
            lambda_pref: 1.0,
            lambda_rank: 0.5,
            lambda_bc: 1.0,
            rank_score_space: RankScoreSpace::Normalized,
            use_reference: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("tau_w", self.tau_w), ("tau_s", self.tau_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::contract(format!("{name} must be strictly positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_pref", self.lambda_pref),
            ("lambda_rank", self.lambda_rank),
            ("lambda_bc", self.lambda_bc),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::contract(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss components and gradients for one pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dmdpo: f64,
    pub l_rank: f64,
    pub l_bc: f64,
    pub l_total: f64,
    /// d L_total / d logp[k].
    pub grad_logp: Vec<f64>,
    /// Unweighted component gradients, kept for diagnostics.
    pub grad_dmdpo: Vec<f64>,
    pub grad_rank: Vec<f64>,
    pub grad_bc: Vec<f64>,
    pub pair_weights: Vec<f64>,
    pub best_idx: usize,
}

/// Max-shifted softmax of `values / temperature`.
pub fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Max-shifted log-softmax of `values / temperature`.
pub fn log_softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = values.iter().map(|v| (v - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// `log sigmoid(x)`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of pair gaps divided by `tau_w`.
pub fn pair_weights(gaps: &[f64], tau_w: f64) -> Result<Vec<f64>> {
    if !(tau_w.is_finite() && tau_w > 0.0) {
        return Err(Error::contract(format!("tau_w must be strictly positive, got {tau_w}")));
    }
    if gaps.is_empty() {
        return Err(Error::contract("pair_weights needs at least one pair"));
    }
    if gaps.iter().any(|g| !g.is_finite()) {
        return Err(Error::contract("pair gap is not finite"));
    }
    Ok(softmax(gaps, tau_w))
}

fn check_logp(logp: &[f64]) -> Result<()> {
    if logp.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("log-probabilities must be finite"));
    }
    Ok(())
}

/// Weighted multi-pair DPO loss. Uses each pair's `weight` as given.
///
/// With `cfg.use_reference`, `reference_logp` must hold the frozen reference
/// policy's log-probabilities and the margin becomes
/// `(logp[w] - logp[l]) - (ref[w] - ref[l])`.
pub fn dmdpo_loss(
    pairs: &[PreferencePair],
    logp: &[f64],
    reference_logp: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_logp(logp)?;
    if pairs.is_empty() {
        return Err(Error::contract("dmdpo_loss needs at least one pair"));
    }
    let reference = if cfg.use_reference {
        let r = reference_logp.ok_or_else(|| Error::contract("use_reference is set but no reference log-probabilities were given"))?;
        if r.len() != logp.len() {
            return Err(Error::contract("reference log-probabilities differ in length"));
        }
        check_logp(r)?;
        Some(r)
    } else {
        None
    };
    let mut loss = 0.0;
    let mut grad = vec![0.0; logp.len()];
    for p in pairs {
        let (w, l) = (p.winner_idx, p.loser_idx);
        if w >= logp.len() || l >= logp.len() || w == l {
            return Err(Error::contract(format!("invalid pair ({w}, {l}) for K = {}", logp.len())));
        }
        let mut margin = logp[w] - logp[l];
        if let Some(r) = reference {
            margin -= r[w] - r[l];
        }
        let z = cfg.beta * margin;
        loss -= p.weight * log_sigmoid(z);
        let g = p.weight * cfg.beta * sigmoid(-z);
        grad[w] -= g;
        grad[l] += g;
    }
    Ok((loss, grad))
}

/// ListNet cross-entropy between the static-score and policy distributions.
pub fn rank_loss(static_scores: &[f64], logp: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_logp(logp)?;
    if logp.len() < 2 || static_scores.len() != logp.len() {
        return Err(Error::contract(format!(
            "rank_loss needs K >= 2 matching inputs, got {} scores and {} log-probs",
            static_scores.len(),
            logp.len()
        )));
    }
    let target_scores = match cfg.rank_score_space {
        RankScoreSpace::Raw => static_scores.to_vec(),
        RankScoreSpace::Normalized => zscore(static_scores)?,
    };
    let p_s = softmax(&target_scores, cfg.tau_s);
    let log_p_pi = log_softmax(logp, cfg.tau_s);
    let loss = -p_s.iter().zip(&log_p_pi).map(|(s, lp)| s * lp).sum::<f64>();
    let grad = p_s
        .iter()
        .zip(&log_p_pi)
        .map(|(s, lp)| (lp.exp() - s) / cfg.tau_s)
        .collect();
    Ok((loss, grad))
}

/// Negative log-likelihood of the single best candidate.
pub fn bc_loss(logp: &[f64], best_idx: usize) -> Result<(f64, Vec<f64>)> {
    check_logp(logp)?;
    if best_idx >= logp.len() {
        return Err(Error::contract(format!("best_idx {best_idx} out of range for K = {}", logp.len())));
    }
    let mut grad = vec![0.0; logp.len()];
    grad[best_idx] = -1.0;
    Ok((-logp[best_idx], grad))
}

/// Everything the composite loss needs for one pool.
#[derive(Debug, Clone)]
pub struct PoolLossInputs<'a> {
    pub static_scores: &'a [f64],
    pub logp: &'a [f64],
    /// Frozen reference log-probabilities, required when `use_reference` is set.
    pub reference_logp: Option<&'a [f64]>,
    /// Preference pairs; their weights are recomputed from the gaps.
    pub pairs: &'a [PreferencePair],
    /// Index of the behaviour-cloning target (the fused-score best).
    pub best_idx: usize,
}

/// Combine the three components with their lambda weights.
pub fn total_loss(inputs: &PoolLossInputs<'_>, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let k = inputs.logp.len();
    let gaps: Vec<f64> = inputs.pairs.iter().map(|p| p.fused_gap).collect();
    let weights = pair_weights(&gaps, cfg.tau_w)?;
    let weighted: Vec<PreferencePair> = inputs
        .pairs
        .iter()
        .zip(&weights)
        .map(|(p, &weight)| PreferencePair { weight, ..*p })
        .collect();

    let (l_dmdpo, grad_dmdpo) = dmdpo_loss(&weighted, inputs.logp, inputs.reference_logp, cfg)?;
    let (l_rank, grad_rank) = rank_loss(inputs.static_scores, inputs.logp, cfg)?;
    let (l_bc, grad_bc) = bc_loss(inputs.logp, inputs.best_idx)?;

    let l_total = cfg.lambda_pref * l_dmdpo + cfg.lambda_rank * l_rank + cfg.lambda_bc * l_bc;
    let grad_logp = (0..k)
        .map(|i| cfg.lambda_pref * grad_dmdpo[i] + cfg.lambda_rank * grad_rank[i] + cfg.lambda_bc * grad_bc[i])
        .collect();
    Ok(LossBreakdown {
        l_dmdpo,
        l_rank,
        l_bc,
        l_total,
        grad_logp,
        grad_dmdpo,
        grad_rank,
        grad_bc,
        pair_weights: weights,
        best_idx: inputs.best_idx,
    })
}
