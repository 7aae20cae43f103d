//! Tabular sequence-transduction policy.
//!
//! The policy is an order-1 conditional model over target tokens:
//!
//! ```text
//! pi(y | x) = prod_t softmax(logits[prev_t][feature_t(x)])[y_t]
//! ```
//!
//! where `prev_t` is the previous target token (or BOS) and `feature_t(x)` is a
//! summary of the source selected by [`SourceConditioning`]. Every target ends
//! with EOS, whose id equals the target vocabulary size. Log-probabilities and
//! their gradients are exact.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::float17;
use crate::error::{Error, Result};
use crate::seed;
use crate::Token;

/// How the source sentence enters each decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SourceConditioning {
    /// The source token at the same position, or an end marker past the source.
    AlignedToken,
    /// The whole source bag-of-tokens hashed into a fixed number of buckets.
    BagHash { buckets: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub conditioning: SourceConditioning,
    /// Sampling stops after `length_cap_factor * |source|` content tokens.
    pub length_cap_factor: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            source_vocab: 12,
            target_vocab: 12,
            conditioning: SourceConditioning::AlignedToken,
            length_cap_factor: 4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_vocab == 0 || self.target_vocab == 0 {
            return Err(Error::contract("vocabulary sizes must be positive"));
        }
        if let SourceConditioning::BagHash { buckets: 0 } = self.conditioning {
            return Err(Error::contract("bag-hash conditioning needs at least one bucket"));
        }
        if self.length_cap_factor == 0 {
            return Err(Error::contract("length_cap_factor must be positive"));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        match self.conditioning {
            SourceConditioning::AlignedToken => self.source_vocab + 1,
            SourceConditioning::BagHash { buckets } => buckets,
        }
    }

    /// Rows are indexed by previous token; index `target_vocab` is BOS.
    pub fn n_prev(&self) -> usize {
        self.target_vocab + 1
    }

    /// Outputs are the target vocabulary plus EOS.
    pub fn n_out(&self) -> usize {
        self.target_vocab + 1
    }

    pub fn n_params(&self) -> usize {
        self.n_prev() * self.n_features() * self.n_out()
    }

    pub fn eos(&self) -> Token {
        self.target_vocab as Token
    }
}

/// A sampled or decoded target sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Tokens including the terminal EOS.
    pub tokens: Vec<Token>,
    /// The length cap was hit and EOS was forced.
    pub capped: bool,
}

/// Logit table, laid out `[prev][feature][out]` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    logits: Vec<f64>,
}

struct FeatureMap {
    bag_bucket: Option<usize>,
    end_marker: usize,
}

impl PolicyParams {
    /// All-zero logits: every row is the uniform distribution.
    pub fn uniform(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(PolicyParams {
            logits: vec![0.0; config.n_params()],
            config,
        })
    }

    pub fn from_logits(config: PolicyConfig, logits: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if logits.len() != config.n_params() {
            return Err(Error::contract(format!(
                "logit table has {} entries, expected {}",
                logits.len(),
                config.n_params()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("logit table contains non-finite entries"));
        }
        Ok(PolicyParams { config, logits })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn n_params(&self) -> usize {
        self.logits.len()
    }

    /// Flat index of `logits[prev][feature][out]`.
    pub fn index(&self, prev: usize, feature: usize, out: usize) -> usize {
        (prev * self.config.n_features() + feature) * self.config.n_out() + out
    }

    fn row_start(&self, prev: usize, feature: usize) -> usize {
        self.index(prev, feature, 0)
    }

    fn row(&self, prev: usize, feature: usize) -> &[f64] {
        let s = self.row_start(prev, feature);
        &self.logits[s..s + self.config.n_out()]
    }

    fn check_source(&self, source: &[Token]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::contract("source is empty"));
        }
        if let Some(t) = source.iter().find(|&&t| t as usize >= self.config.source_vocab) {
            return Err(Error::contract(format!(
                "source token {t} outside vocabulary of {}",
                self.config.source_vocab
            )));
        }
        Ok(())
    }

    fn check_target(&self, target: &[Token]) -> Result<()> {
        let eos = self.config.eos();
        match target.split_last() {
            Some((&last, body)) if last == eos => {
                if let Some(t) = body.iter().find(|&&t| t >= eos) {
                    return Err(Error::contract(format!(
                        "target token {t} outside vocabulary of {}",
                        self.config.target_vocab
                    )));
                }
                Ok(())
            }
            _ => Err(Error::contract("target must end with EOS")),
        }
    }

    fn features(&self, source: &[Token]) -> FeatureMap {
        let bag_bucket = match self.config.conditioning {
            SourceConditioning::AlignedToken => None,
            SourceConditioning::BagHash { buckets } => {
                let mut bag = source.to_vec();
                bag.sort_unstable();
                Some((seed::hash_tokens(0, &[&bag]) % buckets as u64) as usize)
            }
        };
        FeatureMap {
            bag_bucket,
            end_marker: self.config.source_vocab,
        }
    }

    fn feature_at(map: &FeatureMap, source: &[Token], t: usize) -> usize {
        match map.bag_bucket {
            Some(b) => b,
            None => source.get(t).map_or(map.end_marker, |&s| s as usize),
        }
    }

    fn log_sum_exp(row: &[f64]) -> f64 {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    /// Exact sequence log-probability of `target` (which must end with EOS).
    pub fn log_prob(&self, source: &[Token], target: &[Token]) -> Result<f64> {
        self.check_source(source)?;
        self.check_target(target)?;
        let map = self.features(source);
        let mut prev = self.config.target_vocab;
        let mut total = 0.0;
        for (t, &y) in target.iter().enumerate() {
            let row = self.row(prev, Self::feature_at(&map, source, t));
            total += row[y as usize] - Self::log_sum_exp(row);
            prev = y as usize;
        }
        Ok(total)
    }

    /// Add `scale * d log_prob / d logits` into `grad`.
    pub fn accumulate_grad_log_prob(&self, source: &[Token], target: &[Token], scale: f64, grad: &mut [f64]) -> Result<()> {
        self.check_source(source)?;
        self.check_target(target)?;
        if grad.len() != self.logits.len() {
            return Err(Error::contract("gradient buffer has the wrong shape"));
        }
        let map = self.features(source);
        let mut prev = self.config.target_vocab;
        for (t, &y) in target.iter().enumerate() {
            let start = self.row_start(prev, Self::feature_at(&map, source, t));
            let row = &self.logits[start..start + self.config.n_out()];
            let lse = Self::log_sum_exp(row);
            for (j, &v) in row.iter().enumerate() {
                grad[start + j] -= scale * (v - lse).exp();
            }
            grad[start + y as usize] += scale;
            prev = y as usize;
        }
        Ok(())
    }

    /// Gradient of [`log_prob`](Self::log_prob) with respect to every logit.
    ///
    /// Each visited row receives `onehot(emitted) - softmax(row)`; unvisited
    /// rows are exactly zero.
    pub fn grad_log_prob(&self, source: &[Token], target: &[Token]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.logits.len()];
        self.accumulate_grad_log_prob(source, target, 1.0, &mut grad)?;
        Ok(grad)
    }

    fn length_cap(&self, source: &[Token]) -> usize {
        self.config.length_cap_factor * source.len()
    }

    /// Ancestral sampling at `temperature`, deterministic for a fixed seed.
    pub fn sample(&self, source: &[Token], rng_seed: u64, temperature: f64) -> Result<Decoded> {
        self.check_source(source)?;
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let map = self.features(source);
        let eos = self.config.eos();
        let cap = self.length_cap(source);
        let mut prev = self.config.target_vocab;
        let mut tokens = Vec::new();
        let mut probs = vec![0.0; self.config.n_out()];
        while tokens.len() < cap {
            let row = self.row(prev, Self::feature_at(&map, source, tokens.len()));
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (p, v) in probs.iter_mut().zip(row) {
                *p = ((v - max) / temperature).exp();
            }
            let z: f64 = probs.iter().sum();
            let u: f64 = rng.random::<f64>() * z;
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            let y = pick as Token;
            tokens.push(y);
            if y == eos {
                return Ok(Decoded { tokens, capped: false });
            }
            prev = pick;
        }
        tokens.push(eos);
        Ok(Decoded { tokens, capped: true })
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn greedy(&self, source: &[Token]) -> Result<Decoded> {
        self.check_source(source)?;
        let map = self.features(source);
        let eos = self.config.eos();
        let cap = self.length_cap(source);
        let mut prev = self.config.target_vocab;
        let mut tokens = Vec::new();
        while tokens.len() < cap {
            let row = self.row(prev, Self::feature_at(&map, source, tokens.len()));
            let mut pick = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[pick] {
                    pick = j;
                }
            }
            tokens.push(pick as Token);
            if pick as Token == eos {
                return Ok(Decoded { tokens, capped: false });
            }
            prev = pick;
        }
        tokens.push(eos);
        Ok(Decoded { tokens, capped: true })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            config: &self.config,
            logits: &self.logits,
        };
        let text = serde_json::to_string(&ck).map_err(|e| Error::contract(format!("cannot serialize checkpoint: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message,
        };
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(parse_err(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        PolicyParams::from_logits(ck.config, ck.logits).map_err(|e| parse_err(e.to_string()))
    }
}

const CHECKPOINT_FORMAT: &str = "m2po-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    config: &'a PolicyConfig,
    #[serde(with = "float17::vec")]
    logits: &'a [f64],
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: PolicyConfig,
    logits: Vec<f64>,
}

/// AdamW moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        OptimizerState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW step with decoupled weight decay. `grads` is the loss gradient.
pub fn apply_update(params: &mut PolicyParams, state: &mut OptimizerState, grads: &[f64], weight_decay: f64) -> Result<()> {
    let n = params.logits.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::contract(format!(
            "shape mismatch: {n} params, {} grads, {}/{} moments",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::contract("gradient contains non-finite entries"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let slots = params.logits.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut());
    for (((p, m), v), &g) in slots.zip(grads) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
    }
    Ok(())
}
