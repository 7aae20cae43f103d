//! Multi-pair, multi-perspective preference optimization at desk scale.
//!
//! The crate is organised along the pipeline:
//!
//! - [`datamodel`]: candidate pools, score cards and their JSONL persistence.
//! - [`reward`]: offline static score from pluggable quality and alignment scorers.
//! - [`fusion`]: per-pool z-scoring, the curriculum weight and the fused score.
//! - [`pairing`]: ranking by fused score and preference-pair construction.
//! - [`losses`]: weighted multi-pair DPO, ListNet ranking and behaviour cloning,
//!   with closed-form gradients in log-probability space.
//! - [`policy`]: a tabular sequence transducer with exact log-probabilities,
//!   sampling, parameter gradients and an AdamW optimizer.
//! - [`synthbench`]: the synthetic translation task, oracle scorers and the
//!   correlation analytics.
//! - [`trainer`]: the training loop, baselines and held-out evaluation.

pub mod datamodel;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod pairing;
pub mod policy;
pub mod reward;
pub mod synthbench;
pub mod trainer;

mod seed;

pub use error::{Error, Result};

/// Token id over an explicit vocabulary.
pub type Token = u32;
