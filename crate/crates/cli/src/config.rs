//! Pipeline configuration file.
//!
//! One TOML file with a section per stage. Every field has a default, so an
//! empty file is a valid configuration. A top-level `seed`, when set, replaces
//! the corpus, QE and training seeds; the task seed is separate because it
//! defines the language pair itself.

use std::path::Path;

use m2po_core::policy::{PolicyConfig, SourceConditioning};
use m2po_core::reward::StaticRewardConfig;
use m2po_core::synthbench::{CorpusConfig, OracleQeConfig, SynthTask, TaskConfig};
use m2po_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that overrides the file's `seed`.
pub const SEED_ENV: &str = "M2PO_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub lambda_f: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            lambda_f: StaticRewardConfig::default().lambda_f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub conditioning: SourceConditioning,
    pub length_cap_factor: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        PolicySection {
            conditioning: p.conditioning,
            length_cap_factor: p.length_cap_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub task: TaskConfig,
    pub corpus: CorpusConfig,
    pub reward: RewardSection,
    pub qe: OracleQeConfig,
    pub policy: PolicySection,
    pub train: TrainConfig,
}

impl PipelineConfig {
    /// Read `path`, or start from defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Apply the seed override chain: flag, then environment, then file.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<(), CliError> {
        let env_seed = match env {
            Some(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Validation(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            None => None,
        };
        if let Some(seed) = flag.or(env_seed).or(self.seed) {
            self.seed = Some(seed);
            self.corpus.seed = seed;
            self.qe.seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn reward(&self) -> Result<StaticRewardConfig, CliError> {
        Ok(StaticRewardConfig::new(self.reward.lambda_f)?)
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            source_vocab: self.task.vocab,
            target_vocab: self.task.vocab,
            conditioning: self.policy.conditioning,
            length_cap_factor: self.policy.length_cap_factor,
        }
    }

    pub fn synth_task(&self) -> Result<SynthTask, CliError> {
        Ok(SynthTask::new(self.task)?)
    }

    /// Check every section's invariants.
    pub fn validate(&self) -> Result<(), CliError> {
        self.synth_task()?;
        self.corpus.validate()?;
        self.reward()?;
        self.qe.validate()?;
        self.policy().validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use m2po_core::trainer::TrainMode;

    #[test]
    fn shipped_config_matches_defaults() {
        let cfg: PipelineConfig = toml::from_str(include_str!("../../../configs/pipeline.toml")).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let cfg: PipelineConfig = toml::from_str(
            r#"
            seed = 9
            [task]
            vocab = 10
            [corpus]
            n_sources = 5
            [corpus.severity_mix]
            none = 0.0
            partial_hallucination = 0.3
            full_hallucination = 0.2
            partial_omission = 0.3
            full_omission = 0.2
            [reward]
            lambda_f = 0.0
            [policy]
            conditioning = { kind = "bag_hash", buckets = 16 }
            [train]
            mode = "single_pair_dpo"
            [train.loss]
            lambda_bc = 0.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.task.vocab, 10);
        assert_eq!(cfg.corpus.n_sources, 5);
        assert_eq!(cfg.reward.lambda_f, 0.0);
        assert_eq!(cfg.policy.conditioning, SourceConditioning::BagHash { buckets: 16 });
        assert_eq!(cfg.train.mode, TrainMode::SinglePairDpo);
        assert_eq!(cfg.train.loss.lambda_bc, 0.0);
        assert_eq!(cfg.policy().target_vocab, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<PipelineConfig>("colour = 1\n").is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = PipelineConfig {
            seed: Some(1),
            ..PipelineConfig::default()
        };
        cfg.resolve_seed(None, None).unwrap();
        assert_eq!((cfg.corpus.seed, cfg.qe.seed, cfg.train.seed), (1, 1, 1));
        cfg.resolve_seed(None, Some("7")).unwrap();
        assert_eq!(cfg.train.seed, 7);
        cfg.resolve_seed(Some(3), Some("7")).unwrap();
        assert_eq!((cfg.seed, cfg.corpus.seed), (Some(3), 3));
        assert!(cfg.resolve_seed(None, Some("x")).is_err());
    }

    #[test]
    fn no_seed_leaves_sections_alone() {
        let mut cfg = PipelineConfig::default();
        cfg.corpus.seed = 42;
        cfg.resolve_seed(None, None).unwrap();
        assert_eq!(cfg.corpus.seed, 42);
    }

    #[test]
    fn invalid_mix_names_field() {
        let mut cfg = PipelineConfig::default();
        cfg.corpus.severity_mix.full_omission = -0.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("full_omission"), "{msg}");
    }
}
