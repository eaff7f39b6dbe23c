//! Run configuration.
//!
//! A single TOML file; every key has a default and unknown keys are
//! rejected. The defaults describe the multi-domain synthetic benchmark.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{validate_ratios, GeneratorSpec, Relatedness, SplitMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::matching::{MatchingNet, Similarity};
use crate::retrieval::RetrievalConfig;
use crate::training::{EvalProtocol, SgdConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Meta-train, meta-validate and meta-test fractions.
    pub ratios: [f64; 3],
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.5, 0.2, 0.3],
            mode: SplitMode::ClassLevel,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    pub similarity: Similarity,
}

/// Data the learner is adapted on before meta-test evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptSource {
    /// Meta-train data of the retrieved auxiliary tasks.
    #[default]
    Aux,
    /// Half of the target's own meta-test examples; the other half is scored.
    Sub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// One results cell per entry.
    pub shots: Vec<usize>,
    pub queries_per_class: usize,
    pub episodes: usize,
    /// Classes per evaluation episode; unset uses every meta-test class.
    pub n_way: Option<usize>,
    pub adapt_source: AdaptSource,
    /// Adds the target's own meta-train classes to its auxiliary data.
    pub include_target: bool,
    /// Unroll length at adaptation; unset reuses `train.unroll_steps`.
    pub adapt_steps: Option<usize>,
    /// Classes per adaptation dataset; unset reuses `train.classes_per_episode`.
    pub adapt_classes: Option<usize>,
    /// Target task ids; empty evaluates every task.
    pub targets: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 5],
            queries_per_class: 5,
            episodes: 40,
            n_way: None,
            adapt_source: AdaptSource::Aux,
            include_target: true,
            adapt_steps: None,
            adapt_classes: Some(5),
            targets: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self, shots: usize) -> EvalProtocol {
        EvalProtocol {
            shots,
            queries_per_class: self.queries_per_class,
            episodes: self.episodes,
            n_way: self.n_way,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    pub matching: MatchingConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
    /// Episodic SGD for the plain matching-network comparison.
    pub baseline: SgdConfig,
}

impl Default for Config {
    fn default() -> Self {
        let groups = (0..12).map(|t| t / 3).collect();
        Self {
            seed: 0,
            generator: GeneratorSpec {
                classes_per_task: crate::data::ClassCount::Fixed(20),
                separation: 6.0,
                relatedness: Relatedness {
                    groups,
                    gap: 1.0,
                    nuisance_scale: 3.0,
                },
                ..GeneratorSpec::default()
            },
            split: SplitConfig::default(),
            encoder: EncoderConfig {
                hidden_dims: vec![32],
                embed_dim: 16,
                ..EncoderConfig::default()
            },
            matching: MatchingConfig::default(),
            train: TrainConfig {
                iterations: 2000,
                meta_lr: 0.05,
                batch_size: 20,
                val_interval: 50,
                eval_shots: 1,
                ..TrainConfig::default()
            },
            retrieval: RetrievalConfig {
                s: 2,
                train: SgdConfig {
                    iterations: 200,
                    ..SgdConfig::default()
                },
                protocol: EvalProtocol {
                    episodes: 30,
                    ..EvalProtocol::default()
                },
            },
            eval: EvalConfig::default(),
            baseline: SgdConfig {
                iterations: 8000,
                lr: 0.01,
                classes_per_episode: Some(10),
                ..SgdConfig::default()
            },
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills derived fields (seed into the generator, input width into the
    /// encoder) and validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.generator.seed = self.seed;
        if self.encoder.input_dim == 0 {
            self.encoder.input_dim = self.generator.feature_dim;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        validate_ratios(self.split.ratios)?;
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.retrieval.s == 0 {
            return Err(Error::Config("retrieval.s must be at least 1".into()));
        }
        if self.eval.shots.is_empty() || self.eval.shots.contains(&0) {
            return Err(Error::Config("eval.shots needs positive entries".into()));
        }
        if self.eval.episodes == 0 || self.eval.queries_per_class == 0 {
            return Err(Error::Config("eval.episodes and eval.queries_per_class must be positive".into()));
        }
        if self.eval.adapt_steps == Some(0) {
            return Err(Error::Config("eval.adapt_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn net(&self) -> MatchingNet {
        MatchingNet {
            encoder: self.encoder.clone(),
            similarity: self.matching.similarity,
        }
    }

    /// Training settings used when adapting to a target.
    pub fn adapt_train_config(&self) -> TrainConfig {
        TrainConfig {
            unroll_steps: self.eval.adapt_steps.unwrap_or(self.train.unroll_steps),
            classes_per_episode: self.eval.adapt_classes.or(self.train.classes_per_episode),
            ..self.train.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("configuration serializes");
        hex::encode(Sha256::digest(json))
    }
}
