//! Auxiliary-task retrieval.
//!
//! Every candidate source task gets its own matching network. Relatedness to
//! a target is read off how well a source model's embeddings classify
//! target episodes, with no fine-tuning; the best-scoring sources are kept.

use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::encoder::{init_params, LearnerParams};
use crate::error::{Error, Result};
use crate::matching::MatchingNet;
use crate::rng::{self, Rng};
use crate::training::{evaluate, train_matching_sgd, EvalProtocol, SgdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub source_task: String,
    pub target_task: String,
    pub acc: f64,
}

/// Matching network for one task, trained by episodic SGD from a seeded init.
pub fn train_task_model(net: &MatchingNet, task: &TaskDataset, config: &SgdConfig, seed: u64) -> Result<LearnerParams> {
    if task.n_classes() < 2 {
        return Err(Error::Data(format!("task {} needs at least 2 classes", task.task_id)));
    }
    let init = init_params(&net.encoder, rng::derive_seed(seed, &format!("retrieval/init/{}", task.task_id)))?;
    let mut rng = rng::substream(seed, &format!("retrieval/train/{}", task.task_id));
    train_matching_sgd(init, net, std::slice::from_ref(task), config, &mut rng)
}

/// Accuracy of `model` on episodes drawn entirely from `target`.
pub fn cross_task_accuracy(
    model: &LearnerParams,
    net: &MatchingNet,
    source_task: &str,
    target: &TaskDataset,
    protocol: &EvalProtocol,
    rng: &mut Rng,
) -> Result<RetrievalScore> {
    let result = evaluate(model, net, target, protocol, rng)?;
    Ok(RetrievalScore {
        source_task: source_task.to_string(),
        target_task: target.task_id.clone(),
        acc: result.mean,
    })
}

/// The `s` best sources by accuracy, ties broken by ascending task id.
pub fn select_auxiliary(scores: &[RetrievalScore], s: usize) -> Vec<String> {
    let mut ranked: Vec<&RetrievalScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.acc.total_cmp(&a.acc).then_with(|| a.source_task.cmp(&b.source_task)));
    ranked.into_iter().take(s).map(|r| r.source_task.clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Number of auxiliary tasks kept per target.
    pub s: usize,
    pub train: SgdConfig,
    pub protocol: EvalProtocol,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            s: 10,
            train: SgdConfig::default(),
            protocol: EvalProtocol {
                shots: 1,
                queries_per_class: 5,
                episodes: 50,
                n_way: Some(5),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target_task: String,
    pub scores: Vec<RetrievalScore>,
    pub selected: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub s: usize,
    pub targets: Vec<TargetReport>,
}

impl RetrievalReport {
    pub fn selected_for(&self, target: &str) -> Option<&[String]> {
        self.targets
            .iter()
            .find(|t| t.target_task == target)
            .map(|t| t.selected.as_slice())
    }
}

/// Scores every source in `sources` (except the target itself) against each
/// target and selects the top `s`.
///
/// `sources` train the per-task models; `targets` are scored as given, so a
/// caller can hold back classes by passing split views of the tasks.
pub fn retrieve(
    net: &MatchingNet,
    sources: &[TaskDataset],
    targets: &[TaskDataset],
    config: &RetrievalConfig,
    seed: u64,
) -> Result<Vec<TargetReport>> {
    if config.s == 0 {
        return Err(Error::Config("retrieval s must be at least 1".into()));
    }
    let models = sources
        .iter()
        .map(|t| train_task_model(net, t, &config.train, seed))
        .collect::<Result<Vec<_>>>()?;
    targets
        .iter()
        .map(|target| {
            let mut scores = Vec::new();
            for (source, model) in sources.iter().zip(&models) {
                if source.task_id == target.task_id {
                    continue;
                }
                // same episodes for every source, so scores differ only by model
                let mut rng = rng::substream(seed, &format!("retrieval/score/{}", target.task_id));
                scores.push(cross_task_accuracy(model, net, &source.task_id, target, &config.protocol, &mut rng)?);
            }
            let selected = select_auxiliary(&scores, config.s);
            Ok(TargetReport {
                target_task: target.task_id.clone(),
                scores,
                selected,
            })
        })
        .collect()
}
