//! The end-to-end pipeline: generate, split, retrieve, meta-train, evaluate.
//!
//! Each stage is a function of the resolved [`Config`] and the outputs of the
//! previous stages, with randomness drawn from named substreams of the seed.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AdaptSource, Config};
use crate::data::{generate, split_meta, write_atomic, MetaSplit, TaskDataset};
use crate::encoder::{init_params, LearnerParams};
use crate::error::{Error, Result};
use crate::meta::MetaParams;
use crate::retrieval::{retrieve, RetrievalReport};
use crate::rng;
use crate::training::{
    adapt_on_tasks, evaluate, initial_meta, meta_train_from, sub_split, train_matching_sgd, IterationRecord,
    TrainOutcome,
};

pub const REPORT_FORMAT: &str = "metametric-retrieval";
pub const REPORT_VERSION: u32 = 1;

pub const METHOD_META: &str = "meta-metric";
pub const METHOD_BASELINE: &str = "matching-net";
pub const METHOD_NO_ADAPT: &str = "no-adapt";

pub fn generate_tasks(cfg: &Config) -> Result<Vec<TaskDataset>> {
    generate(&cfg.generator)
}

pub fn split(cfg: &Config, tasks: &[TaskDataset]) -> Result<MetaSplit> {
    split_meta(tasks, cfg.split.ratios, cfg.split.mode, rng::derive_seed(cfg.seed, "split"))
}

/// Task ids evaluated at meta-test time.
pub fn target_ids(cfg: &Config, split: &MetaSplit) -> Result<Vec<String>> {
    let all: Vec<String> = split.meta_test.iter().map(|t| t.task_id.clone()).collect();
    if cfg.eval.targets.is_empty() {
        return Ok(all);
    }
    for t in &cfg.eval.targets {
        if !all.contains(t) {
            return Err(Error::Config(format!("eval target {t} is not in the meta-test split")));
        }
    }
    Ok(cfg.eval.targets.clone())
}

fn find<'a>(part: &'a [TaskDataset], id: &str) -> Option<&'a TaskDataset> {
    part.iter().find(|t| t.task_id == id)
}

/// The labelled view of a target that retrieval may look at: its meta-train
/// classes under class-level splitting, the target itself otherwise.
fn retrieval_view<'a>(split: &'a MetaSplit, id: &str) -> Result<&'a TaskDataset> {
    find(&split.meta_train, id)
        .or_else(|| find(&split.meta_test, id))
        .ok_or_else(|| Error::Data(format!("task {id} not found")))
}

/// Scores meta-train tasks as auxiliaries for every target.
pub fn run_retrieval(cfg: &Config, split: &MetaSplit) -> Result<RetrievalReport> {
    let targets = target_ids(cfg, split)?
        .iter()
        .map(|id| retrieval_view(split, id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let reports = retrieve(&cfg.net(), &split.meta_train, &targets, &cfg.retrieval, cfg.seed)?;
    Ok(RetrievalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        s: cfg.retrieval.s,
        targets: reports,
    })
}

pub fn run_training(
    cfg: &Config,
    split: &MetaSplit,
    initial: Option<MetaParams>,
    on_iteration: impl FnMut(&IterationRecord),
) -> Result<TrainOutcome> {
    let net = cfg.net();
    let initial = match initial {
        Some(m) => m,
        None => initial_meta(&net, cfg.seed)?,
    };
    meta_train_from(initial, &net, &split.meta_train, &split.meta_val, &cfg.train, cfg.seed, on_iteration)
}

/// The plain matching network, trained by SGD on every meta-train task.
pub fn train_baseline(cfg: &Config, split: &MetaSplit) -> Result<LearnerParams> {
    let net = cfg.net();
    let init = init_params(&net.encoder, rng::derive_seed(cfg.seed, "init/baseline"))?;
    let mut rng = rng::substream(cfg.seed, "baseline");
    train_matching_sgd(init, &net, &split.meta_train, &cfg.baseline, &mut rng)
}

/// Adaptation data for `target` under the auxiliary protocol.
pub fn aux_data(cfg: &Config, split: &MetaSplit, report: &RetrievalReport, target: &str) -> Result<TaskDataset> {
    let selected = report
        .selected_for(target)
        .ok_or_else(|| Error::Data(format!("retrieval report has no entry for {target}")))?;
    let mut parts: Vec<TaskDataset> = Vec::new();
    if cfg.eval.include_target {
        parts.extend(find(&split.meta_train, target).cloned());
    }
    for id in selected {
        let task = find(&split.meta_train, id)
            .ok_or_else(|| Error::Data(format!("auxiliary task {id} is not in the meta-train split")))?;
        parts.push(task.clone());
    }
    TaskDataset::merge(format!("aux/{target}"), &parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub k: usize,
    pub method: String,
    pub mean_acc: f64,
    pub std: f64,
    pub episodes: usize,
}

/// Adapts Θ to each target and scores it beside the baseline and the
/// unadapted `c0`, on identical episodes.
pub fn run_eval(
    cfg: &Config,
    split: &MetaSplit,
    meta: &MetaParams,
    baseline: &LearnerParams,
    report: Option<&RetrievalReport>,
) -> Result<Vec<ResultRow>> {
    let net = cfg.net();
    let adapt_cfg = cfg.adapt_train_config();
    let mut rows = Vec::new();
    for target in target_ids(cfg, split)? {
        let test = find(&split.meta_test, &target).expect("target ids come from the meta-test split");
        let mut adapt_rng = rng::substream(cfg.seed, &format!("adapt/{target}"));
        let (theta, scored) = match cfg.eval.adapt_source {
            AdaptSource::Aux => {
                let report = report.ok_or_else(|| Error::Data("auxiliary adaptation needs a retrieval report".into()))?;
                let aux = aux_data(cfg, split, report, &target)?;
                (adapt_on_tasks(meta, &net, &[aux], &adapt_cfg, &mut adapt_rng)?, test.clone())
            }
            AdaptSource::Sub => {
                let (adapt, scored) = sub_split(test, cfg.seed)?;
                (adapt_on_tasks(meta, &net, &[adapt], &adapt_cfg, &mut adapt_rng)?, scored)
            }
        };
        for &k in &cfg.eval.shots {
            let protocol = cfg.eval.protocol(k);
            let episodes = rng::substream(cfg.seed, &format!("eval/{target}/{k}"));
            for (method, params) in [(METHOD_META, &theta), (METHOD_BASELINE, baseline), (METHOD_NO_ADAPT, &meta.c0)] {
                let r = evaluate(params, &net, &scored, &protocol, &mut episodes.clone())?;
                rows.push(ResultRow {
                    task: target.clone(),
                    k,
                    method: method.into(),
                    mean_acc: r.mean,
                    std: r.std,
                    episodes: r.episodes,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean accuracy of `method` at `k` shots over all rows.
pub fn method_mean(rows: &[ResultRow], method: &str, k: usize) -> Option<f64> {
    let accs: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.k == k)
        .map(|r| r.mean_acc)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

pub const RESULTS_HEADER: &str = "task,k,method,mean_acc,std,episodes,config_hash,seed";

pub fn results_csv(rows: &[ResultRow], config_hash: &str, seed: u64) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{config_hash},{seed}",
            r.task, r.k, r.method, r.mean_acc, r.std, r.episodes
        );
    }
    out
}

pub fn write_results(path: &Path, rows: &[ResultRow], config_hash: &str, seed: u64) -> Result<()> {
    write_atomic(path, results_csv(rows, config_hash, seed).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, k: usize, acc: f64) -> ResultRow {
        ResultRow {
            task: "t00".into(),
            k,
            method: method.into(),
            mean_acc: acc,
            std: 0.0,
            episodes: 1,
        }
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let rows = [row(METHOD_META, 1, 0.5), row(METHOD_BASELINE, 1, 0.25)];
        let csv = results_csv(&rows, "abc", 3);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RESULTS_HEADER);
        assert_eq!(lines[1], "t00,1,meta-metric,0.500000,0.000000,1,abc,3");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn method_mean_filters() {
        let rows = [row(METHOD_META, 1, 0.5), row(METHOD_META, 1, 0.7), row(METHOD_META, 5, 0.9)];
        assert!((method_mean(&rows, METHOD_META, 1).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(method_mean(&rows, METHOD_BASELINE, 1), None);
    }
}
