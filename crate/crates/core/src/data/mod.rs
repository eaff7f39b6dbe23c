//! Few-shot task datasets: the in-memory model, synthetic generators, file
//! persistence and the meta-train / meta-validate / meta-test splits.

pub mod generate;
mod io;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use generate::{generate, ClassCount, Family, GeneratorSpec, Relatedness};
pub use io::{
    load_tasks, read_task_file, save_tasks, write_atomic, write_task_file, Provenance, MANIFEST_FILE, TASK_FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub task_id: String,
    pub class_id: String,
    pub features: Vec<f64>,
}

/// Labelled examples of one task, grouped by class id (kept sorted).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub feature_dim: usize,
    /// Generator domain the task was drawn from, when known.
    pub group: Option<usize>,
    pub classes: BTreeMap<String, Vec<Example>>,
}

impl TaskDataset {
    pub fn new(task_id: impl Into<String>, feature_dim: usize) -> Self {
        Self {
            task_id: task_id.into(),
            feature_dim,
            group: None,
            classes: BTreeMap::new(),
        }
    }

    pub fn from_examples(task_id: impl Into<String>, feature_dim: usize, examples: Vec<Example>) -> Result<Self> {
        let mut task = Self::new(task_id, feature_dim);
        for ex in examples {
            task.classes.entry(ex.class_id.clone()).or_default().push(ex);
        }
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        for (class, examples) in &self.classes {
            if examples.is_empty() {
                return Err(Error::Data(format!("task {} class {class} is empty", self.task_id)));
            }
            for ex in examples {
                if ex.features.len() != self.feature_dim {
                    return Err(Error::Data(format!(
                        "example {} has {} features, task {} has feature_dim {}",
                        ex.id,
                        ex.features.len(),
                        self.task_id,
                        self.feature_dim
                    )));
                }
                if &ex.class_id != class {
                    return Err(Error::Data(format!("example {} filed under class {class}", ex.id)));
                }
            }
        }
        Ok(())
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_examples(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn min_class_size(&self) -> usize {
        self.classes.values().map(Vec::len).min().unwrap_or(0)
    }

    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.classes.values().flatten()
    }

    /// The same task restricted to `classes`; unknown ids are an error.
    pub fn restrict(&self, classes: &[String]) -> Result<Self> {
        let mut out = Self {
            task_id: self.task_id.clone(),
            feature_dim: self.feature_dim,
            group: self.group,
            classes: BTreeMap::new(),
        };
        for c in classes {
            let ex = self
                .classes
                .get(c)
                .ok_or_else(|| Error::Data(format!("task {} has no class {c}", self.task_id)))?;
            out.classes.insert(c.clone(), ex.clone());
        }
        Ok(out)
    }

    /// Pools several tasks into one, prefixing class ids with the task id.
    pub fn merge(task_id: impl Into<String>, tasks: &[TaskDataset]) -> Result<Self> {
        let task_id = task_id.into();
        let feature_dim = tasks.first().map_or(0, |t| t.feature_dim);
        let mut out = Self::new(task_id.clone(), feature_dim);
        for t in tasks {
            if t.feature_dim != feature_dim {
                return Err(Error::Data(format!(
                    "cannot merge task {} with feature_dim {} into {feature_dim}",
                    t.task_id, t.feature_dim
                )));
            }
            for (class, examples) in &t.classes {
                let merged = format!("{}/{class}", t.task_id);
                let relabelled = examples
                    .iter()
                    .map(|e| Example {
                        class_id: merged.clone(),
                        task_id: task_id.clone(),
                        ..e.clone()
                    })
                    .collect();
                out.classes.insert(merged, relabelled);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    #[default]
    ClassLevel,
    TaskLevel,
}

/// Meta-train, meta-validate and meta-test collections.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaSplit {
    pub meta_train: Vec<TaskDataset>,
    pub meta_val: Vec<TaskDataset>,
    pub meta_test: Vec<TaskDataset>,
}

impl MetaSplit {
    pub fn find(part: &[TaskDataset], task_id: &str) -> Option<usize> {
        part.iter().position(|t| t.task_id == task_id)
    }
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {total}")));
    }
    Ok(())
}

/// Sizes for `n` items: train and validation rounded, test takes the rest.
fn partition_sizes(n: usize, ratios: [f64; 3], what: &str) -> Result<[usize; 3]> {
    let train = (ratios[0] * n as f64).round() as usize;
    let val = (ratios[1] * n as f64).round() as usize;
    let test = n.saturating_sub(train + val);
    let sizes = [train, val, test];
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        let name = ["meta-train", "meta-validate", "meta-test"][i];
        return Err(Error::Data(format!(
            "{name} receives no {what} when splitting {n} {what} by {ratios:?}"
        )));
    }
    Ok(sizes)
}

/// Splits classes within every task, or whole tasks, by the given fractions.
pub fn split_meta(tasks: &[TaskDataset], ratios: [f64; 3], mode: SplitMode, seed: u64) -> Result<MetaSplit> {
    validate_ratios(ratios)?;
    let mut split = MetaSplit {
        meta_train: Vec::new(),
        meta_val: Vec::new(),
        meta_test: Vec::new(),
    };
    match mode {
        SplitMode::ClassLevel => {
            for task in tasks {
                if task.n_classes() < 3 {
                    return Err(Error::Data(format!(
                        "task {} has {} classes; class-level splitting needs at least 3",
                        task.task_id,
                        task.n_classes()
                    )));
                }
                let [n_train, n_val, _] = partition_sizes(task.n_classes(), ratios, "classes")?;
                let mut ids = task.class_ids();
                ids.shuffle(&mut rng::substream(seed, &format!("split/{}", task.task_id)));
                let (train, rest) = ids.split_at(n_train);
                let (val, test) = rest.split_at(n_val);
                let sorted = |s: &[String]| {
                    let mut v = s.to_vec();
                    v.sort();
                    v
                };
                split.meta_train.push(task.restrict(&sorted(train))?);
                split.meta_val.push(task.restrict(&sorted(val))?);
                split.meta_test.push(task.restrict(&sorted(test))?);
            }
        }
        SplitMode::TaskLevel => {
            let [n_train, n_val, _] = partition_sizes(tasks.len(), ratios, "tasks")?;
            let mut order: Vec<usize> = (0..tasks.len()).collect();
            order.shuffle(&mut rng::substream(seed, "split/tasks"));
            for (rank, &i) in order.iter().enumerate() {
                let dst = if rank < n_train {
                    &mut split.meta_train
                } else if rank < n_train + n_val {
                    &mut split.meta_val
                } else {
                    &mut split.meta_test
                };
                dst.push(tasks[i].clone());
            }
            for part in [&mut split.meta_train, &mut split.meta_val, &mut split.meta_test] {
                part.sort_by(|a, b| a.task_id.cmp(&b.task_id));
            }
        }
    }
    Ok(split)
}
