//! Meta-training, learner adaptation and evaluation.
//!
//! One meta-iteration samples a dataset pair `(D_train, D_test)` that shares
//! a label space, unrolls the meta-learner for `T` steps (support always from
//! `D_train`, queries always from `D_test`), scores the final learner on the
//! whole pair and takes one clipped gradient step on Θ.

use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::{Example, TaskDataset};
use crate::encoder::{init_params, LearnerParams};
use crate::error::{Error, Result};
use crate::matching::{Episode, Item, MatchingNet};
use crate::meta::{meta_step, sgd_step, GradRecord, MetaParams, MetaState, MetaVars};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner unroll length `T`.
    pub unroll_steps: usize,
    /// Meta-iterations `n`.
    pub iterations: usize,
    /// Support examples per class in every inner step.
    pub shots: usize,
    /// Queries per inner step.
    pub batch_size: usize,
    pub meta_lr: f64,
    /// Joint norm bound on the meta-gradient.
    pub clip_norm: f64,
    /// Support examples per class when scoring meta-validation episodes.
    pub eval_shots: usize,
    /// Meta-iterations between validations; 0 validates only at the end.
    pub val_interval: usize,
    pub val_episodes: usize,
    /// Upper bound on the queries of the final L_test.
    pub test_query_cap: usize,
    /// Classes per sampled dataset; `None` takes every class of the task.
    pub classes_per_episode: Option<usize>,
    /// Fraction of each class's examples placed in `D_train`.
    pub train_fraction: f64,
    /// Whether the initial learner parameters are meta-learned.
    pub train_c0: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            unroll_steps: 5,
            iterations: 200,
            shots: 1,
            batch_size: 16,
            meta_lr: 1e-3,
            clip_norm: 1.0,
            eval_shots: 5,
            val_interval: 25,
            val_episodes: 20,
            test_query_cap: 256,
            classes_per_episode: None,
            train_fraction: 0.5,
            train_c0: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.unroll_steps == 0 {
            return bad("unroll_steps must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.shots == 0 || self.eval_shots == 0 {
            return bad("shots and eval_shots must be at least 1");
        }
        if self.batch_size == 0 || self.test_query_cap == 0 {
            return bad("batch_size and test_query_cap must be at least 1");
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return bad("meta_lr must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.classes_per_episode.is_some_and(|c| c < 2) {
            return bad("classes_per_episode must be at least 2");
        }
        Ok(())
    }

    pub fn unroll(&self) -> UnrollConfig {
        UnrollConfig {
            steps: self.unroll_steps,
            shots: self.shots,
            batch_size: self.batch_size,
            test_query_cap: self.test_query_cap,
        }
    }
}

/// The parts of [`TrainConfig`] an unroll needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnrollConfig {
    pub steps: usize,
    pub shots: usize,
    pub batch_size: usize,
    pub test_query_cap: usize,
}

fn item(ex: &Example, label: usize) -> Item {
    Item::new(ex.id.clone(), ex.features.clone(), label)
}

fn check_classes(dataset: &TaskDataset, classes: &[String], needed: usize) -> Result<()> {
    for c in classes {
        let have = dataset.classes.get(c).map_or(0, Vec::len);
        if have < needed {
            return Err(Error::InsufficientExamples {
                class: format!("{}/{c}", dataset.task_id),
                needed,
                have,
            });
        }
    }
    Ok(())
}

/// `k` support examples per class and a batch drawn from what is left.
pub fn sample_episode(
    dataset: &TaskDataset,
    classes: &[String],
    k: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    check_classes(dataset, classes, k + 1)?;
    let mut support = Vec::with_capacity(classes.len() * k);
    let mut rest = Vec::new();
    for (label, c) in classes.iter().enumerate() {
        let mut examples: Vec<&Example> = dataset.classes[c].iter().collect();
        examples.shuffle(rng);
        support.extend(examples[..k].iter().map(|e| item(e, label)));
        rest.extend(examples[k..].iter().map(|e| item(e, label)));
    }
    rest.shuffle(rng);
    rest.truncate(batch_size);
    Episode::new(classes.to_vec(), support, rest)
}

/// `k` support and `queries` batch examples for every class.
pub fn sample_balanced_episode(
    dataset: &TaskDataset,
    classes: &[String],
    k: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    check_classes(dataset, classes, k + queries)?;
    let mut support = Vec::new();
    let mut batch = Vec::new();
    for (label, c) in classes.iter().enumerate() {
        let picked: Vec<&Example> = dataset.classes[c].choose_multiple(rng, k + queries).collect();
        support.extend(picked[..k].iter().map(|e| item(e, label)));
        batch.extend(picked[k..].iter().map(|e| item(e, label)));
    }
    Episode::new(classes.to_vec(), support, batch)
}

/// Splits every class's examples at random into two parts; `fraction` of
/// each class (at least one example, leaving at least one) goes to the first.
pub fn split_examples(task: &TaskDataset, fraction: f64, rng: &mut Rng) -> Result<(TaskDataset, TaskDataset)> {
    let mut a = TaskDataset::new(task.task_id.clone(), task.feature_dim);
    let mut b = a.clone();
    a.group = task.group;
    b.group = task.group;
    for (c, examples) in &task.classes {
        if examples.len() < 2 {
            return Err(Error::InsufficientExamples {
                class: format!("{}/{c}", task.task_id),
                needed: 2,
                have: examples.len(),
            });
        }
        let mut shuffled = examples.clone();
        shuffled.shuffle(rng);
        let n = ((fraction * examples.len() as f64).round() as usize).clamp(1, examples.len() - 1);
        let second = shuffled.split_off(n);
        a.classes.insert(c.clone(), shuffled);
        b.classes.insert(c.clone(), second);
    }
    Ok((a, b))
}

/// Random dataset pair from one task: a class subset whose examples are
/// split between the train and test roles.
pub fn sample_dataset_pair(
    tasks: &[TaskDataset],
    classes_per_episode: Option<usize>,
    train_fraction: f64,
    rng: &mut Rng,
) -> Result<(TaskDataset, TaskDataset)> {
    let task = tasks
        .choose(rng)
        .ok_or_else(|| Error::Data("no tasks to sample from".into()))?;
    let ids = task.class_ids();
    let n = classes_per_episode.map_or(ids.len(), |c| c.min(ids.len()));
    if n < 2 {
        return Err(Error::Data(format!("task {} has fewer than 2 classes", task.task_id)));
    }
    let mut chosen: Vec<String> = ids.choose_multiple(rng, n).cloned().collect();
    chosen.sort();
    split_examples(&task.restrict(&chosen)?, train_fraction, rng)
}

/// Provenance of one inner step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub loss: f64,
    pub support_ids: Vec<String>,
    pub query_ids: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Unroll {
    pub state: MetaState,
    pub steps: Vec<StepRecord>,
}

fn role_episode(
    d_train: &TaskDataset,
    d_test: &TaskDataset,
    classes: &[String],
    k: usize,
    n_queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    check_classes(d_train, classes, k)?;
    let mut support = Vec::new();
    for (label, c) in classes.iter().enumerate() {
        support.extend(d_train.classes[c].choose_multiple(rng, k).map(|e| item(e, label)));
    }
    let mut pool: Vec<Item> = classes
        .iter()
        .enumerate()
        .flat_map(|(label, c)| d_test.classes.get(c).into_iter().flatten().map(move |e| item(e, label)))
        .collect();
    if pool.len() > n_queries {
        pool.shuffle(rng);
        pool.truncate(n_queries);
    }
    Episode::new(classes.to_vec(), support, pool)
}

fn pair_classes(d_train: &TaskDataset, d_test: &TaskDataset) -> Result<Vec<String>> {
    let classes = d_train.class_ids();
    if classes.is_empty() || d_test.n_examples() == 0 {
        return Err(Error::Data("adaptation data is empty".into()));
    }
    if d_test.class_ids() != classes {
        return Err(Error::Data(format!(
            "train and test roles of task {} hold different classes",
            d_train.task_id
        )));
    }
    Ok(classes)
}

/// `T` meta-learner steps on `tape`, starting from the cell state `c0`.
pub fn inner_unroll(
    tape: &mut Tape,
    vars: &MetaVars,
    net: &MatchingNet,
    d_train: &TaskDataset,
    d_test: &TaskDataset,
    config: &UnrollConfig,
    rng: &mut Rng,
) -> Result<Unroll> {
    if config.steps == 0 {
        return Err(Error::Config("an unroll needs at least one step".into()));
    }
    let classes = pair_classes(d_train, d_test)?;
    let mut state = MetaState::initial(tape, vars)?;
    let mut steps = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let episode = role_episode(d_train, d_test, &classes, config.shots, config.batch_size, rng)?;
        let (loss, grad) = net.loss_and_grad(tape.value(state.c).data(), &episode)?;
        let rec = GradRecord::constant(tape, loss, grad);
        state = meta_step(tape, vars, &state, &rec)?;
        steps.push(StepRecord {
            loss,
            support_ids: episode.support.iter().map(|i| i.id.clone()).collect(),
            query_ids: episode.batch.iter().map(|i| i.id.clone()).collect(),
        });
    }
    Ok(Unroll { state, steps })
}

/// Loss of the learner `theta` with all of `d_train` as support and up to
/// `cap` queries from `d_test`.
pub fn test_loss(
    tape: &mut Tape,
    net: &MatchingNet,
    theta: NodeId,
    d_train: &TaskDataset,
    d_test: &TaskDataset,
    cap: usize,
    rng: &mut Rng,
) -> Result<NodeId> {
    let classes = pair_classes(d_train, d_test)?;
    let support = classes
        .iter()
        .enumerate()
        .flat_map(|(label, c)| d_train.classes[c].iter().map(move |e| item(e, label)))
        .collect();
    let mut queries: Vec<Item> = classes
        .iter()
        .enumerate()
        .flat_map(|(label, c)| d_test.classes[c].iter().map(move |e| item(e, label)))
        .collect();
    if queries.len() > cap {
        queries.shuffle(rng);
        queries.truncate(cap);
    }
    net.episode_loss(tape, theta, &Episode::new(classes, support, queries)?)
}

/// Learner parameters after `T` meta-learner steps on the given pair, with Θ fixed.
pub fn adapt_learner(
    meta: &MetaParams,
    net: &MatchingNet,
    d_train: &TaskDataset,
    d_test: &TaskDataset,
    config: &UnrollConfig,
    rng: &mut Rng,
) -> Result<LearnerParams> {
    let mut tape = Tape::new();
    let vars = meta.bind(&mut tape);
    let unroll = inner_unroll(&mut tape, &vars, net, d_train, d_test, config, rng)?;
    meta.c0.with_flat(tape.value(unroll.state.c).data().to_vec())
}

/// Adapts on a random pair from `tasks` (see [`sample_dataset_pair`]).
pub fn adapt_on_tasks(
    meta: &MetaParams,
    net: &MatchingNet,
    tasks: &[TaskDataset],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<LearnerParams> {
    let (d_train, d_test) = sample_dataset_pair(tasks, config.classes_per_episode, config.train_fraction, rng)?;
    adapt_learner(meta, net, &d_train, &d_test, &config.unroll(), rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub shots: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    /// Classes per episode; `None` uses every class of the task.
    pub n_way: Option<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            shots: 1,
            queries_per_class: 5,
            episodes: 100,
            n_way: Some(5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

impl EvalResult {
    pub fn from_accuracies(acc: &[f64]) -> Self {
        let n = acc.len().max(1) as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            episodes: acc.len(),
        }
    }
}

/// Per-episode accuracies of `params` on episodes sampled from `task`.
pub fn episode_accuracies(
    params: &LearnerParams,
    net: &MatchingNet,
    task: &TaskDataset,
    protocol: &EvalProtocol,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if protocol.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if protocol.shots == 0 || protocol.queries_per_class == 0 {
        return Err(Error::Config("evaluation needs at least one shot and one query per class".into()));
    }
    let ids = task.class_ids();
    let n_way = protocol.n_way.unwrap_or(ids.len());
    if n_way < 2 || n_way > ids.len() {
        return Err(Error::Data(format!(
            "task {} has {} classes, protocol asks for {n_way}-way episodes",
            task.task_id,
            ids.len()
        )));
    }
    (0..protocol.episodes)
        .map(|_| {
            let mut classes: Vec<String> = ids.choose_multiple(rng, n_way).cloned().collect();
            classes.sort();
            let ep = sample_balanced_episode(task, &classes, protocol.shots, protocol.queries_per_class, rng)?;
            net.accuracy(params, &ep)
        })
        .collect()
}

/// Mean and spread of matching-net accuracy over sampled episodes.
pub fn evaluate(
    params: &LearnerParams,
    net: &MatchingNet,
    task: &TaskDataset,
    protocol: &EvalProtocol,
    rng: &mut Rng,
) -> Result<EvalResult> {
    Ok(EvalResult::from_accuracies(&episode_accuracies(params, net, task, protocol, rng)?))
}

/// Seeded per-class halving of a task into adaptation and evaluation parts.
pub fn sub_split(task: &TaskDataset, seed: u64) -> Result<(TaskDataset, TaskDataset)> {
    split_examples(task, 0.5, &mut rng::substream(seed, &format!("sub/{}", task.task_id)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub l_test: f64,
    pub meta_val_acc: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: MetaParams,
    pub best_val_acc: f64,
    /// Iteration after which `best` was taken; 0 stands for the initial Θ.
    pub best_iteration: usize,
    pub last: MetaParams,
    pub history: Vec<IterationRecord>,
}

/// Mean accuracy of `meta` on validation episodes: adapt on a sampled pair,
/// then classify its test role with `eval_shots` support from its train role.
///
/// The episode stream is rebuilt from `seed` on every call, so the score of a
/// given Θ is reproducible.
pub fn validate(
    meta: &MetaParams,
    net: &MatchingNet,
    tasks: &[TaskDataset],
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::substream(seed, "val");
    let mut total = 0.0;
    let episodes = config.val_episodes.max(1);
    for _ in 0..episodes {
        let (d_train, d_test) = sample_dataset_pair(tasks, config.classes_per_episode, config.train_fraction, &mut rng)?;
        let theta = adapt_learner(meta, net, &d_train, &d_test, &config.unroll(), &mut rng)?;
        let classes = d_train.class_ids();
        let k = config.eval_shots.min(d_train.min_class_size());
        let ep = role_episode(&d_train, &d_test, &classes, k, usize::MAX, &mut rng)?;
        total += net.accuracy(&theta, &ep)?;
    }
    Ok(total / episodes as f64)
}

fn clip(mut grad: crate::meta::MetaGrad, max_norm: f64, include_c0: bool) -> crate::meta::MetaGrad {
    if !include_c0 {
        grad.c0.iter_mut().for_each(|v| *v = 0.0);
    }
    let norm = grad.norm(include_c0);
    if norm > max_norm {
        grad = grad.scaled(max_norm / norm);
    }
    grad
}

/// One meta-iteration; returns the updated Θ and the pre-update L_test.
pub fn meta_iteration(
    meta: &MetaParams,
    net: &MatchingNet,
    tasks: &[TaskDataset],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(MetaParams, f64)> {
    let (d_train, d_test) = sample_dataset_pair(tasks, config.classes_per_episode, config.train_fraction, rng)?;
    let mut tape = Tape::new();
    let vars = meta.bind(&mut tape);
    let unroll = inner_unroll(&mut tape, &vars, net, &d_train, &d_test, &config.unroll(), rng)?;
    let loss = test_loss(&mut tape, net, unroll.state.c, &d_train, &d_test, config.test_query_cap, rng)?;
    let l_test = tape.value(loss).item();
    let grad = vars.gradient(&tape, loss)?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteInput("meta-gradient is not finite".into()));
    }
    let grad = clip(grad, config.clip_norm, config.train_c0);
    Ok((meta.apply_update(&grad, config.meta_lr, config.train_c0)?, l_test))
}

/// Meta-trains from `initial` and keeps the best Θ on meta-validation.
///
/// Without validation tasks the last Θ is also the best one.
pub fn meta_train_from(
    initial: MetaParams,
    net: &MatchingNet,
    meta_train: &[TaskDataset],
    meta_val: &[TaskDataset],
    config: &TrainConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if meta_train.is_empty() {
        return Err(Error::Data("meta-train split is empty".into()));
    }
    if initial.c0.len() != net.param_count() {
        return Err(Error::Dimension(format!(
            "Θ carries {} learner parameters, the matching net needs {}",
            initial.c0.len(),
            net.param_count()
        )));
    }
    let started = Instant::now();
    let mut rng = rng::substream(seed, "train/episodes");
    let do_val = !meta_val.is_empty();
    let mut best_val_acc = if do_val {
        validate(&initial, net, meta_val, config, seed)?
    } else {
        f64::NAN
    };
    let mut best = initial.clone();
    let mut best_iteration = 0;
    let mut meta = initial;
    let mut history = Vec::with_capacity(config.iterations);
    for d in 1..=config.iterations {
        let (next, l_test) = meta_iteration(&meta, net, meta_train, config, &mut rng)?;
        meta = next;
        let due = d == config.iterations || (config.val_interval > 0 && d % config.val_interval == 0);
        let meta_val_acc = if do_val && due {
            let acc = validate(&meta, net, meta_val, config, seed)?;
            if acc > best_val_acc {
                best_val_acc = acc;
                best = meta.clone();
                best_iteration = d;
            }
            Some(acc)
        } else {
            None
        };
        let record = IterationRecord {
            iteration: d,
            l_test,
            meta_val_acc,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_iteration(&record);
        history.push(record);
    }
    if !do_val {
        best = meta.clone();
        best_iteration = config.iterations;
    }
    Ok(TrainOutcome {
        best,
        best_val_acc,
        best_iteration,
        last: meta,
        history,
    })
}

/// Meta-trains from the seeded initialization.
pub fn meta_train(
    net: &MatchingNet,
    meta_train: &[TaskDataset],
    meta_val: &[TaskDataset],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let initial = initial_meta(net, seed)?;
    meta_train_from(initial, net, meta_train, meta_val, config, seed, |_| {})
}

/// Seeded Θ: Glorot learner weights as `c0` and the default gate biases.
pub fn initial_meta(net: &MatchingNet, seed: u64) -> Result<MetaParams> {
    let c0 = init_params(&net.encoder, rng::derive_seed(seed, "init/encoder"))?;
    crate::meta::init_meta(net.param_count(), rng::derive_seed(seed, "init/meta"), c0)
}

/// Episodic SGD for the plain matching network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub iterations: usize,
    pub lr: f64,
    pub shots: usize,
    pub batch_size: usize,
    pub classes_per_episode: Option<usize>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.05,
            shots: 1,
            batch_size: 16,
            classes_per_episode: Some(5),
        }
    }
}

/// Trains from `init` by `sgd_step` on episodes of tasks drawn uniformly.
pub fn train_matching_sgd(
    init: LearnerParams,
    net: &MatchingNet,
    tasks: &[TaskDataset],
    config: &SgdConfig,
    rng: &mut Rng,
) -> Result<LearnerParams> {
    if config.iterations > 0 && tasks.is_empty() {
        return Err(Error::Data("no tasks to train on".into()));
    }
    let mut params = init;
    for _ in 0..config.iterations {
        let task = tasks.choose(rng).expect("tasks is not empty");
        let ids = task.class_ids();
        let n = config.classes_per_episode.map_or(ids.len(), |c| c.min(ids.len()));
        let mut classes: Vec<String> = ids.choose_multiple(rng, n).cloned().collect();
        classes.sort();
        let ep = sample_episode(task, &classes, config.shots, config.batch_size, rng)?;
        let (_, grad) = net.loss_and_grad(params.flat(), &ep)?;
        let flat = sgd_step(params.flat(), &grad, config.lr)?;
        params = params.with_flat(flat)?;
    }
    Ok(params)
}
