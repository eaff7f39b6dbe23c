//! Oracles and benchmark runners shared by the integration tests and the
//! acceptance harness.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng as _, SeedableRng};

use metametric::autodiff::{NodeId, Tape, Tensor};
use metametric::config::{AdaptSource, Config};
use metametric::data::{generate, ClassCount, GeneratorSpec, TaskDataset};
use metametric::encoder::{init_params, Activation, EncoderConfig};
use metametric::experiment::{self, method_mean, METHOD_BASELINE, METHOD_META, METHOD_NO_ADAPT};
use metametric::matching::{Episode, Item, MatchingNet};
use metametric::meta::{meta_step, GradRecord, MetaParams, MetaState, FEATURE_DIM, PREPROCESS_P};
use metametric::retrieval::{retrieve, RetrievalConfig};
use metametric::rng::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `output` with respect to `wrt`, by replaying the tape.
pub fn finite_difference(tape: &Tape, output: NodeId, wrt: NodeId) -> Vec<f64> {
    let base = tape.value(wrt).clone();
    (0..base.len())
        .map(|i| {
            let eval = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                let bindings: HashMap<NodeId, Tensor> = [(wrt, t)].into_iter().collect();
                tape.evaluate(&bindings).unwrap()[output.index()].item()
            };
            (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A random differentiable graph over two vectors and a matrix, ending in a
/// scalar. Returns the tape, its inputs and the output node.
pub fn random_graph(seed: u64) -> (Tape, Vec<NodeId>, NodeId) {
    let mut rng = Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=4);
    let mut tape = Tape::new();
    let inputs = vec![
        tape.input(random_tensor(&mut rng, &[n])),
        tape.input(random_tensor(&mut rng, &[n])),
        tape.input(random_tensor(&mut rng, &[n, n])),
    ];
    let mut vecs = vec![inputs[0], inputs[1]];
    let mut mats = vec![inputs[2]];
    let ops = rng.random_range(3..=8);
    for _ in 0..ops {
        let v = vecs[rng.random_range(0..vecs.len())];
        let w = vecs[rng.random_range(0..vecs.len())];
        let m = mats[rng.random_range(0..mats.len())];
        let k = mats[rng.random_range(0..mats.len())];
        let t = &mut tape;
        match rng.random_range(0..17) {
            0 => vecs.push(t.tanh(v).unwrap()),
            1 => vecs.push(t.sigmoid(v).unwrap()),
            2 => {
                let s = t.scale(v, 0.5).unwrap();
                vecs.push(t.exp(s).unwrap())
            }
            3 => {
                let s = t.sigmoid(v).unwrap();
                vecs.push(t.log(s).unwrap())
            }
            4 => vecs.push(t.softmax(v).unwrap()),
            5 => vecs.push(t.add(v, w).unwrap()),
            6 => vecs.push(t.sub(v, w).unwrap()),
            7 => vecs.push(t.mul(v, w).unwrap()),
            8 => vecs.push(t.matvec(m, v).unwrap()),
            9 => {
                let c = t.concat(&[v, w]).unwrap();
                vecs.push(t.slice(c, 1, n).unwrap())
            }
            10 => mats.push(t.matmul(m, k).unwrap()),
            11 => mats.push(t.transpose(m).unwrap()),
            12 => mats.push(t.row_normalize(m).unwrap()),
            13 => mats.push(t.add(m, v).unwrap()),
            14 => mats.push(t.tanh(m).unwrap()),
            15 => mats.push(t.softmax(m).unwrap()),
            _ => {
                let d = t.dot(v, w).unwrap();
                vecs.push(t.mul(v, d).unwrap())
            }
        }
    }
    let wv = tape.constant(random_tensor(&mut rng, &[n]));
    let wm = tape.constant(random_tensor(&mut rng, &[n, n]));
    let v = *vecs.last().unwrap();
    let m = *mats.last().unwrap();
    let a = tape.dot(v, wv).unwrap();
    let wm_m = tape.mul(m, wm).unwrap();
    let b = tape.sum(wm_m).unwrap();
    let probs = tape.softmax(m).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let c = tape.neg_log_likelihood(probs, &labels).unwrap();
    let ab = tape.add(a, b).unwrap();
    let out = tape.add(ab, c).unwrap();
    (tape, inputs, out)
}

/// Worst relative error between autodiff and finite differences over the
/// inputs of one random graph.
pub fn graph_gradient_error(seed: u64) -> f64 {
    let (tape, inputs, out) = random_graph(seed);
    let grads = tape.gradient(out, &inputs).unwrap();
    inputs
        .iter()
        .zip(&grads)
        .map(|(&x, g)| relative_error(g.data(), &finite_difference(&tape, out, x)))
        .fold(0.0, f64::max)
}

/// Relative gradient error of the episode loss of a 3-class, 2-shot,
/// 4-feature episode.
pub fn episode_gradient_error(seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let cfg = EncoderConfig::new(4, vec![5], 3, Activation::Tanh);
    let net = MatchingNet::new(cfg.clone());
    let mut item = |id: String, label| Item::new(id, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), label);
    let support = (0..6).map(|i| item(format!("s{i}"), i / 2)).collect();
    let batch = (0..6).map(|i| item(format!("q{i}"), i % 3)).collect();
    let episode = Episode::new(vec!["a".into(), "b".into(), "c".into()], support, batch).unwrap();
    let params = init_params(&cfg, seed).unwrap();
    let mut tape = Tape::new();
    let theta = tape.input(params.flat().to_vec());
    let loss = net.episode_loss(&mut tape, theta, &episode).unwrap();
    let grad = tape.gradient(loss, &[theta]).unwrap().remove(0);
    relative_error(grad.data(), &finite_difference(&tape, loss, theta))
}

/// Forward-mode dual number.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn c(v: f64) -> Self {
        Self { v, d: 0.0 }
    }
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
    fn sigmoid(self) -> Self {
        let s = 1.0 / (1.0 + (-self.v).exp());
        Self {
            v: s,
            d: self.d * s * (1.0 - s),
        }
    }
    /// The two preprocessing features.
    fn preprocess(self) -> (Self, Self) {
        let p = PREPROCESS_P;
        if self.v.abs() >= (-p).exp() {
            (
                Self {
                    v: self.v.abs().ln() / p,
                    d: self.d / (self.v * p),
                },
                Self::c(self.v.signum()),
            )
        } else {
            (
                Self::c(-1.0),
                Self {
                    v: p.exp() * self.v,
                    d: p.exp() * self.d,
                },
            )
        }
    }
}

/// Quadratic `½ Σ a_j (θ_j - b_j)²` on two coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Quadratic {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Quadratic {
    fn loss(&self, th: &[Dual]) -> Dual {
        let mut acc = Dual::c(0.0);
        for j in 0..2 {
            let diff = th[j].add(Dual::c(-self.b[j]));
            acc = acc.add(Dual::c(0.5 * self.a[j]).mul(diff).mul(diff));
        }
        acc
    }
    fn grad(&self, th: &[Dual]) -> Vec<Dual> {
        (0..2).map(|j| Dual::c(self.a[j]).mul(th[j].add(Dual::c(-self.b[j])))).collect()
    }
    pub fn loss_value(&self, th: &[f64]) -> f64 {
        (0..2).map(|j| 0.5 * self.a[j] * (th[j] - self.b[j]).powi(2)).sum()
    }
    pub fn grad_value(&self, th: &[f64]) -> Vec<f64> {
        (0..2).map(|j| self.a[j] * (th[j] - self.b[j])).collect()
    }
}

/// The toy meta-learning problem: `T` steps on `inner`, scored by `outer`.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub meta: MetaParams,
    pub inner: Quadratic,
    pub outer: Quadratic,
    pub steps: usize,
}

/// Θ flattened as `[W_F (7), b_F, W_I (7), b_I, c0 (2)]`.
pub fn flat_theta(m: &MetaParams) -> Vec<f64> {
    let mut v = m.forget_w.clone();
    v.push(m.forget_b);
    v.extend(&m.input_w);
    v.push(m.input_b);
    v.extend(m.c0.flat());
    v
}

impl ToyProblem {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let cfg = EncoderConfig::new(1, vec![], 1, Activation::Relu);
        let c0 = init_params(&cfg, seed)
            .unwrap()
            .with_flat(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .unwrap();
        let w = |rng: &mut Rng| (0..FEATURE_DIM).map(|_| rng.random_range(-0.3..0.3)).collect();
        Self {
            meta: MetaParams {
                forget_w: w(&mut rng),
                forget_b: 2.0,
                input_w: w(&mut rng),
                input_b: -1.0,
                c0,
            },
            inner: Quadratic {
                a: [1.5, 0.5],
                b: [1.0, -2.0],
            },
            outer: Quadratic {
                a: [1.0, 2.0],
                b: [0.5, -1.0],
            },
            steps: 3,
        }
    }

    /// `dL_test/dΘ` from the engine's reverse pass over the unroll.
    pub fn engine_meta_gradient(&self) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = self.meta.bind(&mut tape);
        let mut state = MetaState::initial(&mut tape, &vars).unwrap();
        for _ in 0..self.steps {
            let c = tape.value(state.c).data().to_vec();
            let rec = GradRecord::constant(&mut tape, self.inner.loss_value(&c), self.inner.grad_value(&c));
            state = meta_step(&mut tape, &vars, &state, &rec).unwrap();
        }
        let diff = tape.constant(self.outer.b.to_vec());
        let diff = tape.sub(state.c, diff).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let a = tape.constant(self.outer.a.iter().map(|a| 0.5 * a).collect::<Vec<_>>());
        let weighted = tape.mul(sq, a).unwrap();
        let loss = tape.sum(weighted).unwrap();
        let g = vars.gradient(&tape, loss).unwrap();
        let mut v = g.forget_w;
        v.push(g.forget_b);
        v.extend(&g.input_w);
        v.push(g.input_b);
        v.extend(&g.c0);
        v
    }

    /// L_test as a function of flat Θ with the direction `dir`, in dual
    /// numbers. With `second_order`, the inner loss and gradient carry their
    /// dependence on Θ; otherwise they are constants.
    fn dual_loss(&self, theta: &[f64], dir: usize, second_order: bool) -> Dual {
        let th: Vec<Dual> = theta
            .iter()
            .enumerate()
            .map(|(i, &v)| Dual {
                v,
                d: if i == dir { 1.0 } else { 0.0 },
            })
            .collect();
        let wf = &th[0..7];
        let bf = th[7];
        let wi = &th[8..15];
        let bi = th[15];
        let mut c: Vec<Dual> = th[16..18].to_vec();
        let mut f_prev = vec![bf.sigmoid(); 2];
        let mut i_prev = vec![bi.sigmoid(); 2];
        for _ in 0..self.steps {
            let strip = |x: Dual| if second_order { x } else { Dual::c(x.v) };
            let loss = strip(self.inner.loss(&c));
            let grad: Vec<Dual> = self.inner.grad(&c).into_iter().map(strip).collect();
            let (la, lb) = loss.preprocess();
            let mut next = Vec::with_capacity(2);
            let mut fs = Vec::with_capacity(2);
            let mut is = Vec::with_capacity(2);
            for j in 0..2 {
                let (ga, gb) = grad[j].preprocess();
                let u = [ga, gb, la, lb, c[j], f_prev[j], i_prev[j]];
                let lin = |w: &[Dual], b: Dual| u.iter().zip(w).fold(b, |acc, (x, w)| acc.add(x.mul(*w)));
                let f = lin(wf, bf).sigmoid();
                let i = lin(wi, bi).sigmoid();
                next.push(f.mul(c[j]).add(i.mul(grad[j]).mul(Dual::c(-1.0))));
                fs.push(f);
                is.push(i);
            }
            c = next;
            f_prev = fs;
            i_prev = is;
        }
        self.outer.loss(&c)
    }

    pub fn dual_meta_gradient(&self, second_order: bool) -> Vec<f64> {
        let theta = flat_theta(&self.meta);
        (0..theta.len()).map(|i| self.dual_loss(&theta, i, second_order).d).collect()
    }

    /// Central differences of the complete pipeline, in which the inner
    /// gradients do depend on Θ.
    pub fn full_finite_difference(&self) -> Vec<f64> {
        let theta = flat_theta(&self.meta);
        (0..theta.len())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut t = theta.clone();
                    t[i] += delta;
                    self.dual_loss(&t, usize::MAX, true).v
                };
                (eval(1e-6) - eval(-1e-6)) / 2e-6
            })
            .collect()
    }
}

/// Configuration of the flexible-label benchmark: 3 meta-train classes per
/// task, 5-way evaluation.
pub fn flexible_label_config(seed: u64) -> Config {
    let mut cfg = Config {
        seed,
        ..Config::default()
    };
    cfg.generator = GeneratorSpec {
        classes_per_task: ClassCount::Fixed(10),
        ..GeneratorSpec::default()
    };
    cfg.split.ratios = [0.3, 0.2, 0.5];
    cfg.train.classes_per_episode = Some(3);
    cfg.eval.adapt_source = AdaptSource::Sub;
    cfg.eval.adapt_classes = None;
    cfg.eval.n_way = Some(5);
    cfg.eval.shots = vec![5];
    cfg.resolved().unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct MethodScores {
    pub meta: f64,
    pub baseline: f64,
    pub no_adapt: f64,
}

/// Runs every pipeline stage for `cfg` and returns mean accuracies at `k`.
pub fn run_pipeline(cfg: &Config, k: usize) -> MethodScores {
    let tasks = experiment::generate_tasks(cfg).unwrap();
    let split = experiment::split(cfg, &tasks).unwrap();
    let report = match cfg.eval.adapt_source {
        AdaptSource::Aux => Some(experiment::run_retrieval(cfg, &split).unwrap()),
        AdaptSource::Sub => None,
    };
    let outcome = experiment::run_training(cfg, &split, None, |_| {}).unwrap();
    let baseline = experiment::train_baseline(cfg, &split).unwrap();
    let rows = experiment::run_eval(cfg, &split, &outcome.best, &baseline, report.as_ref()).unwrap();
    MethodScores {
        meta: method_mean(&rows, METHOD_META, k).unwrap(),
        baseline: method_mean(&rows, METHOD_BASELINE, k).unwrap(),
        no_adapt: method_mean(&rows, METHOD_NO_ADAPT, k).unwrap(),
    }
}

/// Multi-domain benchmark with auxiliary retrieval, 1-shot.
pub fn multi_domain_config(seed: u64) -> Config {
    let mut cfg = Config {
        seed,
        ..Config::default()
    };
    cfg.eval.shots = vec![1];
    cfg.resolved().unwrap()
}

/// Multi-domain benchmark adapted on each target's own held-out half.
pub fn sub_adaptation_config(seed: u64) -> Config {
    let mut cfg = multi_domain_config(seed);
    cfg.eval.adapt_source = AdaptSource::Sub;
    cfg
}

/// Planted retrieval benchmark: `t00` is the target, `t01..t03` share its
/// domain and `t04..t10` each come from a domain of their own.
pub fn planted_tasks(seed: u64, gap: f64) -> Vec<TaskDataset> {
    let mut spec = GeneratorSpec {
        n_tasks: 11,
        separation: 6.0,
        seed,
        ..GeneratorSpec::default()
    };
    spec.relatedness.groups = vec![0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7];
    spec.relatedness.gap = gap;
    generate(&spec).unwrap()
}

pub fn planted_recall(seed: u64, gap: f64) -> usize {
    let tasks = planted_tasks(seed, gap);
    let net = MatchingNet::new(Config::default().resolved().unwrap().encoder);
    let cfg = RetrievalConfig {
        s: 3,
        ..Config::default().retrieval
    };
    let report = retrieve(&net, &tasks[1..], &tasks[..1], &cfg, seed).unwrap();
    let selected = &report[0].selected;
    assert_eq!(selected.len(), 3);
    ["t01", "t02", "t03"].iter().filter(|id| selected.iter().any(|s| s == *id)).count()
}
