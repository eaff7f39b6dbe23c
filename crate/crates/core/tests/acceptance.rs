//! Acceptance suite. Runs every criterion at its stated tolerance and
//! runtime budget, prints one line per criterion and fails if any does.

mod common;

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use metametric::autodiff::{Tape, Tensor};
use metametric::checkpoint::Checkpoint;
use metametric::config::Config;
use metametric::data::{generate, GeneratorSpec};
use metametric::encoder::{init_params, Activation, EncoderConfig, LearnerParams};
use metametric::experiment;
use metametric::matching::{attention, Episode, Item, MatchingNet};
use metametric::meta::{meta_step, sgd_step, GradRecord, MetaParams, MetaState};
use metametric::rng::{self, Rng};
use metametric::training::sample_episode;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sgd_reduction() -> Outcome {
    let cfg = EncoderConfig::new(4, vec![6], 3, Activation::Tanh);
    let net = MatchingNet::new(cfg.clone());
    let alpha = 0.1;
    let c0 = init_params(&cfg, 1).unwrap();
    let meta = MetaParams::frozen_sgd(alpha, c0.clone()).unwrap();
    let task = &generate(&GeneratorSpec {
        n_tasks: 1,
        classes_per_task: metametric::data::ClassCount::Fixed(3),
        examples_per_class: 8,
        feature_dim: 4,
        signal_dim: 2,
        seed: 1,
        ..GeneratorSpec::default()
    })
    .unwrap()[0];
    let mut rng = rng::substream(1, "episodes");
    let episodes: Vec<Episode> = (0..20)
        .map(|_| sample_episode(task, &task.class_ids(), 2, 6, &mut rng).unwrap())
        .collect();

    let mut tape = Tape::new();
    let vars = meta.bind(&mut tape);
    let mut state = MetaState::initial(&mut tape, &vars).unwrap();
    let mut sgd = c0.flat().to_vec();
    let mut worst: f64 = 0.0;
    for ep in &episodes {
        let (loss, grad) = net.loss_and_grad(tape.value(state.c).data(), ep).unwrap();
        let rec = GradRecord::constant(&mut tape, loss, grad);
        state = meta_step(&mut tape, &vars, &state, &rec).unwrap();
        let (_, g) = net.loss_and_grad(&sgd, ep).unwrap();
        sgd = sgd_step(&sgd, &g, alpha).unwrap();
        for (a, b) in tape.value(state.c).data().iter().zip(&sgd) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst <= 1e-9, format!("max |θ_t - θ_t^sgd| = {worst:.2e} over T=20 (tol 1e-9)"))
}

fn gradient_correctness() -> Outcome {
    let graphs = 150;
    let worst_graph = (0..graphs as u64).map(graph_gradient_error).fold(0.0, f64::max);
    let worst_episode = (0..5).map(episode_gradient_error).fold(0.0, f64::max);
    outcome(
        worst_graph <= 1e-4 && worst_episode <= 1e-4,
        format!(
            "{graphs} random graphs max rel err {worst_graph:.2e}; episode loss (3-way, 2-shot, dim 4) {worst_episode:.2e} (tol 1e-4)"
        ),
    )
}

fn stop_gradient_semantics() -> Outcome {
    let mut worst_first: f64 = 0.0;
    let mut min_gap = f64::INFINITY;
    for seed in 0..5 {
        let toy = ToyProblem::new(seed);
        let engine = toy.engine_meta_gradient();
        let first = toy.dual_meta_gradient(false);
        let full = toy.dual_meta_gradient(true);
        let err = engine.iter().zip(&first).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_first = worst_first.max(err);
        min_gap = min_gap.min(relative_error(&engine, &full));
    }
    outcome(
        worst_first <= 1e-6 && min_gap > 1e-3,
        format!("|engine - first-order| max {worst_first:.2e} (tol 1e-6); rel distance to second-order min {min_gap:.2e}"),
    )
}

fn seeds_line(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn flexible_labels() -> Outcome {
    let accs: Vec<f64> = (0..10).map(|s| run_pipeline(&flexible_label_config(s), 5).meta).collect();
    let hits = accs.iter().filter(|&&a| a >= 0.2 + 0.15).count();
    outcome(
        hits >= 8,
        format!("3-way meta-train, 5-way 5-shot eval: {hits}/10 seeds >= 0.35 [{}]", seeds_line(&accs)),
    )
}

fn table_ordering() -> Outcome {
    let scores: Vec<MethodScores> = (0..10).map(|s| run_pipeline(&multi_domain_config(s), 1)).collect();
    let margins: Vec<f64> = scores.iter().map(|s| s.meta - s.baseline).collect();
    let wins = margins.iter().filter(|&&m| m > 0.0).count();
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    let meta = scores.iter().map(|s| s.meta).sum::<f64>() / 10.0;
    let base = scores.iter().map(|s| s.baseline).sum::<f64>() / 10.0;
    outcome(
        wins >= 8 && mean >= 0.02,
        format!(
            "1-shot meta-metric {meta:.3} vs matching-net {base:.3}: wins {wins}/10, mean margin {:.1} pts (need 8/10, 2.0)",
            100.0 * mean
        ),
    )
}

fn retrieval_effectiveness() -> Outcome {
    let full = (0..20).filter(|&s| planted_recall(s, 1.0) == 3).count();
    outcome(full >= 18, format!("s=3 recovers all 3 planted tasks in {full}/20 seeds (need 18)"))
}

fn invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = Rng::seed_from_u64(7);

    // normalization
    let mut worst_sum: f64 = 0.0;
    for scale in [1.0, 30.0, 1000.0] {
        let mut tape = Tape::new();
        let logits: Vec<f64> = (0..24).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let x = tape.input(Tensor::matrix(4, 6, logits).unwrap());
        let p = tape.softmax(x).unwrap();
        for row in tape.value(p).data().chunks(6) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let q: Vec<f64> = (0..5).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let s: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        worst_sum = worst_sum.max((attention(&q, &s).unwrap().iter().sum::<f64>() - 1.0).abs());
    }
    if worst_sum > 1e-9 {
        failures.push(format!("normalization off by {worst_sum:e}"));
    }

    // permutation invariance and relabeling equivariance
    let cfg = EncoderConfig::new(4, vec![6], 3, Activation::Tanh);
    let net = MatchingNet::new(cfg.clone());
    let params = init_params(&cfg, 3).unwrap();
    let mut item = |id: usize, label| Item::new(format!("i{id}"), (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(), label);
    let support: Vec<Item> = (0..9).map(|i| item(i, i % 3)).collect();
    let queries: Vec<Vec<f64>> = (0..5).map(|i| item(100 + i, 0).features).collect();
    let q: Vec<&[f64]> = queries.iter().map(Vec::as_slice).collect();
    let base = net.predict_batch(&params, &support, 3, &q).unwrap();
    let mut shuffled = support.clone();
    shuffled.shuffle(&mut rng::substream(1, "perm"));
    let perm = net.predict_batch(&params, &shuffled, 3, &q).unwrap();
    let relabel = [2, 0, 1];
    let relabelled: Vec<Item> = support
        .iter()
        .map(|i| Item::new(i.id.clone(), i.features.clone(), relabel[i.label]))
        .collect();
    let eq = net.predict_batch(&params, &relabelled, 3, &q).unwrap();
    let mut worst_perm: f64 = 0.0;
    let mut worst_relabel: f64 = 0.0;
    for ((b, p), e) in base.iter().zip(&perm).zip(&eq) {
        for c in 0..3 {
            worst_perm = worst_perm.max((b.probs[c] - p.probs[c]).abs());
            worst_relabel = worst_relabel.max((b.probs[c] - e.probs[relabel[c]]).abs());
        }
    }
    if worst_perm > 1e-12 || worst_relabel > 1e-12 {
        failures.push(format!("permutation {worst_perm:e}, relabeling {worst_relabel:e}"));
    }

    // support / batch disjointness
    let task = &generate(&GeneratorSpec {
        n_tasks: 1,
        classes_per_task: metametric::data::ClassCount::Fixed(5),
        examples_per_class: 6,
        seed: 2,
        ..GeneratorSpec::default()
    })
    .unwrap()[0];
    let classes = task.class_ids();
    let mut ep_rng = rng::substream(2, "episodes");
    for _ in 0..1000 {
        let ep = sample_episode(task, &classes, 2, 10, &mut ep_rng).unwrap();
        let s: HashSet<&str> = ep.support.iter().map(|i| i.id.as_str()).collect();
        let per_class_ok = (0..5).all(|l| ep.support.iter().filter(|i| i.label == l).count() == 2);
        if ep.batch.iter().any(|i| s.contains(i.id.as_str())) || !per_class_ok {
            failures.push("episode support and batch overlap".into());
            break;
        }
    }

    // uniform prediction
    let mut worst_nll: f64 = 0.0;
    for n in 2..=6 {
        let zeros = LearnerParams::zeros(&cfg);
        let mut item = |id: String, label| Item::new(id, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), label);
        let support = (0..2 * n).map(|i| item(format!("s{i}"), i % n)).collect();
        let batch = (0..n).map(|i| item(format!("q{i}"), i)).collect();
        let ep = Episode::new((0..n).map(|c| c.to_string()).collect(), support, batch).unwrap();
        let loss = net.loss(zeros.flat(), &ep).unwrap();
        worst_nll = worst_nll.max((loss - (n as f64).ln()).abs());
    }
    if worst_nll > 1e-9 {
        failures.push(format!("uniform NLL off by {worst_nll:e}"));
    }

    // bitwise determinism of full runs
    let run = || {
        let mut cfg = Config {
            seed: 5,
            ..Config::default()
        };
        cfg.train.iterations = 300;
        let cfg = cfg.resolved().unwrap();
        let tasks = experiment::generate_tasks(&cfg).unwrap();
        let split = experiment::split(&cfg, &tasks).unwrap();
        let out = experiment::run_training(&cfg, &split, None, |_| {}).unwrap();
        Checkpoint {
            meta: out.best,
            encoder: cfg.encoder.clone(),
            similarity: cfg.matching.similarity,
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
        .to_bytes()
    };
    if run() != run() {
        failures.push("checkpoints of identical runs differ".into());
    }

    let pass = failures.is_empty();
    let detail = if pass {
        format!(
            "normalization {worst_sum:.1e}, permutation {worst_perm:.1e}, relabeling {worst_relabel:.1e}, \
             1000 disjoint episodes, |NLL - ln N| {worst_nll:.1e}, identical checkpoints"
        )
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

fn adaptation_benefit() -> Outcome {
    let scores: Vec<MethodScores> = (0..10).map(|s| run_pipeline(&sub_adaptation_config(s), 1)).collect();
    let wins = scores.iter().filter(|s| s.meta > s.no_adapt).count();
    let adapted: Vec<f64> = scores.iter().map(|s| s.meta).collect();
    let c0: Vec<f64> = scores.iter().map(|s| s.no_adapt).collect();
    outcome(
        wins >= 8,
        format!(
            "adapted beats c0 in {wins}/10 seeds (need 8): adapted [{}] c0 [{}]",
            seeds_line(&adapted),
            seeds_line(&c0)
        ),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, &'static str, u64, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("1", "sgd reduction", 60, sgd_reduction),
        ("2", "gradient correctness", 60, gradient_correctness),
        ("3", "stop-gradient semantics", 60, stop_gradient_semantics),
        ("4", "flexible label count", 600, flexible_labels),
        ("5", "multi-task ordering", 1800, table_ordering),
        ("6", "retrieval effectiveness", 600, retrieval_effectiveness),
        ("7", "invariant suite", 300, invariants),
        ("8", "adaptation benefit", 600, adaptation_benefit),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let started = Instant::now();
        let result = run();
        let elapsed = started.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let pass = result.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {id} {:<24} {} | {} | {:.1}s of {budget}s",
            name,
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        println!("acceptance: all 8 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 8 criteria fail");
        ExitCode::FAILURE
    }
}
