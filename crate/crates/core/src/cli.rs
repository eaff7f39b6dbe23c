//! Command-line interface.
//!
//! Files under `--out`:
//!
//! ```text
//! data/<task>.jsonl, data/manifest.json   gen
//! retrieval.json                          retrieve
//! checkpoint.mml, checkpoint.mml.json     train
//! metrics.jsonl                           train
//! results.csv                             eval
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Sidecar, CHECKPOINT_VERSION};
use crate::config::Config;
use crate::data::{load_tasks, save_tasks, write_atomic, Provenance, MetaSplit};
use crate::error::{Error, Result};
use crate::experiment::{self, method_mean, METHOD_BASELINE, METHOD_META, METHOD_NO_ADAPT};
use crate::retrieval::RetrievalReport;
use crate::training::IterationRecord;

pub const DATA_DIR: &str = "data";
pub const REPORT_FILE: &str = "retrieval.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.mml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Parser)]
#[command(name = "metametric", version, about = "Few-shot meta metric learning on synthetic task pools")]
pub struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task pool.
    Gen,
    /// Score and select auxiliary tasks for every target.
    Retrieve,
    /// Meta-train and write the best-on-validation checkpoint.
    Train {
        /// Continue from this checkpoint instead of the seeded initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt, evaluate and write the results table.
    Eval {
        /// Checkpoint to evaluate; defaults to the one under `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// gen, retrieve, train and eval in sequence.
    RunExperiment,
}

struct Ctx {
    cfg: Config,
    hash: String,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
        }
    }

    fn split(&self) -> Result<MetaSplit> {
        let tasks = load_tasks(&self.out.join(DATA_DIR))?;
        if tasks.is_empty() {
            return Err(Error::Data("no tasks found; run `gen` first".into()));
        }
        experiment::split(&self.cfg, &tasks)
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.resolved()
}

fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    text.into_bytes()
}

fn cmd_gen(ctx: &Ctx) -> Result<()> {
    let tasks = experiment::generate_tasks(&ctx.cfg)?;
    // the split is validated here so that bad ratios fail before training
    experiment::split(&ctx.cfg, &tasks)?;
    let dir = ctx.out.join(DATA_DIR);
    save_tasks(&tasks, &dir, &ctx.provenance())?;
    ctx.say(format!("wrote {} tasks to {}", tasks.len(), dir.display()));
    Ok(())
}

fn cmd_retrieve(ctx: &Ctx) -> Result<()> {
    let split = ctx.split()?;
    let report = experiment::run_retrieval(&ctx.cfg, &split)?;
    write_atomic(&ctx.out.join(REPORT_FILE), &to_json_pretty(&report))?;
    for t in &report.targets {
        ctx.say(format!("{}: {}", t.target_task, t.selected.join(" ")));
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    #[serde(flatten)]
    record: &'a IterationRecord,
    config_hash: &'a str,
    seed: u64,
}

fn cmd_train(ctx: &Ctx, resume: Option<&Path>) -> Result<()> {
    let split = ctx.split()?;
    let initial = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.encoder != ctx.cfg.encoder {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different encoder",
                    path.display()
                )));
            }
            Some(ck.meta)
        }
        None => None,
    };
    let every = (ctx.cfg.train.iterations / 20).max(1);
    let outcome = experiment::run_training(&ctx.cfg, &split, initial, |r| {
        if r.iteration % every == 0 {
            let val = r.meta_val_acc.map_or(String::new(), |a| format!(" val {a:.4}"));
            ctx.say(format!("iter {:>6} L_test {:.4}{val} ({:.1}s)", r.iteration, r.l_test, r.wall_ms / 1e3));
        }
    })?;
    let mut log = String::new();
    for record in &outcome.history {
        let line = MetricsLine {
            record,
            config_hash: &ctx.hash,
            seed: ctx.cfg.seed,
        };
        log.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
        log.push('\n');
    }
    write_atomic(&ctx.out.join(METRICS_FILE), log.as_bytes())?;
    let ck = Checkpoint {
        meta: outcome.best,
        encoder: ctx.cfg.encoder.clone(),
        similarity: ctx.cfg.matching.similarity,
        config_hash: ctx.hash.clone(),
        seed: ctx.cfg.seed,
    };
    let sidecar = Sidecar {
        format_version: CHECKPOINT_VERSION,
        config_hash: ctx.hash.clone(),
        seed: ctx.cfg.seed,
        best_iteration: outcome.best_iteration,
        best_val_acc: outcome.best_val_acc.is_finite().then_some(outcome.best_val_acc),
        iterations: ctx.cfg.train.iterations,
        test_query_cap: ctx.cfg.train.test_query_cap,
    };
    let path = ctx.out.join(CHECKPOINT_FILE);
    ck.save(&path, &sidecar)?;
    ctx.say(format!(
        "wrote {} (best iteration {}, meta-val {:?})",
        path.display(),
        sidecar.best_iteration,
        sidecar.best_val_acc
    ));
    Ok(())
}

fn cmd_eval(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<()> {
    let split = ctx.split()?;
    let path = checkpoint.map_or_else(|| ctx.out.join(CHECKPOINT_FILE), Path::to_path_buf);
    let ck = Checkpoint::load(&path)?;
    if ck.encoder != ctx.cfg.encoder {
        return Err(Error::Config(format!("checkpoint {} was written for a different encoder", path.display())));
    }
    let report = match ctx.cfg.eval.adapt_source {
        crate::config::AdaptSource::Aux => {
            let p = ctx.out.join(REPORT_FILE);
            let text = std::fs::read_to_string(&p)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}; run `retrieve` first", p.display())))?;
            let report: RetrievalReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            Some(report)
        }
        crate::config::AdaptSource::Sub => None,
    };
    let baseline = experiment::train_baseline(&ctx.cfg, &split)?;
    let rows = experiment::run_eval(&ctx.cfg, &split, &ck.meta, &baseline, report.as_ref())?;
    let out = ctx.out.join(RESULTS_FILE);
    experiment::write_results(&out, &rows, &ctx.hash, ctx.cfg.seed)?;
    for &k in &ctx.cfg.eval.shots {
        let mean = |m| method_mean(&rows, m, k).unwrap_or(f64::NAN);
        ctx.say(format!(
            "{k}-shot: {METHOD_META} {:.4}  {METHOD_BASELINE} {:.4}  {METHOD_NO_ADAPT} {:.4}",
            mean(METHOD_META),
            mean(METHOD_BASELINE),
            mean(METHOD_NO_ADAPT)
        ));
    }
    ctx.say(format!("wrote {}", out.display()));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ctx = Ctx {
        hash: cfg.hash(),
        cfg,
        out: cli.out.clone(),
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Gen => cmd_gen(&ctx),
        Command::Retrieve => cmd_retrieve(&ctx),
        Command::Train { resume } => cmd_train(&ctx, resume.as_deref()),
        Command::Eval { checkpoint } => cmd_eval(&ctx, checkpoint.as_deref()),
        Command::RunExperiment => {
            cmd_gen(&ctx)?;
            if ctx.cfg.eval.adapt_source == crate::config::AdaptSource::Aux {
                cmd_retrieve(&ctx)?;
            }
            cmd_train(&ctx, None)?;
            cmd_eval(&ctx, None)
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
