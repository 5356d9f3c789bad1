//! `iwin`: verification, analysis, toy training and benchmarks.
//!
//! Every command prints a JSON document on stdout and exits 0 iff all of its
//! checks pass. `--json <path>` writes the same document to a file.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use iwin_core::analysis::{erf_depth_bound, model_cost, verify_theorem1, RadiusMode};
use iwin_core::block::{build_variant, IwinModel, ModelConfig};
use iwin_core::causal1d::{causality_suite, op_counts, LocalBranch};
use iwin_core::harness::{
    bench, bench_all, resolution_transfer_check, train_toy, verify_all_with, BenchOp, BenchSizes, RunReport,
    TrainConfig,
};
use iwin_core::interleave::{self, IndexMap, WindowLayout};
use iwin_core::ShapeLedger;

#[derive(Parser)]
#[command(
    name = "iwin",
    version,
    about = "Interleaved window attention: checks, analysis and toy training"
)]
struct Cli {
    /// Seed for data, weights and random inputs; overrides any seed in `--config`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write the JSON output to this path.
    #[arg(long, global = true, value_name = "PATH")]
    json: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every invariant suite and aggregate the result.
    VerifyAll,
    /// Interleaving permutation tables.
    #[command(subcommand)]
    Interleave(InterleaveCmd),
    /// Reachability and cost analysis.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Backbone configurations.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Train a tiny model on the synthetic task with plain gradient descent.
    TrainToy(TrainArgs),
    /// Train at the task size, then run the same weights at `--target`.
    TransferCheck {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 128)]
        target: usize,
    },
    /// Causal 1D variant.
    #[command(subcommand)]
    Causal1d(CausalCmd),
    /// Wall-clock micro-benchmarks.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum InterleaveCmd {
    /// Forward and inverse position tables for one layout.
    Dump {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        m: usize,
        /// Write the table as CSV to this path.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Exhaustive check that one block connects every pair of positions.
    Reach {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        /// `lemma`: reach radius K. `physical`: radius ⌊K/2⌋.
        #[arg(long, default_value = "lemma")]
        mode: RadiusMode,
    },
    /// Analytic parameters and FLOPs, compared with published totals.
    Cost {
        #[arg(long, default_value = "T")]
        variant: String,
        #[arg(long, default_value_t = 224)]
        res: usize,
        /// Write the per-stage table as CSV to this path.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Stage table, parameter count and FLOPs of a configuration.
    Describe {
        #[arg(long, default_value = "T")]
        variant: String,
        #[arg(long, default_value_t = 224)]
        res: usize,
        /// JSON `ModelConfig` to describe instead of a named variant.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CausalCmd {
    /// Jacobian and perturbation causality checks for one configuration.
    Check {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Branch::Conv)]
        branch: Branch,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    Conv,
    Attention,
}

impl From<Branch> for LocalBranch {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Conv => LocalBranch::Conv,
            Branch::Attention => LocalBranch::Attention,
        }
    }
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON `TrainConfig`; defaults to the tiny model on the 64×64 task.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// `rearrange`, `attention`, `dwconv`, or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

fn emit(value: &impl Serialize, json_path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
        _ => {}
    }
    if let Some(path) = json_path {
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn train_config(args: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    Ok(cfg)
}

/// Runs the command and returns whether every check passed.
fn run(cli: Cli) -> Result<bool> {
    let out = cli.json.as_deref();
    let start = Instant::now();
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::VerifyAll => {
            let r = verify_all_with(seed, interleave::restore)?;
            emit(&r, out)?;
            Ok(r.passed)
        }
        Command::Interleave(InterleaveCmd::Dump { h, w, m, csv }) => {
            let layout = WindowLayout::new(h, w, m)?;
            let map = IndexMap::new(layout);
            if let Some(path) = csv {
                std::fs::write(&path, map.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            let mut r = RunReport::new("interleave dump", json!({ "h": h, "w": w, "m": m }));
            r.metric("hg", layout.hg());
            r.metric("wg", layout.wg());
            r.metric("forward", &map.forward);
            r.metric("inverse", &map.inverse);
            r.check("bijection", map.is_bijection(), "every position has exactly one image");
            r.check(
                "round_trip",
                map.round_trips(),
                "inverse undoes forward at every position",
            );
            let r = r.finish(start);
            emit(&r, out)?;
            Ok(r.passed)
        }
        Command::Analyze(AnalyzeCmd::Reach { h, w, m, k, mode }) => {
            let layout = WindowLayout::new(h, w, m)?;
            let report = verify_theorem1(&layout, k, mode)?;
            let depth = erf_depth_bound(&layout, k)?;
            let mut value = serde_json::to_value(&report)?;
            value["erf_depth_bound"] = json!(depth);
            emit(&value, out)?;
            Ok(report.passed)
        }
        Command::Analyze(AnalyzeCmd::Cost { variant, res, csv }) => {
            let report = model_cost(&build_variant(&variant, res)?)?;
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            emit(&report, out)?;
            Ok(report.matches_reference != Some(false))
        }
        Command::Model(ModelCmd::Describe { variant, res, config }) => {
            let cfg: ModelConfig = match config {
                Some(path) => read_json(&path)?,
                None => build_variant(&variant, res)?,
            };
            let mut r = RunReport::new("model describe", &cfg);
            let valid = cfg.validate();
            r.check(
                "valid_config",
                valid.is_ok(),
                valid.as_ref().err().map_or(String::new(), |e| e.to_string()),
            );
            if valid.is_ok() {
                let mut ledger = ShapeLedger::default();
                IwinModel::new(&mut ledger, &cfg)?;
                let cost = model_cost(&cfg)?;
                r.metric("stages", cfg.stages());
                r.metric("parameters", ledger.num_params());
                r.metric("params_m", cost.params_m);
                r.metric("gflops", cost.gflops);
                r.check(
                    "ledger_matches_closed_form",
                    ledger.num_params() as u64 == cost.params,
                    format!("{} vs {}", ledger.num_params(), cost.params),
                );
            }
            let r = r.finish(start);
            emit(&r, out)?;
            Ok(r.passed)
        }
        Command::TrainToy(args) => {
            let cfg = train_config(&args, cli.seed)?;
            let outcome = train_toy(&cfg)?;
            emit(&outcome.report, out)?;
            Ok(outcome.report.passed)
        }
        Command::TransferCheck { train, target } => {
            let cfg = train_config(&train, cli.seed)?;
            let trained = train_toy(&cfg)?;
            let mut r = resolution_transfer_check(&trained, &cfg.task, target)?;
            r.metric("training", &trained.report.metrics);
            emit(&r, out)?;
            Ok(r.passed)
        }
        Command::Causal1d(CausalCmd::Check { n, m, k, branch }) => {
            let branch = LocalBranch::from(branch);
            let report = causality_suite(n, m, k, branch, seed)?;
            let mut r = RunReport::new(
                "causal1d check",
                json!({ "n": n, "m": m, "k": k, "branch": branch, "seed": seed }),
            );
            r.metric("information_flows", report.information_flows);
            r.metric("pairs", &report.pairs);
            r.metric("op_counts", op_counts(n, m, 4, k, branch));
            r.check(
                "jacobian_causal",
                report.jacobian_causal,
                "every future-to-past Jacobian block is zero",
            );
            r.check(
                "perturbation_causal",
                report.perturbation_causal,
                "perturbing a token leaves earlier outputs bit-identical",
            );
            let r = r.finish(start);
            emit(&r, out)?;
            Ok(r.passed)
        }
        Command::Bench(args) => {
            let r = if args.op == "all" {
                bench_all(args.repeats, seed)?
            } else {
                let op: BenchOp = args.op.parse()?;
                let d = BenchSizes::default_for(op);
                let sizes = BenchSizes {
                    size: args.size.unwrap_or(d.size),
                    channels: args.channels.unwrap_or(d.channels),
                    window: args.window.unwrap_or(d.window),
                    kernel: args.kernel.unwrap_or(d.kernel),
                    heads: args.heads.unwrap_or(d.heads),
                };
                bench(op, &sizes, args.repeats, seed)?
            };
            emit(&r, out)?;
            Ok(r.passed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
