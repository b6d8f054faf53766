use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use occedge::gradsuite::{self, Precision, CHECKS};
use occedge::pipeline::{self, RunConfig, TRAIN_LOG};

/// Occlusion edge detection: synthetic data, training and benchmark evaluation.
#[derive(Debug, Parser)]
#[command(name = "occedge", version)]
struct Cli {
    /// Flat `key = value` configuration file applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key; may be repeated, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train and test splits under `data_dir`.
    Generate,
    /// Train `ablation` on the train split; writes the log and checkpoints under `out_dir`.
    Train {
        /// Print a progress line every N iterations.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Evaluate a checkpoint; prints EPR and OPR summaries and writes curves to `out_dir/eval`.
    Eval {
        /// Checkpoint directory (default: `checkpoint` key, then `out_dir/checkpoints/final`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset manifest (default: the test split under `data_dir`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score the ground truth itself instead of a network.
        #[arg(long, conflicts_with = "checkpoint")]
        ground_truth: bool,
    },
    /// Train and evaluate every ablation row; writes `out_dir/ablation.csv`.
    Ablate,
    /// Finite-difference check of every operator and network block.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
        precision: PrecisionArg,
        /// Only run checks whose name contains this string.
        #[arg(long)]
        only: Option<String>,
        /// Flip the sign of conv input gradients (sensitivity test hook).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
    Both,
}

impl PrecisionArg {
    fn list(self) -> &'static [Precision] {
        match self {
            PrecisionArg::F32 => &[Precision::Single],
            PrecisionArg::F64 => &[Precision::Double],
            PrecisionArg::Both => &[Precision::Single, Precision::Double],
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(occedge::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")).into());
        };
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let threads = pipeline::threads_from_env()?;
    match cli.command {
        Command::Generate => {
            let (train, test) = pipeline::generate(&cfg)?;
            println!("train manifest: {}", train.display());
            println!("test manifest: {}", test.display());
        }
        Command::Train { log_every } => {
            let samples = pipeline::load_split(&cfg.train_manifest())?;
            let total = cfg.iterations;
            let out = pipeline::train(&cfg, &samples, |row| {
                if row.iteration % log_every.max(1) == 0 || row.iteration == total {
                    eprintln!(
                        "iter {:>6}/{total} lr {:.3e} AL {:.3} SL {:.3} total {:.4}",
                        row.iteration, row.lr, row.al_sum, row.sl_sum, row.total
                    );
                }
            })?;
            println!("log: {}", cfg.out_dir.join(TRAIN_LOG).display());
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            ground_truth,
        } => {
            let manifest = manifest.unwrap_or_else(|| cfg.test_manifest());
            let samples = pipeline::load_split(&manifest)?;
            let dir = cfg.out_dir.join("eval");
            cfg.record(&dir)?;
            let report = if ground_truth {
                let preds: Vec<(Vec<f32>, Vec<f32>)> = samples
                    .iter()
                    .map(|s| (s.edges.to_tensor().into_vec(), s.orientation.values().to_vec()))
                    .collect();
                let report = pipeline::evaluate_predictions(&samples, &preds, &cfg.eval_config(threads))?;
                report.write(&dir)?;
                report
            } else {
                let ckpt = checkpoint
                    .or_else(|| cfg.checkpoint.clone())
                    .unwrap_or_else(|| cfg.out_dir.join("checkpoints").join("final"));
                let params = pipeline::load_checkpoint(&ckpt, &cfg.network_config(), cfg.ablation, None)
                    .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
                pipeline::evaluate_params(&cfg, &params, &samples, threads, &dir)?
            };
            print!("{}", report.summary_text());
        }
        Command::Ablate => {
            let train = pipeline::load_split(&cfg.train_manifest())?;
            let test = pipeline::load_split(&cfg.test_manifest())?;
            let rows = pipeline::ablate(&cfg, &train, &test, threads, |a, row| {
                if row.iteration % 100 == 0 {
                    eprintln!("[{a}] iter {} total {:.4}", row.iteration, row.total);
                }
            })?;
            print!("{}", pipeline::ablation_table(&rows));
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            if failed > 0 {
                bail!("{failed} ablation row(s) failed");
            }
        }
        Command::Gradcheck {
            precision,
            only,
            inject_fault,
        } => {
            let mut failures = 0;
            let mut ran = 0;
            for &p in precision.list() {
                for name in CHECKS.iter().filter(|n| only.as_deref().is_none_or(|o| n.contains(o))) {
                    let out = gradsuite::run_check(name, p, inject_fault)?;
                    let r = &out.report;
                    println!(
                        "{:<18} {} max_rel_err={:.3e} scored={} kinks={} {} ({:.2}s)",
                        out.name,
                        p.label(),
                        r.max_rel_error,
                        r.scored,
                        r.kinks,
                        if out.passed() { "PASS" } else { "FAIL" },
                        out.seconds
                    );
                    ran += 1;
                    failures += usize::from(!out.passed());
                }
            }
            if ran == 0 {
                return Err(occedge::Error::Config("no gradient check matches the filter".into()).into());
            }
            if failures > 0 {
                bail!("{failures} of {ran} gradient checks exceeded tolerance");
            }
            println!("all {ran} gradient checks passed");
        }
    }
    Ok(())
}

/// Usage and input problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<occedge::Error>(),
            Some(occedge::Error::Config(_) | occedge::Error::Io { .. } | occedge::Error::Format { .. })
        )
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
