use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sos_cli::commands::{self, DelaySource};
use sos_cli::config::ModeKind;
use sos_cli::{CliError, RunConfig};
use sosconv::phantom::Split;

#[derive(Parser)]
#[command(name = "sosconv", version, about = "Pulse-echo speed-of-sound imaging with learned convolutional forward models")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set inversion.lambda=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Constrained,
    Unconstrained,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms and synthetic delay observations.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn one kernel per steering pair from a dataset split.
    Learn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Use only the first N samples of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Reconstruct one SoS map from stored delays.
    Reconstruct {
        /// `builtin:line`, `builtin:window` or a learned model directory.
        #[arg(long)]
        model: String,
        /// Dataset directory; used with `--sample`.
        #[arg(long, requires = "sample", conflicts_with = "delays")]
        data: Option<PathBuf>,
        #[arg(long)]
        sample: Option<usize>,
        /// Directory holding `delays_PP` arrays.
        #[arg(long)]
        delays: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one or more models on a dataset split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare models against a baseline (the first `--model`) with paired tests.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe a dataset, model directory or array file.
    Info { path: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Command::Learn { mode: Some(m), .. } = &cli.command {
        cfg.learning.mode = match m {
            ModeArg::Constrained => ModeKind::Constrained,
            ModeArg::Unconstrained => ModeKind::Unconstrained,
        };
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.runtime.threads)
        .build()
        .map_err(|e| CliError::Config(format!("runtime.threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::GenData { out } => {
            let m = commands::gen_data(&cfg, &out)?;
            println!("dataset {} ({} samples) -> {}", m.dataset_id, m.samples.len(), out.display());
            Ok(())
        }
        Command::Learn { data, out, split, limit, .. } => {
            let m = commands::learn(&cfg, &data, &out, split.into(), limit)?;
            println!("model {} from {} samples -> {}", m.model_id, m.report.n_samples, out.display());
            for p in &m.report.pairs {
                println!("  {}: fit rmse_t {:.3e} s", p.pair, p.fit_rmse_t);
            }
            Ok(())
        }
        Command::Reconstruct { model, data, sample, delays, out } => {
            let source = match (&data, sample, &delays) {
                (Some(d), Some(id), None) => DelaySource::Sample { data: d, id },
                (None, _, Some(dir)) => DelaySource::Directory(dir),
                _ => return Err(CliError::Config("give either --data with --sample, or --delays".into())),
            };
            let s = commands::reconstruct_cmd(&cfg, &model, source, &out)?;
            println!(
                "{} on {}: {} iterations (converged: {}), objective {:.4e}",
                s.model_id, s.source, s.iterations, s.converged, s.l1_objective
            );
            if let Some(r) = s.rmse_c {
                println!("  rmse_c {r:.3} m/s");
            }
            Ok(())
        }
        Command::Evaluate { data, models, split, out } | Command::Compare { data, models, split, out } => {
            let s = commands::evaluate(&cfg, &data, &models, split.into(), &out)?;
            for r in &s.reports {
                println!(
                    "{}: median rmse_t {:.3e} s, rmse_c {:.3} m/s, dSoS {:.3} m/s ({} samples)",
                    r.model_id, r.median_rmse_t, r.median_rmse_c, r.median_delta_sos, r.n_samples
                );
            }
            for i in &s.improvements {
                println!(
                    "  {} vs {} on {}: {:+.1}% (p = {:.3e})",
                    i.model_id,
                    i.baseline_id,
                    i.metric.name(),
                    i.percent,
                    i.wilcoxon.p_value
                );
            }
            Ok(())
        }
        Command::Info { path } => {
            println!("{}", commands::info(&path)?);
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
