use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dbc_cli::commands::{cluster_cmd, eval_cmd, simulate_chain_cmd, train_dbc_cmd, train_fcae_cmd};
use dbc_cli::config::{parse_override, RunConfig};

#[derive(Parser)]
#[command(name = "dbc", version, about = "Fully convolutional auto-encoders and discriminatively boosted clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value config file (e.g. a previous run's config.txt).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run on a single worker thread.
    #[arg(long)]
    deterministic: bool,
    /// Run directory (default: runs/<command>-<preset>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// synthetic | idx:<images>[:<labels>] | mnist:<dir> | mnist-train:<dir> | mnist-test:<dir>
    #[arg(long)]
    dataset: Option<String>,
    /// Extra `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the auto-encoder (stage one).
    TrainFcae {
        #[command(flatten)]
        common: Common,
    },
    /// k-means on raw pixels or on encoder features.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "checkpoint")]
        raw: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Joint encoder and center training (stage two).
    TrainDbc {
        #[command(flatten)]
        common: Common,
        /// Start from this FCAE checkpoint instead of training one.
        #[arg(long, conflicts_with_all = ["random_init", "half_trained"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "half_trained")]
        random_init: bool,
        #[arg(long)]
        half_trained: bool,
        #[arg(long)]
        alpha: Option<f64>,
        /// constant | score-sum | boosted-sum
        #[arg(long)]
        norm_mode: Option<String>,
    },
    /// Iterate the idealized boosting chain S -> S^alpha / row sum.
    SimulateChain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        /// Rows separated by ';', entries by ',' (e.g. "0.6,0.4;0.5,0.5").
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// ACC and NMI of a stored assignments.csv.
    Eval {
        assignments: PathBuf,
        /// IDX label file to score against instead of the truth column.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

fn resolve(name: &str, common: &Common, extra: Vec<(&str, String)>) -> Result<Option<(RunConfig, PathBuf)>> {
    let mut overrides = Vec::new();
    if let Some(s) = common.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    if common.deterministic {
        overrides.push(("deterministic".into(), "true".into()));
    }
    if let Some(d) = &common.dataset {
        overrides.push(("dataset.source".into(), d.clone()));
    }
    overrides.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    for s in &common.set {
        overrides.push(parse_override(s)?);
    }
    let cfg = RunConfig::load(common.preset.as_deref(), common.config.as_deref(), &overrides)?;
    if common.print_config {
        print!("{}", cfg.to_text());
        return Ok(None);
    }
    let out = common.out.clone().unwrap_or_else(|| Path::new("runs").join(format!("{name}-{}-seed{}", cfg.preset, cfg.seed)));
    Ok(Some((cfg, out)))
}

/// `DBC_NUM_THREADS` caps the worker pool; deterministic runs use one thread.
fn configure_threads(cfg: &RunConfig) -> Result<()> {
    let threads = if cfg.deterministic {
        Some(1)
    } else {
        match std::env::var("DBC_NUM_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().with_context(|| format!("DBC_NUM_THREADS='{v}' is not a count"))?.max(1)),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    Ok(())
}

fn path_value(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn run(cli: Cli) -> Result<()> {
    let (name, common, extra) = match &cli.command {
        Command::TrainFcae { common } => ("train-fcae", common, vec![]),
        Command::Cluster { common, raw, checkpoint } => {
            let mut extra = vec![];
            if *raw {
                extra.push(("cluster.raw", "true".to_string()));
            }
            if let Some(c) = checkpoint {
                extra.push(("checkpoint", path_value(c)));
                extra.push(("cluster.raw", "false".to_string()));
            }
            ("cluster", common, extra)
        }
        Command::TrainDbc { common, checkpoint, random_init, half_trained, alpha, norm_mode } => {
            let mut extra = vec![];
            if let Some(c) = checkpoint {
                extra.push(("checkpoint", path_value(c)));
            }
            if *random_init {
                extra.push(("dbc.init", "random".to_string()));
            }
            if *half_trained {
                extra.push(("dbc.init", "half-trained".to_string()));
            }
            if let Some(a) = alpha {
                extra.push(("dbc.alpha", a.to_string()));
            }
            if let Some(n) = norm_mode {
                extra.push(("dbc.norm", n.clone()));
            }
            ("train-dbc", common, extra)
        }
        Command::SimulateChain { common, alpha, rows, steps } => {
            let mut extra = vec![];
            if let Some(a) = alpha {
                extra.push(("chain.alpha", a.to_string()));
            }
            if let Some(r) = rows {
                extra.push(("chain.rows", r.clone()));
            }
            if let Some(s) = steps {
                extra.push(("chain.steps", s.to_string()));
            }
            ("simulate-chain", common, extra)
        }
        Command::Eval { assignments, labels } => {
            eval_cmd(assignments, labels.as_deref())?;
            return Ok(());
        }
    };
    let Some((cfg, out)) = resolve(name, common, extra)? else {
        return Ok(());
    };
    configure_threads(&cfg)?;
    match cli.command {
        Command::TrainFcae { .. } => train_fcae_cmd(&cfg, &out)?,
        Command::Cluster { .. } => {
            cluster_cmd(&cfg, &out)?;
        }
        Command::TrainDbc { .. } => train_dbc_cmd(&cfg, &out)?,
        Command::SimulateChain { .. } => simulate_chain_cmd(&cfg, &out)?,
        Command::Eval { .. } => unreachable!("handled above"),
    }
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
