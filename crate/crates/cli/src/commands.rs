//! The pipeline stages behind each subcommand.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dbc_core::boostchain::{chain_run, ChainState, Limit};
use dbc_core::data::{load_idx, load_mnist_dir, make_synthetic, parse_idx_images, parse_idx_labels, Dataset};
use dbc_core::dbc::{encode_all, train_dbc, DbcConfig, DbcReport, NormMode};
use dbc_core::fcae::{train_fcae, FcaeModel, NetworkSpec};
use dbc_core::metrics::{acc, fmt_metric, kmeans, nmi, KMeansConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, Init, RunConfig, Source};
use crate::run::{RunDir, CONFIG_SNAPSHOT};

/// Tolerance used to report when a chain row reaches its indicator limit.
const CHAIN_TOL: f64 = 1e-6;

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match cfg.source()? {
        Source::Synthetic => make_synthetic(&cfg.synthetic)?,
        Source::Idx { images, labels: Some(labels) } => load_idx(&images, &labels)?,
        Source::Idx { images, labels: None } => {
            if cfg.k == 0 {
                bail!("an unlabeled dataset needs an explicit k");
            }
            let bytes = std::fs::read(&images).with_context(|| format!("reading {}", images.display()))?;
            Dataset::new("idx", parse_idx_images(&bytes)?, None, cfg.k)?
        }
        Source::Mnist { dir, train, test } => load_mnist_dir(&dir, train, test)?,
    };
    let ds = if cfg.limit > 0 { ds.head(cfg.limit) } else { ds };
    if ds.is_empty() {
        bail!("dataset {} is empty", ds.name);
    }
    Ok(ds)
}

fn cluster_count(cfg: &RunConfig, ds: &Dataset) -> Result<usize> {
    let k = if cfg.k > 0 { cfg.k } else { ds.k };
    if k == 0 || k > ds.len() {
        bail!("cannot form k = {k} clusters from {} samples", ds.len());
    }
    Ok(k)
}

pub fn network_spec(cfg: &RunConfig, ds: &Dataset) -> Result<NetworkSpec> {
    let spec = if cfg.layers.is_empty() {
        NetworkSpec::preset(&cfg.network)?
    } else {
        NetworkSpec::parse("custom", ds.sample_shape(), &cfg.layers)?
    };
    check_input(&spec, ds)?;
    Ok(spec)
}

fn check_input(spec: &NetworkSpec, ds: &Dataset) -> Result<()> {
    if spec.input != ds.sample_shape() {
        bail!(
            "network {} expects {:?} inputs but dataset {} has {:?} samples",
            spec.name,
            spec.input,
            ds.name,
            ds.sample_shape()
        );
    }
    Ok(())
}

fn load_checkpoint(path: &str, ds: &Dataset) -> Result<FcaeModel<f32>> {
    let model = FcaeModel::load(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?;
    check_input(model.spec(), ds).context("checkpoint does not fit the dataset")?;
    Ok(model)
}

fn kmeans_config(cfg: &RunConfig, k: usize) -> KMeansConfig {
    KMeansConfig {
        restarts: cfg.kmeans_restarts,
        max_iters: cfg.kmeans_max_iters,
        tol: cfg.kmeans_tol,
        ..KMeansConfig::new(k, cfg.seed)
    }
}

fn opt_metric(x: Option<f64>) -> String {
    x.map(fmt_metric).unwrap_or_default()
}

fn scores(labels: &[usize], truth: Option<&[usize]>) -> Result<(Option<f64>, Option<f64>)> {
    match truth {
        Some(t) => Ok((Some(acc(labels, t)?), Some(nmi(labels, t)?))),
        None => Ok((None, None)),
    }
}

fn assignments_csv(labels: &[usize], truth: Option<&[usize]>) -> String {
    let mut out = String::from("index,cluster,truth\n");
    for (i, &l) in labels.iter().enumerate() {
        let t = truth.map(|t| t[i].to_string()).unwrap_or_default();
        let _ = writeln!(out, "{i},{l},{t}");
    }
    out
}

/// Validates, loads the dataset, and only then creates the run directory,
/// so a bad dataset path leaves nothing behind.
fn start(cfg: &RunConfig, out: &Path, needs_data: bool) -> Result<(RunDir, Option<Dataset>)> {
    cfg.validate()?;
    let ds = needs_data.then(|| load_dataset(cfg)).transpose()?;
    let dir = RunDir::create(out)?;
    dir.write(CONFIG_SNAPSHOT, cfg.to_text())?;
    Ok((dir, ds))
}

/// Stage one for `epochs` epochs from the seeded initialization; writes
/// `fcae.ckpt` and `fcae_loss.csv` into `dir`.
fn train_stage_one(cfg: &RunConfig, spec: NetworkSpec, ds: &Dataset, epochs: usize, dir: &RunDir) -> Result<FcaeModel<f32>> {
    let mut model = FcaeModel::new(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let fc = dbc_core::fcae::FcaeTrainConfig { epochs, ..cfg.fcae_config() };
    let mut csv = String::from("epoch,loss\n");
    let report = train_fcae(&mut model, &ds.images, &fc, |epoch, loss| {
        eprintln!("fcae epoch {epoch}/{epochs} loss {loss:.6}");
        let _ = writeln!(csv, "{epoch},{loss}");
    });
    // Keep the losses that were reached even if training blew up.
    dir.write("fcae_loss.csv", &csv)?;
    let report = report?;
    model.save(&dir.join("fcae.ckpt"))?;
    eprintln!("fcae trained in {:.1?}", report.wall_clock);
    Ok(model)
}

/// The encoder stage two starts from.
fn initial_model(cfg: &RunConfig, ds: &Dataset, init: Init, dir: &RunDir) -> Result<FcaeModel<f32>> {
    if !cfg.checkpoint.is_empty() {
        return load_checkpoint(&cfg.checkpoint, ds);
    }
    let spec = network_spec(cfg, ds)?;
    match init {
        Init::Trained => train_stage_one(cfg, spec, ds, cfg.fcae.epochs, dir),
        Init::HalfTrained => train_stage_one(cfg, spec, ds, cfg.fcae.epochs / 2, dir),
        Init::Random => {
            let model = FcaeModel::new(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
            model.save(&dir.join("fcae.ckpt"))?;
            Ok(model)
        }
    }
}

pub fn train_fcae_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (dir, ds) = start(cfg, out, true)?;
    let ds = ds.expect("loaded");
    let result = network_spec(cfg, &ds).and_then(|spec| train_stage_one(cfg, spec, &ds, cfg.fcae.epochs, &dir).map(|_| ()));
    dir.finish(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
}

/// k-means on raw pixels (`cluster.raw`) or on the features of a trained
/// encoder (`checkpoint`).
pub fn cluster_cmd(cfg: &RunConfig, out: &Path) -> Result<ClusterOutcome> {
    if !cfg.raw && cfg.checkpoint.is_empty() {
        bail!("cluster needs either --raw or --checkpoint <fcae.ckpt>");
    }
    let (dir, ds) = start(cfg, out, true)?;
    let ds = ds.expect("loaded");
    let result = (|| {
        let k = cluster_count(cfg, &ds)?;
        let (method, x) = if cfg.raw {
            ("raw-kmeans", ds.pixel_matrix())
        } else {
            let model = load_checkpoint(&cfg.checkpoint, &ds)?;
            let z = encode_all(&model, &ds.images)?;
            dir.write("features.csv", z.to_csv("z"))?;
            dir.write("features.bin", z.to_bin())?;
            ("fcae-kmeans", z)
        };
        let km = kmeans(&x, &kmeans_config(cfg, k))?;
        let truth = ds.labels.as_deref();
        let (a, n) = scores(&km.labels, truth)?;
        dir.write("centers.csv", km.centers.to_csv("c"))?;
        dir.write("assignments.csv", assignments_csv(&km.labels, truth))?;
        dir.write("metrics.csv", format!("method,k,ACC,NMI\n{method},{k},{},{}\n", opt_metric(a), opt_metric(n)))?;
        println!("{method} k={k} ACC {} NMI {} (restart {}, {} iterations)", opt_metric(a), opt_metric(n), km.restart, km.history.len());
        Ok(ClusterOutcome { acc: a, nmi: n })
    })();
    dir.finish(result)
}

/// k-means initialization plus stage two, with every artifact of one DBC run
/// written into `dir`.
fn run_dbc(cfg: &RunConfig, mut model: FcaeModel<f32>, ds: &Dataset, dc: &DbcConfig, dir: &RunDir) -> Result<DbcReport> {
    let z = encode_all(&model, &ds.images)?;
    let km = kmeans(&z, &kmeans_config(cfg, dc.k))?;
    let truth = ds.labels.as_deref();
    let mut csv = String::from("epoch,kl_loss,ACC,NMI,changed\n");
    let mut hist_err = Ok(());
    let report = train_dbc(&mut model, &ds.images, km.centers, truth, dc, |rec| {
        let changed = rec.changed.map(|c| format!("{c:.6}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{changed}", rec.epoch, rec.kl_loss, opt_metric(rec.acc), opt_metric(rec.nmi));
        eprintln!(
            "dbc epoch {} kl {:.6} ACC {} NMI {} changed {}",
            rec.epoch,
            rec.kl_loss,
            opt_metric(rec.acc),
            opt_metric(rec.nmi),
            if changed.is_empty() { "-" } else { &changed }
        );
        if hist_err.is_ok() {
            hist_err = dir.write(&format!("hist_epoch_{}.csv", rec.epoch), rec.histogram.to_csv());
        }
    });
    dir.write("metrics.csv", &csv)?;
    hist_err?;
    let report = report?;
    model.save(&dir.join("dbc.ckpt"))?;
    dir.write("centers.csv", report.centers.to_csv("c"))?;
    dir.write("centers.bin", report.centers.to_bin())?;
    dir.write("assignments.csv", assignments_csv(&report.labels, truth))?;
    let last = report.records.last().expect("epoch 0 is always recorded");
    println!(
        "dbc {}: epoch {} ACC {} NMI {} converged {} ({:.1?})",
        dir.path().display(),
        last.epoch,
        opt_metric(last.acc),
        opt_metric(last.nmi),
        report.converged,
        report.wall_clock
    );
    Ok(report)
}

fn summary_line(variant: &str, report: &DbcReport) -> String {
    let last = report.records.last().expect("epoch 0 is always recorded");
    let reach = report.records.iter().find(|r| r.acc.is_some_and(|a| a >= 0.9)).map(|r| r.epoch.to_string()).unwrap_or_default();
    format!("{variant},{},{},{},{reach}\n", last.epoch, opt_metric(last.acc), opt_metric(last.nmi))
}

/// Stage two, or a sweep of stage-two runs for the ablation presets. Each
/// ablation variant gets its own sub-directory and a line in `summary.csv`.
pub fn train_dbc_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (dir, ds) = start(cfg, out, true)?;
    let ds = ds.expect("loaded");
    let result = (|| {
        let k = cluster_count(cfg, &ds)?;
        let base = cfg.dbc_config(k);
        base.validate()?;
        let mut summary = String::from("variant,epochs,final_ACC,final_NMI,first_epoch_acc_0.9\n");
        match cfg.ablation {
            Ablation::None => {
                let model = initial_model(cfg, &ds, cfg.init, &dir)?;
                run_dbc(cfg, model, &ds, &base, &dir)?;
                return Ok(());
            }
            Ablation::Alpha => {
                let model = initial_model(cfg, &ds, cfg.init, &dir)?;
                for &alpha in &cfg.ablation_alphas {
                    let name = format!("alpha-{alpha}");
                    let report = run_dbc(cfg, model.clone(), &ds, &DbcConfig { alpha, ..base.clone() }, &dir.subdir(&name)?)?;
                    summary.push_str(&summary_line(&name, &report));
                }
            }
            Ablation::Norm => {
                let model = initial_model(cfg, &ds, cfg.init, &dir)?;
                for norm in NormMode::ALL {
                    let name = format!("norm-{norm}");
                    let report = run_dbc(cfg, model.clone(), &ds, &DbcConfig { norm, ..base.clone() }, &dir.subdir(&name)?)?;
                    summary.push_str(&summary_line(&name, &report));
                }
            }
            Ablation::Init => {
                for init in Init::ALL {
                    let name = format!("init-{}", init.name());
                    let sub = dir.subdir(&name)?;
                    let model = initial_model(cfg, &ds, init, &sub)?;
                    let report = run_dbc(cfg, model, &ds, &base, &sub)?;
                    summary.push_str(&summary_line(&name, &report));
                }
            }
        }
        dir.write("summary.csv", &summary)?;
        print!("{summary}");
        Ok(())
    })();
    dir.finish(result)
}

pub fn simulate_chain_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let state = ChainState::new(&cfg.chain_rows, cfg.chain_alpha)?;
    let (dir, _) = start(cfg, out, false)?;
    let result = (|| {
        let run = chain_run(&state, cfg.chain_steps, CHAIN_TOL)?;
        dir.write("chain.csv", run.to_csv())?;
        let mut limits = String::from("row,limit,index,steps\n");
        for (i, l) in run.limits.iter().enumerate() {
            let line = match *l {
                Limit::Uniform => format!("{i},uniform,,"),
                Limit::Indicator { index, steps } => format!("{i},indicator,{index},{}", steps.map(|s| s.to_string()).unwrap_or_default()),
                Limit::TiedMaxima { indices_len } => format!("{i},tied,{indices_len},"),
            };
            limits.push_str(&line);
            limits.push('\n');
        }
        dir.write("limits.csv", &limits)?;
        print!("{limits}");
        if run.clamped {
            println!("note: entries below exp(-700) were clamped to 0");
        }
        Ok(())
    })();
    dir.finish(result)
}

/// ACC and NMI of a stored `assignments.csv`, against its `truth` column or
/// an IDX label file.
pub fn eval_cmd(assignments: &Path, labels: Option<&Path>) -> Result<(f64, f64)> {
    let text = std::fs::read_to_string(assignments).with_context(|| format!("reading {}", assignments.display()))?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (i, line) in text.lines().skip(1).filter(|l| !l.trim().is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let field = |j: usize| cells.get(j).map(|c| c.trim()).unwrap_or("");
        pred.push(field(1).parse::<usize>().with_context(|| format!("row {}: bad cluster '{}'", i + 1, field(1)))?);
        if labels.is_none() {
            truth.push(field(2).parse::<usize>().with_context(|| format!("row {}: missing truth label", i + 1))?);
        }
    }
    if let Some(p) = labels {
        truth = parse_idx_labels(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?;
    }
    let (a, n) = (acc(&pred, &truth)?, nmi(&pred, &truth)?);
    println!("ACC {}\nNMI {}", fmt_metric(a), fmt_metric(n));
    Ok((a, n))
}

