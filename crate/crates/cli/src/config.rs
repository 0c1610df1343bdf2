//! Flat `section.key = value` run configuration.
//!
//! Resolution order: built-in defaults, then the preset, then the config
//! file, then command-line overrides. The resolved config is written to every
//! run directory as `config.txt` and can be fed back with `--config`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dbc_core::data::SyntheticSpec;
use dbc_core::dbc::DbcConfig;
use dbc_core::fcae::FcaeTrainConfig;
use dbc_core::tensor::Mode;

/// How stage two gets its encoder when no checkpoint is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Train the FCAE for `fcae.epochs` inside the run.
    Trained,
    /// Train it for half of `fcae.epochs`.
    HalfTrained,
    /// Skip stage one and start from the random initialization.
    Random,
}

impl Init {
    pub const ALL: [Init; 3] = [Init::Trained, Init::HalfTrained, Init::Random];

    pub fn name(self) -> &'static str {
        match self {
            Init::Trained => "trained",
            Init::HalfTrained => "half-trained",
            Init::Random => "random",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|i| i.name() == s).with_context(|| format!("unknown init '{s}' (trained, half-trained, random)"))
    }
}

/// Which DBC hyperparameter an ablation run sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    Alpha,
    Norm,
    Init,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Alpha => "alpha",
            Ablation::Norm => "norm",
            Ablation::Init => "init",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        [Ablation::None, Ablation::Alpha, Ablation::Norm, Ablation::Init]
            .into_iter()
            .find(|a| a.name() == s)
            .with_context(|| format!("unknown ablation '{s}' (none, alpha, norm, init)"))
    }
}

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Synthetic,
    /// IDX image file with an optional IDX label file.
    Idx { images: PathBuf, labels: Option<PathBuf> },
    /// Directory with the four standard MNIST IDX files.
    Mnist { dir: PathBuf, train: bool, test: bool },
}

impl Source {
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        let path = |what: &str| -> Result<PathBuf> {
            if rest.is_empty() {
                bail!("dataset source '{text}' needs a {what} path after '{kind}:'");
            }
            Ok(PathBuf::from(rest))
        };
        Ok(match kind {
            "synthetic" if rest.is_empty() => Source::Synthetic,
            "idx" => {
                let (images, labels) = match rest.split_once(':') {
                    Some((i, l)) => (PathBuf::from(i), Some(PathBuf::from(l))),
                    None => (path("image file")?, None),
                };
                Source::Idx { images, labels }
            }
            "mnist" => Source::Mnist { dir: path("directory")?, train: true, test: true },
            "mnist-train" => Source::Mnist { dir: path("directory")?, train: true, test: false },
            "mnist-test" => Source::Mnist { dir: path("directory")?, train: false, test: true },
            _ => bail!("unknown dataset source '{text}' (synthetic, idx:<images>[:<labels>], mnist:<dir>, mnist-train:<dir>, mnist-test:<dir>)"),
        })
    }

    /// Files that must exist before a run starts.
    pub fn required_paths(&self) -> Vec<PathBuf> {
        match self {
            Source::Synthetic => vec![],
            Source::Idx { images, labels } => std::iter::once(images.clone()).chain(labels.clone()).collect(),
            Source::Mnist { dir, train, test } => {
                let mut out = Vec::new();
                if *train {
                    out.push(dir.join("train-images-idx3-ubyte"));
                    out.push(dir.join("train-labels-idx1-ubyte"));
                }
                if *test {
                    out.push(dir.join("t10k-images-idx3-ubyte"));
                    out.push(dir.join("t10k-labels-idx1-ubyte"));
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Number of clusters; 0 takes the class count of the dataset.
    pub k: usize,
    pub source: String,
    /// Keep only the first `limit` samples; 0 keeps all.
    pub limit: usize,
    pub synthetic: SyntheticSpec,
    pub network: String,
    /// Explicit layer list overriding the network preset.
    pub layers: String,
    pub fcae: FcaeTrainConfig,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub dbc: DbcConfig,
    pub init: Init,
    /// FCAE checkpoint to start from; overrides `init` when set.
    pub checkpoint: String,
    /// Cluster raw pixels instead of encoder features.
    pub raw: bool,
    pub ablation: Ablation,
    pub ablation_alphas: Vec<f64>,
    pub chain_alpha: f64,
    pub chain_rows: Vec<Vec<f64>>,
    pub chain_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "synthetic".into(),
            seed: 0,
            deterministic: false,
            k: 0,
            source: "synthetic".into(),
            limit: 0,
            synthetic: SyntheticSpec::default(),
            network: "usps".into(),
            layers: String::new(),
            fcae: FcaeTrainConfig::default(),
            kmeans_restarts: 20,
            kmeans_max_iters: 300,
            kmeans_tol: 1e-6,
            dbc: DbcConfig::default(),
            init: Init::Trained,
            checkpoint: String::new(),
            raw: false,
            ablation: Ablation::None,
            ablation_alphas: vec![1.5, 2.0, 4.0],
            chain_alpha: 2.0,
            chain_rows: vec![vec![0.6, 0.4]],
            chain_steps: 30,
        }
    }
}

/// Settings applied by each named preset on top of the defaults.
pub fn preset_pairs(name: &str) -> Result<Vec<(&'static str, &'static str)>> {
    let ablation_base = [("network.preset", "usps"), ("dataset.source", "synthetic"), ("dbc.init", "half-trained")];
    Ok(match name {
        "synthetic" => vec![("dataset.source", "synthetic"), ("network.preset", "usps")],
        "mnist" => vec![("dataset.source", "mnist:data/mnist"), ("network.preset", "mnist")],
        "mnist-test" => vec![("dataset.source", "mnist-test:data/mnist"), ("network.preset", "mnist")],
        "usps" => vec![("dataset.source", "idx:data/usps/usps-images-idx3-ubyte:data/usps/usps-labels-idx1-ubyte"), ("network.preset", "usps")],
        "coil20" => vec![("dataset.source", "idx:data/coil20/coil20-images-idx3-ubyte:data/coil20/coil20-labels-idx1-ubyte"), ("network.preset", "coil20")],
        "ablation-alpha" => [&ablation_base[..], &[("ablation", "alpha")]].concat(),
        "ablation-norm" => [&ablation_base[..], &[("ablation", "norm")]].concat(),
        "ablation-init" => vec![("network.preset", "usps"), ("dataset.source", "synthetic"), ("ablation", "init")],
        other => bail!(
            "unknown preset '{other}' (synthetic, mnist, mnist-test, usps, coil20, ablation-alpha, ablation-norm, ablation-init)"
        ),
    })
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow::anyhow!("{key}: cannot parse '{value}'"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got '{value}'"),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

/// `a,b;c,d` → `[[a, b], [c, d]]`.
fn parse_rows(key: &str, value: &str) -> Result<Vec<Vec<f64>>> {
    value.split(';').map(|r| parse_list(key, r)).collect()
}

fn parse_pairs(key: &str, value: &str) -> Result<Vec<(f64, f64)>> {
    parse_rows(key, value)?
        .into_iter()
        .map(|r| match r[..] {
            [a, b] => Ok((a, b)),
            _ => bail!("{key}: expected 'row,col' pairs separated by ';'"),
        })
        .collect()
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn join_pairs(xs: &[(f64, f64)]) -> String {
    xs.iter().map(|(a, b)| format!("{a},{b}")).collect::<Vec<_>>().join(";")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => self.preset = v.to_string(),
            "seed" => self.seed = parse_num(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "checkpoint" => self.checkpoint = v.to_string(),
            "ablation" => self.ablation = Ablation::parse(v)?,
            "ablation.alphas" => self.ablation_alphas = parse_list(key, v)?,
            "dataset.source" => self.source = v.to_string(),
            "dataset.limit" => self.limit = parse_num(key, v)?,
            "synthetic.side" => self.synthetic.side = parse_num(key, v)?,
            "synthetic.per_cluster" => self.synthetic.per_cluster = parse_num(key, v)?,
            "synthetic.centers" => self.synthetic.centers = parse_pairs(key, v)?,
            "synthetic.sigma" => self.synthetic.sigma = parse_pairs(key, v)?,
            "synthetic.jitter" => self.synthetic.jitter = parse_num(key, v)?,
            "synthetic.amp_spread" => self.synthetic.amp_spread = parse_num(key, v)?,
            "synthetic.noise" => self.synthetic.noise = parse_num(key, v)?,
            "synthetic.seed" => self.synthetic.seed = parse_num(key, v)?,
            "network.preset" => self.network = v.to_string(),
            "network.layers" => self.layers = v.to_string(),
            "fcae.epochs" => self.fcae.epochs = parse_num(key, v)?,
            "fcae.batch_size" => self.fcae.batch_size = parse_num(key, v)?,
            "fcae.lr" => self.fcae.lr = parse_num(key, v)?,
            "fcae.momentum" => self.fcae.momentum = parse_num(key, v)?,
            "kmeans.restarts" => self.kmeans_restarts = parse_num(key, v)?,
            "kmeans.max_iters" => self.kmeans_max_iters = parse_num(key, v)?,
            "kmeans.tol" => self.kmeans_tol = parse_num(key, v)?,
            "cluster.raw" => self.raw = parse_bool(key, v)?,
            "dbc.init" => self.init = Init::parse(v)?,
            "dbc.alpha" => self.dbc.alpha = parse_num(key, v)?,
            "dbc.v" => self.dbc.v = parse_num(key, v)?,
            "dbc.epochs" => self.dbc.epochs = parse_num(key, v)?,
            "dbc.iters_per_epoch" => {
                let n: usize = parse_num(key, v)?;
                self.dbc.iters_per_epoch = (n > 0).then_some(n);
            }
            "dbc.batch_size" => self.dbc.batch_size = parse_num(key, v)?,
            "dbc.lr" => self.dbc.lr = parse_num(key, v)?,
            "dbc.momentum" => self.dbc.momentum = parse_num(key, v)?,
            "dbc.norm" => self.dbc.norm = v.parse()?,
            "dbc.delta" => self.dbc.delta = parse_num(key, v)?,
            "dbc.bn_mode" => {
                self.dbc.bn_mode = match v {
                    "train" => Mode::Train,
                    "eval" => Mode::Eval,
                    _ => bail!("{key}: expected train or eval, got '{v}'"),
                }
            }
            "dbc.hist_cluster" => self.dbc.hist_cluster = parse_num(key, v)?,
            "dbc.hist_bins" => self.dbc.hist_bins = parse_num(key, v)?,
            "chain.alpha" => self.chain_alpha = parse_num(key, v)?,
            "chain.rows" => self.chain_rows = parse_rows(key, v)?,
            "chain.steps" => self.chain_steps = parse_num(key, v)?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synthetic;
        let d = &self.dbc;
        vec![
            ("preset", self.preset.clone()),
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("k", self.k.to_string()),
            ("checkpoint", self.checkpoint.clone()),
            ("ablation", self.ablation.name().into()),
            ("ablation.alphas", join(&self.ablation_alphas)),
            ("dataset.source", self.source.clone()),
            ("dataset.limit", self.limit.to_string()),
            ("synthetic.side", s.side.to_string()),
            ("synthetic.per_cluster", s.per_cluster.to_string()),
            ("synthetic.centers", join_pairs(&s.centers)),
            ("synthetic.sigma", join_pairs(&s.sigma)),
            ("synthetic.jitter", s.jitter.to_string()),
            ("synthetic.amp_spread", s.amp_spread.to_string()),
            ("synthetic.noise", s.noise.to_string()),
            ("synthetic.seed", s.seed.to_string()),
            ("network.preset", self.network.clone()),
            ("network.layers", self.layers.clone()),
            ("fcae.epochs", self.fcae.epochs.to_string()),
            ("fcae.batch_size", self.fcae.batch_size.to_string()),
            ("fcae.lr", self.fcae.lr.to_string()),
            ("fcae.momentum", self.fcae.momentum.to_string()),
            ("kmeans.restarts", self.kmeans_restarts.to_string()),
            ("kmeans.max_iters", self.kmeans_max_iters.to_string()),
            ("kmeans.tol", self.kmeans_tol.to_string()),
            ("cluster.raw", self.raw.to_string()),
            ("dbc.init", self.init.name().into()),
            ("dbc.alpha", d.alpha.to_string()),
            ("dbc.v", d.v.to_string()),
            ("dbc.epochs", d.epochs.to_string()),
            ("dbc.iters_per_epoch", d.iters_per_epoch.unwrap_or(0).to_string()),
            ("dbc.batch_size", d.batch_size.to_string()),
            ("dbc.lr", d.lr.to_string()),
            ("dbc.momentum", d.momentum.to_string()),
            ("dbc.norm", d.norm.to_string()),
            ("dbc.delta", d.delta.to_string()),
            ("dbc.bn_mode", if d.bn_mode == Mode::Train { "train" } else { "eval" }.into()),
            ("dbc.hist_cluster", d.hist_cluster.to_string()),
            ("dbc.hist_bins", d.hist_bins.to_string()),
            ("chain.alpha", self.chain_alpha.to_string()),
            ("chain.rows", self.chain_rows.iter().map(|r| join(r)).collect::<Vec<_>>().join(";")),
            ("chain.steps", self.chain_steps.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Builds the config from an optional preset, the text of an optional
    /// config file and a list of overrides, in that order of precedence
    /// (later wins). A `preset` key in the file is used when no preset is
    /// passed explicitly.
    pub fn resolve(preset: Option<&str>, file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let file_pairs = match file {
            Some(text) => parse_text(text)?,
            None => Vec::new(),
        };
        let preset = preset
            .map(str::to_string)
            .or_else(|| file_pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.clone()))
            .unwrap_or_else(|| "synthetic".into());
        let mut cfg = RunConfig::default();
        for (k, v) in preset_pairs(&preset)? {
            cfg.set(k, v)?;
        }
        for (k, v) in file_pairs.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.preset = preset;
        Ok(cfg)
    }

    pub fn load(preset: Option<&str>, path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading config file {}", p.display())))
            .transpose()?;
        Self::resolve(preset, text.as_deref(), overrides)
    }

    pub fn source(&self) -> Result<Source> {
        Source::parse(&self.source)
    }

    /// Checks the invariants that do not need the dataset: referenced files
    /// exist, alpha > 1 and the DBC settings are usable.
    pub fn validate(&self) -> Result<()> {
        for p in self.source()?.required_paths() {
            if !p.is_file() {
                bail!("dataset file {} does not exist", p.display());
            }
        }
        if !self.checkpoint.is_empty() && !Path::new(&self.checkpoint).is_file() {
            bail!("checkpoint {} does not exist", self.checkpoint);
        }
        if !(self.dbc.alpha > 1.0) {
            bail!("dbc.alpha must exceed 1, got {}", self.dbc.alpha);
        }
        if self.ablation == Ablation::Alpha && self.ablation_alphas.iter().any(|&a| !(a > 1.0)) {
            bail!("every ablation alpha must exceed 1");
        }
        if self.kmeans_restarts == 0 {
            bail!("kmeans.restarts must be at least 1");
        }
        // k is resolved against the dataset later; validate with a stand-in.
        DbcConfig { k: self.k.max(self.dbc.hist_cluster + 1), ..self.dbc.clone() }.validate()?;
        Ok(())
    }

    /// DBC settings with the run seed and the resolved cluster count.
    pub fn dbc_config(&self, k: usize) -> DbcConfig {
        DbcConfig { k, seed: self.seed, ..self.dbc.clone() }
    }

    pub fn fcae_config(&self) -> FcaeTrainConfig {
        FcaeTrainConfig { seed: self.seed, ..self.fcae.clone() }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').with_context(|| format!("config line {}: expected key = value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text.split_once('=').with_context(|| format!("override '{text}' is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let overrides = vec![("dbc.alpha".into(), "4".into()), ("synthetic.centers".into(), "4,4;11,11".into())];
        let mut cfg = RunConfig::resolve(Some("ablation-norm"), None, &overrides).unwrap();
        cfg.synthetic.sigma = vec![(1.0, 2.0), (2.0, 1.0)];
        let again = RunConfig::resolve(None, Some(&cfg.to_text()), &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.ablation, Ablation::Norm);
        assert_eq!(again.init, Init::HalfTrained);
    }

    #[test]
    fn later_sources_win() {
        let file = "preset = mnist\nfcae.epochs = 3 # short\n\ndbc.lr = 0.5\n";
        let cfg = RunConfig::resolve(None, Some(file), &[("dbc.lr".into(), "0.25".into())]).unwrap();
        assert_eq!(cfg.network, "mnist");
        assert_eq!(cfg.fcae.epochs, 3);
        assert_eq!(cfg.dbc.lr, 0.25);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::resolve(Some("nope"), None, &[]).is_err());
        assert!(RunConfig::resolve(None, Some("fcae.epochs"), &[]).is_err());
        assert!(RunConfig::resolve(None, Some("fcae.nothing = 1"), &[]).is_err());
        assert!(RunConfig::resolve(None, Some("dbc.norm = median"), &[]).is_err());
        let cfg = RunConfig::resolve(None, None, &[("dbc.alpha".into(), "1".into())]).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_sources() {
        assert_eq!(Source::parse("synthetic").unwrap(), Source::Synthetic);
        assert_eq!(
            Source::parse("idx:a.idx:b.idx").unwrap(),
            Source::Idx { images: "a.idx".into(), labels: Some("b.idx".into()) }
        );
        assert_eq!(Source::parse("mnist-test:/d").unwrap(), Source::Mnist { dir: "/d".into(), train: false, test: true });
        assert!(Source::parse("mnist").is_err());
        assert!(Source::parse("csv:x").is_err());
        let cfg = RunConfig::resolve(None, None, &[("dataset.source".into(), "mnist:/definitely/missing".into())]).unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));
    }
}
