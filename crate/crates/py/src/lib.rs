//! Python bindings. Matrices cross the boundary as lists of rows; images stay
//! on the Rust side inside `Dataset`.

use std::path::PathBuf;

use dbc_core::boostchain::{chain_run, ChainState, Limit};
use dbc_core::data::{load_idx, load_mnist_dir, make_synthetic, SyntheticSpec};
use dbc_core::dbc::{self, encode_all, train_dbc, DbcConfig, NormMode};
use dbc_core::fcae::{train_fcae, FcaeModel, FcaeTrainConfig, NetworkSpec};
use dbc_core::metrics::{self, kmeans, KMeansConfig};
use dbc_core::{Error, Matrix};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Training(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix<f64>> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn rows<T: dbc_core::Real>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.iter().map(|x| x.to_f64().unwrap()).collect()).collect()
}

fn norm_mode(name: &str) -> PyResult<NormMode> {
    name.parse().map_err(py_err)
}

/// Images, optional labels and the number of categories.
#[pyclass(module = "dbc_py", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: dbc_core::data::Dataset,
}

#[pymethods]
impl Dataset {
    /// The four-blob synthetic image set (16x16, `per_cluster` per blob).
    #[staticmethod]
    #[pyo3(signature = (per_cluster = 500, seed = 7))]
    fn synthetic(per_cluster: usize, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec { per_cluster, seed, ..SyntheticSpec::default() };
        Ok(Self { inner: make_synthetic(&spec).map_err(py_err)? })
    }

    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_idx(&images, &labels).map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (dir, train = true, test = true))]
    fn load_mnist(dir: PathBuf, train: bool, test: bool) -> PyResult<Self> {
        Ok(Self { inner: load_mnist_dir(&dir, train, test).map_err(py_err)? })
    }

    fn head(&self, n: usize) -> Self {
        Self { inner: self.inner.head(n) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    /// `(channels, height, width)` of one sample.
    #[getter]
    fn sample_shape(&self) -> (usize, usize, usize) {
        self.inner.sample_shape()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels.clone()
    }

    /// One flattened row of pixels per sample.
    fn pixels(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.pixel_matrix())
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.inner.sample_shape();
        format!("Dataset({:?}, n={}, shape=({c}, {h}, {w}), k={})", self.inner.name, self.inner.len(), self.inner.k)
    }
}

/// A fully convolutional auto-encoder.
#[pyclass(module = "dbc_py", skip_from_py_object)]
#[derive(Clone)]
struct Fcae {
    inner: FcaeModel<f32>,
}

#[pymethods]
impl Fcae {
    /// A He-initialized network: a preset name (`mnist`, `usps`, `coil`,
    /// `coil100`) or, with `layers`, a custom encoder such as
    /// `"conv5x32,pool,conv5x64"` for inputs of `input_shape`.
    #[new]
    #[pyo3(signature = (network = "usps", seed = 0, layers = None, input_shape = None))]
    fn new(network: &str, seed: u64, layers: Option<&str>, input_shape: Option<(usize, usize, usize)>) -> PyResult<Self> {
        let spec = match (layers, input_shape) {
            (Some(l), Some(shape)) => NetworkSpec::parse(network, shape, l),
            (None, None) => NetworkSpec::preset(network),
            _ => return Err(PyValueError::new_err("layers and input_shape go together")),
        }
        .map_err(py_err)?;
        Ok(Self { inner: FcaeModel::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: FcaeModel::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn describe(&self) -> String {
        self.inner.spec().describe()
    }

    /// Stage-one training on the reconstruction loss; returns the mean loss
    /// of every epoch.
    #[pyo3(signature = (data, epochs = 50, batch_size = 256, lr = 0.001, momentum = 0.9, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(&mut self, py: Python<'_>, data: &Dataset, epochs: usize, batch_size: usize, lr: f64, momentum: f64, seed: u64) -> PyResult<Vec<f64>> {
        let config = FcaeTrainConfig { epochs, batch_size, lr, momentum, seed };
        let model = &mut self.inner;
        let images = &data.inner.images;
        let report = py.detach(|| train_fcae(model, images, &config, |_, _| {})).map_err(py_err)?;
        Ok(report.epoch_losses)
    }

    /// Eval-mode features, one row per sample.
    fn encode(&self, py: Python<'_>, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let (model, images) = (&self.inner, &data.inner.images);
        let z = py.detach(|| encode_all(model, images)).map_err(py_err)?;
        Ok(rows(&z))
    }

    /// Mean per-sample reconstruction loss in eval mode.
    fn reconstruction_loss(&self, data: &Dataset) -> PyResult<f64> {
        self.inner.reconstruction_loss(&data.inner.images, dbc_core::tensor::Mode::Eval).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Fcae({})", self.inner.spec().describe())
    }
}

#[pyclass(module = "dbc_py", get_all)]
struct KMeans {
    labels: Vec<usize>,
    centers: Vec<Vec<f64>>,
    inertia: f64,
    restart: usize,
}

/// Seeded k-means++ with Lloyd refinement; the best of `restarts` runs.
#[pyfunction]
#[pyo3(name = "kmeans", signature = (x, k, seed = 0, restarts = 20, max_iters = 300, tol = 1e-6))]
fn py_kmeans(py: Python<'_>, x: Vec<Vec<f64>>, k: usize, seed: u64, restarts: usize, max_iters: usize, tol: f64) -> PyResult<KMeans> {
    let x = matrix(x)?;
    let config = KMeansConfig { k, restarts, max_iters, tol, seed };
    let r = py.detach(|| kmeans(&x, &config)).map_err(py_err)?;
    Ok(KMeans { centers: rows(&r.centers), labels: r.labels, inertia: r.inertia, restart: r.restart })
}

/// Clustering accuracy under the best one-to-one relabeling.
#[pyfunction]
fn acc(pred: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    metrics::acc(&pred, &truth).map_err(py_err)
}

/// Mutual information over the larger of the two entropies.
#[pyfunction]
fn nmi(pred: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    metrics::nmi(&pred, &truth).map_err(py_err)
}

/// Student-t scores of every feature row against every center.
#[pyfunction]
#[pyo3(signature = (z, centers, v = 1.0))]
fn soft_assign(z: Vec<Vec<f64>>, centers: Vec<Vec<f64>>, v: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&dbc::soft_assign(&matrix(z)?, &matrix(centers)?, v).map_err(py_err)?))
}

/// Boosted target `r_ij ∝ s_ij^alpha / N_j`; `norm` is `constant`,
/// `score-sum` or `boosted-sum`.
#[pyfunction]
#[pyo3(signature = (s, alpha = 2.0, norm = "boosted-sum"))]
fn boost_target(s: Vec<Vec<f64>>, alpha: f64, norm: &str) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&dbc::boost_target(&matrix(s)?, alpha, norm_mode(norm)?).map_err(py_err)?))
}

/// `sum_i KL(r_i || s_i)` over the rows.
#[pyfunction]
fn kl_loss(r: Vec<Vec<f64>>, s: Vec<Vec<f64>>) -> PyResult<f64> {
    dbc::kl_loss(&matrix(r)?, &matrix(s)?).map_err(py_err)
}

/// Analytic gradients of the KL loss: `(d/dz, d/dcenters)`.
#[pyfunction]
#[pyo3(signature = (z, centers, r, v = 1.0))]
fn kl_gradients(z: Vec<Vec<f64>>, centers: Vec<Vec<f64>>, r: Vec<Vec<f64>>, v: f64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (z, mu, r) = (matrix(z)?, matrix(centers)?, matrix(r)?);
    let s = dbc::soft_assign(&z, &mu, v).map_err(py_err)?;
    let gz = dbc::grad_features(&z, &mu, &s, &r, v).map_err(py_err)?;
    let gm = dbc::grad_centers(&z, &mu, &s, &r, v).map_err(py_err)?;
    Ok((rows(&gz), rows(&gm)))
}

/// Trajectory of the idealized boosting chain: one list of rows per step,
/// plus a description of each row's limit.
#[pyfunction]
#[pyo3(signature = (rows0, alpha = 2.0, steps = 30, tol = 1e-6))]
fn boosting_chain(rows0: Vec<Vec<f64>>, alpha: f64, steps: usize, tol: f64) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<String>)> {
    let run = chain_run(&ChainState::new(&rows0, alpha).map_err(py_err)?, steps, tol).map_err(py_err)?;
    let limits = run
        .limits
        .iter()
        .map(|l| match l {
            Limit::Uniform => "uniform".to_string(),
            Limit::Indicator { index, .. } => format!("indicator:{index}"),
            Limit::TiedMaxima { indices_len } => format!("tied:{indices_len}"),
        })
        .collect();
    Ok((run.trajectory.iter().map(|s| s.rows()).collect(), limits))
}

#[pyclass(module = "dbc_py", get_all)]
struct DbcResult {
    labels: Vec<usize>,
    centers: Vec<Vec<f64>>,
    /// Per-epoch `(kl_loss, acc, nmi)`; epoch 0 is the k-means start.
    history: Vec<(f64, Option<f64>, Option<f64>)>,
    converged: bool,
}

/// Stage two: k-means on the encoder features, then joint refinement of the
/// encoder and the centers. Updates `model` in place.
#[pyfunction]
#[pyo3(name = "train_dbc", signature = (
    model, data, k = None, alpha = 2.0, norm = "boosted-sum", epochs = 50, batch_size = 256, lr = 0.1, delta = 0.001, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn py_train_dbc(
    py: Python<'_>,
    model: &mut Fcae,
    data: &Dataset,
    k: Option<usize>,
    alpha: f64,
    norm: &str,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    delta: f64,
    seed: u64,
) -> PyResult<DbcResult> {
    let config = DbcConfig {
        alpha,
        k: k.unwrap_or(data.inner.k),
        epochs,
        batch_size,
        lr,
        delta,
        norm: norm_mode(norm)?,
        seed,
        ..DbcConfig::default()
    };
    let (fcae, ds) = (&mut model.inner, &data.inner);
    let report = py
        .detach(|| {
            let z = encode_all(fcae, &ds.images)?;
            let km = kmeans(&z, &KMeansConfig::new(config.k, seed))?;
            train_dbc(fcae, &ds.images, km.centers, ds.labels.as_deref(), &config, |_| {})
        })
        .map_err(py_err)?;
    Ok(DbcResult {
        labels: report.labels,
        centers: rows(&report.centers),
        history: report.records.iter().map(|r| (r.kl_loss, r.acc, r.nmi)).collect(),
        converged: report.converged,
    })
}

#[pymodule]
fn dbc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Fcae>()?;
    m.add_class::<KMeans>()?;
    m.add_class::<DbcResult>()?;
    m.add_function(wrap_pyfunction!(py_kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(acc, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(soft_assign, m)?)?;
    m.add_function(wrap_pyfunction!(boost_target, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(boosting_chain, m)?)?;
    m.add_function(wrap_pyfunction!(py_train_dbc, m)?)?;
    Ok(())
}
