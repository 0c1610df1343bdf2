use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::{boost_target, changed_fraction, grad_centers, grad_features, hard_assign, kl_loss, soft_assign, NormMode};
use crate::data::batches;
use crate::error::{config_err, Error, Result};
use crate::fcae::FcaeModel;
use crate::matrix::Matrix;
use crate::metrics::{acc, nmi, score_histogram, Histogram};
use crate::tensor::{Mode, Sgd, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct DbcConfig {
    pub alpha: f64,
    /// Degrees of freedom of the Student-t kernel.
    pub v: f64,
    pub k: usize,
    /// Maximum number of epochs `T`.
    pub epochs: usize,
    /// Mini-batch updates per epoch `B`; `None` means `ceil(m / batch_size)`.
    pub iters_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub norm: NormMode,
    /// Stop once at most this fraction of hard labels changed in an epoch.
    pub delta: f64,
    /// Batch-norm behavior during the mini-batch updates.
    pub bn_mode: Mode,
    /// Cluster whose score histogram is recorded each epoch.
    pub hist_cluster: usize,
    pub hist_bins: usize,
    pub seed: u64,
}

impl Default for DbcConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            v: 1.0,
            k: 10,
            epochs: 50,
            iters_per_epoch: None,
            batch_size: 256,
            lr: 0.1,
            momentum: 0.9,
            norm: NormMode::BoostedSum,
            delta: 0.001,
            bn_mode: Mode::Train,
            hist_cluster: 0,
            hist_bins: 10,
            seed: 0,
        }
    }
}

impl DbcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return config_err(format!("boosting factor alpha must exceed 1, got {}", self.alpha));
        }
        if !(self.v > 0.0) {
            return config_err(format!("degrees of freedom v must be positive, got {}", self.v));
        }
        if self.k == 0 {
            return config_err("cluster count k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return config_err(format!("stop threshold delta must lie in [0, 1], got {}", self.delta));
        }
        if self.batch_size < 2 {
            return config_err("DBC mini-batch size must be at least 2");
        }
        if self.hist_cluster >= self.k {
            return config_err(format!("histogram cluster {} out of range for k = {}", self.hist_cluster, self.k));
        }
        Ok(())
    }
}

/// State after one epoch (epoch 0 is the initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-sample KL divergence between the epoch's frozen target and the
    /// scores after its updates (for epoch 0: the first target against the
    /// initial scores).
    pub kl_loss: f64,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    /// Fraction of hard labels that changed during the epoch.
    pub changed: Option<f64>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbcReport {
    pub records: Vec<EpochRecord>,
    pub centers: Matrix<f32>,
    pub labels: Vec<usize>,
    /// Scores of the final model over the whole dataset.
    pub scores: Matrix<f32>,
    pub converged: bool,
    pub wall_clock: Duration,
}

/// Rows per eval-mode encoding chunk.
const ENCODE_CHUNK: usize = 256;

/// Eval-mode features of every sample. Chunks are independent, so the result
/// does not depend on how they are scheduled.
pub fn encode_all(model: &FcaeModel<f32>, images: &Tensor4<f32>) -> Result<Matrix<f32>> {
    let n = images.shape().n;
    let d = model.feature_dim();
    let starts: Vec<usize> = (0..n).step_by(ENCODE_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| model.encode(&images.slice_batch(s, (s + ENCODE_CHUNK).min(n))))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * d);
    for p in parts {
        data.extend(p.into_vec());
    }
    Matrix::from_vec(n, d, data)
}

struct Snapshot {
    s: Matrix<f32>,
    labels: Vec<usize>,
}

fn snapshot(model: &FcaeModel<f32>, images: &Tensor4<f32>, centers: &Matrix<f32>, v: f64) -> Result<Snapshot> {
    let z = encode_all(model, images)?;
    if !z.all_finite() {
        return Err(Error::Training("encoder produced non-finite features".into()));
    }
    let s = soft_assign(&z, centers, v)?;
    let labels = hard_assign(&s);
    Ok(Snapshot { s, labels })
}

fn record(
    epoch: usize,
    snap: &Snapshot,
    target: &Matrix<f32>,
    truth: Option<&[usize]>,
    changed: Option<f64>,
    config: &DbcConfig,
) -> Result<EpochRecord> {
    let m = snap.s.rows().max(1) as f64;
    Ok(EpochRecord {
        epoch,
        kl_loss: kl_loss(target, &snap.s)? / m,
        acc: truth.map(|t| acc(&snap.labels, t)).transpose()?,
        nmi: truth.map(|t| nmi(&snap.labels, t)).transpose()?,
        changed,
        histogram: score_histogram(&snap.s, config.hist_cluster, config.hist_bins)?,
    })
}

/// Stage-two training: jointly refines the encoder and the cluster centers
/// against a boosted target that is refreshed once per epoch.
///
/// Each epoch computes eval-mode scores over the whole dataset, freezes the
/// boosted target, then runs `B` mini-batch updates of the per-sample mean
/// KL loss through the encoder and the centers. Training stops after an
/// epoch in which at most `delta` of the hard labels changed. `truth` is
/// used only for the reported metrics.
pub fn train_dbc(
    model: &mut FcaeModel<f32>,
    images: &Tensor4<f32>,
    initial_centers: Matrix<f32>,
    truth: Option<&[usize]>,
    config: &DbcConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<DbcReport> {
    config.validate()?;
    let start = Instant::now();
    let m = images.shape().n;
    if initial_centers.rows() != config.k || initial_centers.cols() != model.feature_dim() {
        return config_err(format!(
            "initial centers are {}x{}, expected {}x{}",
            initial_centers.rows(),
            initial_centers.cols(),
            config.k,
            model.feature_dim()
        ));
    }
    if m < 2 {
        return config_err("DBC needs at least two samples");
    }
    if truth.is_some_and(|t| t.len() != m) {
        return config_err("label count does not match the image count");
    }
    let mut centers = initial_centers;
    let mut opt = Sgd::<f32>::new(config.lr, config.momentum)?;
    let iters = config.iters_per_epoch.unwrap_or_else(|| m.div_ceil(config.batch_size));

    let mut snap = snapshot(model, images, &centers, config.v)?;
    let mut target = boost_target(&snap.s, config.alpha, config.norm)?;
    let first = record(0, &snap, &target, truth, None, config)?;
    on_epoch(&first);
    let mut records = vec![first];
    let mut converged = false;

    for epoch in 1..=config.epochs {
        let mut queue = Vec::with_capacity(iters);
        let mut pass = 0u64;
        while queue.len() < iters {
            let stream = ((epoch as u64) << 20) | pass;
            queue.extend(batches(m, config.batch_size, config.seed, stream).into_iter().filter(|b| b.len() >= 2));
            pass += 1;
        }
        queue.truncate(iters);

        for idx in &queue {
            let x = images.gather(idx);
            let (zt, trace) = model.encode_trace(&x, config.bn_mode)?;
            let z = Matrix::from_tensor(&zt);
            let s = soft_assign(&z, &centers, config.v)?;
            let r = target.select_rows(idx);
            let loss = kl_loss(&r, &s)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite KL loss in epoch {epoch}; the learning rate ({}) may be too high",
                    config.lr
                )));
            }
            let scale = 1.0 / idx.len() as f32;
            let mut gz = grad_features(&z, &centers, &s, &r, config.v)?;
            let mut gm = grad_centers(&z, &centers, &s, &r, config.v)?;
            gz.scale(scale);
            gm.scale(scale);
            let (_, mut grads) = model.encoder_backward(&trace, gz.to_tensor())?;
            grads.push(gm.into_vec());
            let mut params = model.encoder_params_mut();
            params.push(centers.data_mut());
            opt.step(&mut params, &grads)?;
            if config.bn_mode == Mode::Train {
                model.absorb(&trace, None);
            }
        }

        let next = snapshot(model, images, &centers, config.v)?;
        let changed = changed_fraction(&snap.labels, &next.labels);
        let rec = record(epoch, &next, &target, truth, Some(changed), config)?;
        on_epoch(&rec);
        records.push(rec);
        snap = next;
        if changed <= config.delta {
            converged = true;
            break;
        }
        target = boost_target(&snap.s, config.alpha, config.norm)?;
    }

    Ok(DbcReport {
        records,
        centers,
        labels: snap.labels,
        scores: snap.s,
        converged,
        wall_clock: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::fcae::NetworkSpec;
    use crate::metrics::{kmeans, KMeansConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (FcaeModel<f32>, Tensor4<f32>, Vec<usize>, Matrix<f32>) {
        let spec = NetworkSpec::parse("small", (1, 16, 16), "conv3x4p1,pool,conv3x4p1,pool,conv4x8").unwrap();
        let model = FcaeModel::new(spec, &mut ChaCha8Rng::seed_from_u64(1));
        let data = make_synthetic(&SyntheticSpec { per_cluster: 24, ..Default::default() }).unwrap();
        let z = encode_all(&model, &data.images).unwrap();
        let centers = kmeans(&z, &KMeansConfig { restarts: 3, ..KMeansConfig::new(4, 0) }).unwrap().centers;
        (model, data.images, data.labels.unwrap(), centers)
    }

    #[test]
    fn delta_one_stops_after_the_first_epoch() {
        let (mut model, x, y, c0) = setup();
        let cfg = DbcConfig { k: 4, delta: 1.0, batch_size: 32, epochs: 10, ..Default::default() };
        let report = train_dbc(&mut model, &x, c0.clone(), Some(&y), &cfg, |_| {}).unwrap();
        assert_eq!(report.records.len(), 2);
        assert!(report.converged);
        // Each of the B = 3 momentum steps moves a center by at most
        // lr·|g|/(1 - momentum); just check it moved a little, not a lot.
        let shift = report.centers.data().iter().zip(c0.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(shift < 1.0, "{shift}");
    }

    #[test]
    fn records_are_consistent_and_repeatable() {
        let cfg = DbcConfig { k: 4, batch_size: 32, epochs: 3, delta: 0.0, ..Default::default() };
        let (mut a, x, y, c0) = setup();
        let ra = train_dbc(&mut a, &x, c0.clone(), Some(&y), &cfg, |_| {}).unwrap();
        assert_eq!(ra.records[0].epoch, 0);
        assert!(ra.records[0].changed.is_none());
        for r in &ra.records {
            assert_eq!(r.histogram.total(), x.shape().n);
            assert!(r.kl_loss >= 0.0 && r.kl_loss.is_finite());
            assert!(r.acc.unwrap() <= 1.0 && r.nmi.unwrap() <= 1.0);
        }
        let (mut b, _, _, _) = setup();
        let rb = train_dbc(&mut b, &x, c0, Some(&y), &cfg, |_| {}).unwrap();
        assert_eq!(ra, DbcReport { wall_clock: ra.wall_clock, ..rb });
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn invalid_configs() {
        let (mut model, x, _, c0) = setup();
        for cfg in [
            DbcConfig { k: 4, alpha: 1.0, ..Default::default() },
            DbcConfig { k: 4, v: 0.0, ..Default::default() },
            DbcConfig { k: 3, ..Default::default() },
            DbcConfig { k: 4, hist_cluster: 4, ..Default::default() },
        ] {
            assert!(train_dbc(&mut model, &x, c0.clone(), None, &cfg, |_| {}).is_err());
        }
    }
}
