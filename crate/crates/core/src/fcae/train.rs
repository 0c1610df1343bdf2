use std::time::{Duration, Instant};

use super::FcaeModel;
use crate::data::batches;
use crate::error::{config_err, Error, Result};
use crate::tensor::{Mode, Sgd, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct FcaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FcaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 256, lr: 0.001, momentum: 0.9, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample reconstruction loss of each epoch, averaged over the
    /// mini-batches as they were trained.
    pub epoch_losses: Vec<f64>,
    pub wall_clock: Duration,
    pub seed: u64,
}

/// Stage-one training: mini-batch SGD on the per-sample mean Euclidean
/// reconstruction loss. Batches of a single sample are skipped because
/// batch-norm needs batch statistics.
///
/// `on_epoch(epoch, mean_loss)` is called after every epoch.
pub fn train_fcae(
    model: &mut FcaeModel<f32>,
    images: &Tensor4<f32>,
    config: &FcaeTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if config.batch_size < 2 {
        return config_err("FCAE batch size must be at least 2 for batch-norm statistics");
    }
    let start = Instant::now();
    let mut opt = Sgd::<f32>::new(config.lr, config.momentum)?;
    let n = images.shape().n;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for idx in batches(n, config.batch_size, config.seed, epoch as u64) {
            if idx.len() < 2 {
                continue;
            }
            let x = images.gather(&idx);
            let (loss, grads, et, dt) = model.reconstruction_step(&x, Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite reconstruction loss in epoch {}; the learning rate ({}) may be too high",
                    epoch + 1,
                    config.lr
                )));
            }
            opt.step(&mut model.params_mut(), &grads)?;
            model.absorb(&et, Some(&dt));
            total += loss;
            seen += idx.len();
        }
        let mean = if seen > 0 { total / seen as f64 } else { 0.0 };
        epoch_losses.push(mean);
        on_epoch(epoch + 1, mean);
    }
    Ok(TrainReport { epoch_losses, wall_clock: start.elapsed(), seed: config.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::fcae::NetworkSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_setup() -> (FcaeModel<f32>, Tensor4<f32>) {
        let spec = NetworkSpec::parse("small", (1, 16, 16), "conv3x4p1,pool,conv3x4p1,pool,conv4x8").unwrap();
        let data = make_synthetic(&SyntheticSpec { per_cluster: 16, ..Default::default() }).unwrap();
        (FcaeModel::new(spec, &mut ChaCha8Rng::seed_from_u64(3)), data.images)
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut model, x) = small_setup();
        let before = model.clone();
        let report = train_fcae(&mut model, &x, &FcaeTrainConfig { epochs: 0, ..Default::default() }, |_, _| {}).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn loss_goes_down_and_runs_repeat() {
        let cfg = FcaeTrainConfig { epochs: 8, batch_size: 16, ..Default::default() };
        let (mut a, x) = small_setup();
        let ra = train_fcae(&mut a, &x, &cfg, |_, _| {}).unwrap();
        assert!(ra.epoch_losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert!(ra.epoch_losses[7] < ra.epoch_losses[0], "{:?}", ra.epoch_losses);
        let (mut b, _) = small_setup();
        let rb = train_fcae(&mut b, &x, &cfg, |_, _| {}).unwrap();
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let (mut model, x) = small_setup();
        let cfg = FcaeTrainConfig { epochs: 30, batch_size: 16, lr: 1e6, ..Default::default() };
        let err = train_fcae(&mut model, &x, &cfg, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
    }

    #[test]
    fn batch_size_one_is_rejected() {
        let (mut model, x) = small_setup();
        let cfg = FcaeTrainConfig { batch_size: 1, ..Default::default() };
        assert!(train_fcae(&mut model, &x, &cfg, |_, _| {}).is_err());
    }
}
