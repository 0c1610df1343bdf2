use super::{Real, Shape4, Tensor4};
use crate::error::{config_err, Result};

/// Added to the variance inside the square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistic update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Statistics of one training-mode forward pass, needed by backward and by
/// the running-statistic update.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Tensor4<T>,
    /// Number of values per channel (`n·h·w`).
    pub count: usize,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    fn check(&self, s: Shape4) -> Result<()> {
        if s.c != self.channels {
            return config_err(format!("batch-norm expects {} channels, got {}", self.channels, s.c));
        }
        Ok(())
    }

    /// Normalizes with the batch's own per-channel statistics over `(n, h, w)`.
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BnBatchStats<T>)> {
        let s = x.shape();
        self.check(s)?;
        let count = s.n * s.plane();
        if count < 2 {
            return config_err("batch-norm in training mode needs at least two values per channel");
        }
        let inv_count = T::one() / T::of(count as f64);
        let eps = T::of(BN_EPS);
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        for n in 0..s.n {
            for (c, plane) in x.sample(n).chunks(s.plane()).enumerate() {
                mean[c] += plane.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_count);
        for n in 0..s.n {
            for (c, plane) in x.sample(n).chunks(s.plane()).enumerate() {
                var[c] += plane.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = Tensor4::zeros(s);
        let mut y = Tensor4::zeros(s);
        for n in 0..s.n {
            let src = x.sample(n);
            let xh = xhat.sample_mut(n);
            for c in 0..s.c {
                let r = c * s.plane()..(c + 1) * s.plane();
                for (h, &v) in xh[r.clone()].iter_mut().zip(&src[r]) {
                    *h = (v - mean[c]) * inv_std[c];
                }
            }
            let yo = y.sample_mut(n);
            for c in 0..s.c {
                let r = c * s.plane()..(c + 1) * s.plane();
                for (o, &h) in yo[r.clone()].iter_mut().zip(&xh[r]) {
                    *o = self.gamma[c] * h + self.beta[c];
                }
            }
        }
        Ok((y, BnBatchStats { mean, var, inv_std, xhat, count }))
    }

    /// Folds one batch's statistics into the running estimates. The running
    /// variance uses the unbiased (`count - 1`) estimator.
    pub fn absorb(&mut self, stats: &BnBatchStats<T>) {
        let mom = T::of(BN_MOMENTUM);
        let rest = T::one() - mom;
        let unbias = T::of(stats.count as f64 / (stats.count as f64 - 1.0));
        for c in 0..self.channels {
            self.running_mean[c] = mom * self.running_mean[c] + rest * stats.mean[c];
            self.running_var[c] = mom * self.running_var[c] + rest * stats.var[c] * unbias;
        }
    }

    fn eval_inv_std(&self) -> Vec<T> {
        let eps = T::of(BN_EPS);
        self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
    }

    /// Per-channel affine map using the running statistics.
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        self.check(s)?;
        let inv_std = self.eval_inv_std();
        let mut y = x.clone();
        for n in 0..s.n {
            for (c, plane) in y.sample_mut(n).chunks_mut(s.plane()).enumerate() {
                let scale = self.gamma[c] * inv_std[c];
                let shift = self.beta[c] - self.running_mean[c] * scale;
                plane.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(y)
    }

    /// Training-mode backward. Returns `(dx, dgamma, dbeta)`.
    pub fn backward_train(&self, stats: &BnBatchStats<T>, dy: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
        let s = stats.xhat.shape();
        dy.ensure_shape(s, "batch-norm backward upstream gradient")?;
        let mut dgamma = vec![T::zero(); s.c];
        let mut dbeta = vec![T::zero(); s.c];
        for n in 0..s.n {
            let g = dy.sample(n);
            let xh = stats.xhat.sample(n);
            for c in 0..s.c {
                let r = c * s.plane()..(c + 1) * s.plane();
                for (&gv, &hv) in g[r.clone()].iter().zip(&xh[r]) {
                    dbeta[c] += gv;
                    dgamma[c] += gv * hv;
                }
            }
        }
        let count = T::of(stats.count as f64);
        let mut dx = Tensor4::zeros(s);
        for n in 0..s.n {
            let g = dy.sample(n);
            let xh = stats.xhat.sample(n);
            let out = dx.sample_mut(n);
            for c in 0..s.c {
                let k = self.gamma[c] * stats.inv_std[c] / count;
                let r = c * s.plane()..(c + 1) * s.plane();
                for ((o, &gv), &hv) in out[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                    *o = k * (count * gv - dbeta[c] - hv * dgamma[c]);
                }
            }
        }
        Ok((dx, dgamma, dbeta))
    }

    /// Eval-mode backward: the layer is a fixed per-channel affine map.
    pub fn backward_eval(&self, x: &Tensor4<T>, dy: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
        let s = x.shape();
        self.check(s)?;
        dy.ensure_shape(s, "batch-norm backward upstream gradient")?;
        let inv_std = self.eval_inv_std();
        let mut dx = Tensor4::zeros(s);
        let mut dgamma = vec![T::zero(); s.c];
        let mut dbeta = vec![T::zero(); s.c];
        for n in 0..s.n {
            let g = dy.sample(n);
            let xs = x.sample(n);
            let out = dx.sample_mut(n);
            for c in 0..s.c {
                let r = c * s.plane()..(c + 1) * s.plane();
                for ((o, &gv), &xv) in out[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xs[r]) {
                    *o = gv * self.gamma[c] * inv_std[c];
                    dbeta[c] += gv;
                    dgamma[c] += gv * (xv - self.running_mean[c]) * inv_std[c];
                }
            }
        }
        Ok((dx, dgamma, dbeta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape4::new(4, 3, 5, 5);
        let x = Tensor4::<f32>::from_fn(s, |i| rng.random_range(-3.0..7.0) * (1 + i % 3) as f32);
        let bn = BatchNorm::new(3);
        let (y, _) = bn.forward_train(&x).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..s.n)
                .flat_map(|n| y.sample(n)[c * 25..(c + 1) * 25].to_vec())
                .map(f64::from)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let x = Tensor4::<f64>::from_fn(Shape4::new(2, 1, 1, 2), |i| i as f64);
        let mut bn = BatchNorm::new(1);
        let (_, st) = bn.forward_train(&x).unwrap();
        bn.absorb(&st);
        assert!((bn.running_mean[0] - 0.15).abs() < 1e-12);
        // batch var 1.25, unbiased 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_affine() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.gamma[0] = 2.0;
        bn.beta[0] = 0.5;
        bn.running_mean[0] = 1.0;
        bn.running_var[0] = 4.0 - BN_EPS;
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![3.0, -1.0]).unwrap();
        let y = bn.forward_eval(&x).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
        assert!((y.data()[1] + 1.5).abs() < 1e-12);
        let dy = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![1.0, 1.0]).unwrap();
        let (dx, dg, db) = bn.backward_eval(&x, &dy).unwrap();
        assert!((dx.data()[0] - 1.0).abs() < 1e-12);
        assert!((dg[0] - 0.0).abs() < 1e-12);
        assert_eq!(db[0], 2.0);
    }

    #[test]
    fn single_value_batch_is_rejected() {
        let bn = BatchNorm::<f32>::new(2);
        assert!(bn.forward_train(&Tensor4::zeros(Shape4::new(1, 2, 1, 1))).is_err());
    }
}
