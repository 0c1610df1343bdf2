use super::Real;
use crate::error::{config_err, Error, Result};

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum·v - lr·g`, `p <- p + v`.
#[derive(Debug, Clone)]
pub struct Sgd<T = f32> {
    lr: T,
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return config_err(format!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return config_err(format!("momentum must lie in [0, 1), got {momentum}"));
        }
        Ok(Self { lr: T::of(lr), momentum: T::of(momentum), velocity: Vec::new() })
    }

    pub fn lr(&self) -> f64 {
        self.lr.f64()
    }

    /// Applies one update. `params` and `grads` are matched slot by slot;
    /// the velocity state is created on first use. A non-finite gradient
    /// aborts before any parameter changes.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return config_err(format!(
                "optimizer got {} parameter slots but {} gradients",
                params.len(),
                grads.len()
            ));
        }
        for (slot, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return config_err(format!("parameter slot {slot}: {} values, {} gradients", p.len(), g.len()));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter slot {slot}; the learning rate may be too high"
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        } else if self.velocity.len() != grads.len() || self.velocity.iter().zip(grads).any(|(v, g)| v.len() != g.len()) {
            return config_err("optimizer state does not match the parameter layout");
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi - self.lr * gi;
                *pi += *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut sgd = Sgd::<f64>::new(0.1, 0.0).unwrap();
        let mut p = vec![1.0];
        sgd.step(&mut [&mut p], &[vec![2.0]]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut sgd = Sgd::<f32>::new(0.5, 0.9).unwrap();
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        for _ in 0..3 {
            sgd.step(&mut [&mut p], &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = -0.1, v2 = 0.9·(-0.1) - 0.1 = -0.19
        let mut sgd = Sgd::<f64>::new(0.1, 0.9).unwrap();
        let mut p = vec![0.0];
        sgd.step(&mut [&mut p], &[vec![1.0]]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        sgd.step(&mut [&mut p], &[vec![1.0]]).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn quadratic_loss_strictly_decreases() {
        // f(p) = 0.5·c·p², curvature c = 4; any lr < 2/c decreases f.
        let c = 4.0;
        let mut sgd = Sgd::<f64>::new(0.3, 0.0).unwrap();
        let mut p = vec![3.0];
        let mut last = 0.5 * c * p[0] * p[0];
        for _ in 0..20 {
            let g = vec![c * p[0]];
            sgd.step(&mut [&mut p], &[g]).unwrap();
            let f = 0.5 * c * p[0] * p[0];
            assert!(f < last);
            last = f;
        }
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut sgd = Sgd::<f32>::new(0.1, 0.0).unwrap();
        let mut p = vec![1.0];
        let err = sgd.step(&mut [&mut p], &[vec![f32::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::<f32>::new(0.0, 0.5).is_err());
        assert!(Sgd::<f32>::new(0.1, 1.0).is_err());
        assert!(Sgd::<f32>::new(0.1, -0.1).is_err());
    }
}
