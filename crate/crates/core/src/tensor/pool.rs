use super::{Real, Shape4, Tensor4};
use crate::error::{config_err, Result};

/// Argmax positions recorded by a 2×2 max-pooling pass.
///
/// `indices[o]` is the flat index into the pooled input of the maximum that
/// produced output element `o`. The mirrored unpooling layer uses these to
/// place values back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSwitches {
    pub input_shape: Shape4,
    pub output_shape: Shape4,
    pub indices: Vec<usize>,
}

impl PoolSwitches {
    /// Checks that every stored index lies inside its own 2×2 source window.
    pub fn is_consistent(&self) -> bool {
        let (is, os) = (self.input_shape, self.output_shape);
        if self.indices.len() != os.len() {
            return false;
        }
        self.indices.iter().enumerate().all(|(o, &idx)| {
            let ox = o % os.w;
            let oy = (o / os.w) % os.h;
            let nc = o / os.plane();
            let base = nc * is.plane();
            if idx < base || idx >= base + is.plane() {
                return false;
            }
            let local = idx - base;
            local / is.w / 2 == oy && local % is.w / 2 == ox
        })
    }
}

pub fn pool_output_shape(input: Shape4) -> Result<Shape4> {
    if input.h % 2 != 0 || input.w % 2 != 0 {
        return config_err(format!(
            "2x2 max-pooling needs even spatial size, got {}x{}",
            input.h, input.w
        ));
    }
    Ok(Shape4::new(input.n, input.c, input.h / 2, input.w / 2))
}

/// 2×2 stride-2 max-pooling. Ties go to the first element in row-major
/// window order.
pub fn max_pool_forward<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, PoolSwitches)> {
    let is = x.shape();
    let os = pool_output_shape(is)?;
    let data = x.data();
    let mut out = Vec::with_capacity(os.len());
    let mut indices = Vec::with_capacity(os.len());
    for nc in 0..is.n * is.c {
        let base = nc * is.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = base + 2 * oy * is.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * is.w + 2 * ox + dx;
                    if data[cand] > data[best] {
                        best = cand;
                    }
                }
                out.push(data[best]);
                indices.push(best);
            }
        }
    }
    Ok((
        Tensor4::from_vec(os, out)?,
        PoolSwitches { input_shape: is, output_shape: os, indices },
    ))
}

/// Scatters the upstream gradient onto the recorded argmax positions.
pub fn max_pool_backward<T: Real>(switches: &PoolSwitches, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    dy.ensure_shape(switches.output_shape, "max-pool backward upstream gradient")?;
    let mut dx = Tensor4::zeros(switches.input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in switches.indices.iter().zip(dy.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Places each input value at its switch position in a zero map of the
/// pre-pooling shape.
pub fn unpool_forward<T: Real>(x: &Tensor4<T>, switches: &PoolSwitches) -> Result<Tensor4<T>> {
    if x.shape() != switches.output_shape {
        return config_err(format!(
            "unpooling input {} does not match the paired pooling output {}",
            x.shape(),
            switches.output_shape
        ));
    }
    let mut y = Tensor4::zeros(switches.input_shape);
    let d = y.data_mut();
    for (&idx, &v) in switches.indices.iter().zip(x.data()) {
        d[idx] = v;
    }
    Ok(y)
}

/// Gathers the upstream gradient at the switch positions only.
pub fn unpool_backward<T: Real>(switches: &PoolSwitches, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    dy.ensure_shape(switches.input_shape, "unpooling backward upstream gradient")?;
    let g = dy.data();
    Tensor4::from_vec(switches.output_shape, switches.indices.iter().map(|&i| g[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_two_by_two_window() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, sw) = max_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(sw.indices, vec![3]);
        assert!(sw.is_consistent());
    }

    #[test]
    fn odd_size_is_rejected() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 3, 4));
        assert!(max_pool_forward(&x).is_err());
    }

    #[test]
    fn unpool_restores_maxima_and_zeros_elsewhere() {
        let x = Tensor4::from_fn(Shape4::new(2, 2, 4, 6), |i| ((i * 37) % 23) as f32 - 11.0);
        let (y, sw) = max_pool_forward(&x).unwrap();
        let u = unpool_forward(&y, &sw).unwrap();
        assert_eq!(u.shape(), x.shape());
        for i in 0..x.len() {
            if sw.indices.contains(&i) {
                assert_eq!(u.data()[i], x.data()[i]);
            } else {
                assert_eq!(u.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn ties_pick_first_in_window() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![5.0f32, 5.0, 5.0, 5.0]).unwrap();
        let (_, sw) = max_pool_forward(&x).unwrap();
        assert_eq!(sw.indices, vec![0]);
    }

    #[test]
    fn unpool_rejects_mismatched_switches() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 1, 4, 4));
        let (_, sw) = max_pool_forward(&x).unwrap();
        assert!(unpool_forward(&Tensor4::<f32>::zeros(Shape4::new(1, 1, 3, 3)), &sw).is_err());
    }
}
