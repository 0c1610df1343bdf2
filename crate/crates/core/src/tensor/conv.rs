use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{matmul, Real, Shape4, Tensor4};
use crate::error::{config_err, Result};

/// Unfolds one `(c, h, w)` sample into a `(c·k·k) × (oh·ow)` column matrix
/// for a stride-1 `k×k` window with zero padding `pad`.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back into `x`.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn he_normal<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| T::of(normal.sample(rng))).collect()
}

/// Stride-1 convolution. Weights are `(out_c, in_c, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T = f32> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    /// Zero-initialized layer.
    pub fn new(in_c: usize, out_c: usize, k: usize, pad: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            pad,
            weight: Tensor4::zeros(Shape4::new(out_c, in_c, k, k)),
            bias: vec![T::zero(); out_c],
        }
    }

    /// Gaussian weights with std `sqrt(2 / fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.in_c * self.k * self.k;
        let len = self.weight.len();
        self.weight.data_mut().copy_from_slice(&he_normal::<T, R>(len, fan_in, rng));
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.in_c {
            return config_err(format!("conv expects {} input channels, got {}", self.in_c, input.c));
        }
        if self.pad >= self.k {
            return config_err(format!("conv padding {} must be smaller than kernel {}", self.pad, self.k));
        }
        if input.h + 2 * self.pad < self.k || input.w + 2 * self.pad < self.k {
            return config_err(format!(
                "conv kernel {} (pad {}) larger than input {}x{}",
                self.k, self.pad, input.h, input.w
            ));
        }
        Ok(Shape4::new(
            input.n,
            self.out_c,
            input.h + 2 * self.pad + 1 - self.k,
            input.w + 2 * self.pad + 1 - self.k,
        ))
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let xs = x.shape();
        let ys = self.output_shape(xs)?;
        let ckk = self.in_c * self.k * self.k;
        let p = ys.plane();
        let mut y = Tensor4::zeros(ys);
        let mut cols = vec![T::zero(); ckk * p];
        for n in 0..xs.n {
            im2col(x.sample(n), xs.c, xs.h, xs.w, self.k, self.pad, &mut cols);
            let out = y.sample_mut(n);
            for (oc, plane) in out.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias[oc]);
            }
            matmul(self.out_c, ckk, p, self.weight.data(), false, &cols, false, T::one(), out);
        }
        Ok(y)
    }

    /// Returns `(dL/dx, dL/dW, dL/db)`.
    pub fn backward(&self, x: &Tensor4<T>, dy: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
        let xs = x.shape();
        let ys = self.output_shape(xs)?;
        dy.ensure_shape(ys, "conv backward upstream gradient")?;
        let ckk = self.in_c * self.k * self.k;
        let p = ys.plane();
        let mut dx = Tensor4::zeros(xs);
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut db = vec![T::zero(); self.out_c];
        let mut cols = vec![T::zero(); ckk * p];
        let mut dcols = vec![T::zero(); ckk * p];
        for n in 0..xs.n {
            let g = dy.sample(n);
            for (oc, plane) in g.chunks(p).enumerate() {
                db[oc] += plane.iter().copied().sum::<T>();
            }
            im2col(x.sample(n), xs.c, xs.h, xs.w, self.k, self.pad, &mut cols);
            matmul(self.out_c, p, ckk, g, false, &cols, true, T::one(), &mut dw);
            matmul(ckk, self.out_c, p, self.weight.data(), true, g, false, T::zero(), &mut dcols);
            col2im(&dcols, xs.c, xs.h, xs.w, self.k, self.pad, dx.sample_mut(n));
        }
        Ok((dx, dw, db))
    }
}

/// Stride-1 transposed convolution (the adjoint of [`Conv`] with the same
/// kernel and padding). Weights are `(in_c, out_c, k, k)`, the layout of the
/// convolution it transposes.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv<T = f32> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Deconv<T> {
    pub fn new(in_c: usize, out_c: usize, k: usize, pad: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            pad,
            weight: Tensor4::zeros(Shape4::new(in_c, out_c, k, k)),
            bias: vec![T::zero(); out_c],
        }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.in_c * self.k * self.k;
        let len = self.weight.len();
        self.weight.data_mut().copy_from_slice(&he_normal::<T, R>(len, fan_in, rng));
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.in_c {
            return config_err(format!("deconv expects {} input channels, got {}", self.in_c, input.c));
        }
        if self.pad >= self.k {
            return config_err(format!("deconv padding {} must be smaller than kernel {}", self.pad, self.k));
        }
        if input.h + self.k < 1 + 2 * self.pad || input.w + self.k < 1 + 2 * self.pad {
            return config_err("deconv output would be empty");
        }
        Ok(Shape4::new(
            input.n,
            self.out_c,
            input.h + self.k - 1 - 2 * self.pad,
            input.w + self.k - 1 - 2 * self.pad,
        ))
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let xs = x.shape();
        let ys = self.output_shape(xs)?;
        let okk = self.out_c * self.k * self.k;
        let p = xs.plane();
        let mut y = Tensor4::zeros(ys);
        let mut cols = vec![T::zero(); okk * p];
        for n in 0..xs.n {
            matmul(okk, self.in_c, p, self.weight.data(), true, x.sample(n), false, T::zero(), &mut cols);
            let out = y.sample_mut(n);
            col2im(&cols, ys.c, ys.h, ys.w, self.k, self.pad, out);
            for (oc, plane) in out.chunks_mut(ys.plane()).enumerate() {
                plane.iter_mut().for_each(|v| *v += self.bias[oc]);
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor4<T>, dy: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
        let xs = x.shape();
        let ys = self.output_shape(xs)?;
        dy.ensure_shape(ys, "deconv backward upstream gradient")?;
        let okk = self.out_c * self.k * self.k;
        let p = xs.plane();
        let mut dx = Tensor4::zeros(xs);
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut db = vec![T::zero(); self.out_c];
        let mut cols = vec![T::zero(); okk * p];
        for n in 0..xs.n {
            let g = dy.sample(n);
            for (oc, plane) in g.chunks(ys.plane()).enumerate() {
                db[oc] += plane.iter().copied().sum::<T>();
            }
            im2col(g, ys.c, ys.h, ys.w, self.k, self.pad, &mut cols);
            matmul(self.in_c, okk, p, self.weight.data(), false, &cols, false, T::zero(), dx.sample_mut(n));
            matmul(self.in_c, p, okk, x.sample(n), false, &cols, true, T::one(), &mut dw);
        }
        Ok((dx, dw, db))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(conv: &Conv<f64>, x: &Tensor4<f64>) -> Tensor4<f64> {
        let ys = conv.output_shape(x.shape()).unwrap();
        let xs = x.shape();
        let mut y = Tensor4::zeros(ys);
        for n in 0..ys.n {
            for oc in 0..ys.c {
                for oy in 0..ys.h {
                    for ox in 0..ys.w {
                        let mut acc = conv.bias[oc];
                        for ic in 0..xs.c {
                            for ki in 0..conv.k {
                                for kj in 0..conv.k {
                                    let iy = (oy + ki) as isize - conv.pad as isize;
                                    let ix = (ox + kj) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += conv.weight.at(oc, ic, ki, kj) * x.at(n, ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let off = ys.offset(n, oc, oy, ox);
                        y.data_mut()[off] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_one_by_one_conv_is_identity() {
        let mut conv = Conv::<f32>::new(1, 1, 1, 0);
        conv.weight.data_mut()[0] = 1.0;
        let x = Tensor4::from_fn(Shape4::new(2, 1, 3, 3), |i| i as f32 - 4.0);
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn scalar_conv_gradients_follow_chain_rule() {
        let mut conv = Conv::<f64>::new(1, 1, 1, 0);
        conv.weight.data_mut()[0] = 1.5;
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let g = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let (dx, dw, db) = conv.backward(&x, &g).unwrap();
        assert_eq!(dw, vec![6.0]);
        assert_eq!(dx.data(), &[4.5]);
        assert_eq!(db, vec![3.0]);
    }

    #[test]
    fn im2col_conv_matches_nested_loops() {
        for (k, pad) in [(3, 0), (3, 1), (5, 2), (1, 0)] {
            let mut conv = Conv::<f64>::new(3, 4, k, pad);
            conv.init(&mut ChaCha8Rng::seed_from_u64(7));
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random(Shape4::new(2, 3, 6, 7), 11);
            let got = conv.forward(&x).unwrap();
            let want = naive_conv(&conv, &x);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> for shared weights and zero bias.
        let mut conv = Conv::<f64>::new(3, 2, 3, 1);
        conv.init(&mut ChaCha8Rng::seed_from_u64(3));
        let mut deconv = Deconv::<f64>::new(2, 3, 3, 1);
        deconv.weight = conv.weight.clone();
        let x = random(Shape4::new(2, 3, 5, 5), 4);
        let y = random(conv.output_shape(x.shape()).unwrap(), 5);
        let lhs: f64 = conv.forward(&x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(deconv.forward(&y).unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn shape_algebra() {
        let conv = Conv::<f32>::new(1, 6, 5, 0);
        assert_eq!(conv.output_shape(Shape4::new(4, 1, 28, 28)).unwrap(), Shape4::new(4, 6, 24, 24));
        let deconv = Deconv::<f32>::new(6, 1, 5, 0);
        assert_eq!(deconv.output_shape(Shape4::new(4, 6, 24, 24)).unwrap(), Shape4::new(4, 1, 28, 28));
        let padded = Conv::<f32>::new(1, 20, 3, 1);
        assert_eq!(padded.output_shape(Shape4::new(1, 1, 16, 16)).unwrap().h, 16);
        assert!(conv.output_shape(Shape4::new(1, 2, 28, 28)).is_err());
        assert!(conv.output_shape(Shape4::new(1, 1, 4, 4)).is_err());
    }
}
