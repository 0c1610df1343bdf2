//! Discriminatively boosted clustering: Student-t soft assignment, the
//! boosted target distribution, the KL objective with its analytic
//! gradients, and the joint encoder/center trainer.

mod train;

pub use train::{encode_all, train_dbc, DbcConfig, DbcReport, EpochRecord};

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::matrix::Matrix;
use crate::tensor::Real;

/// Per-cluster divisor `n_j` applied to the boosted scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// `n_j = 1`.
    Constant,
    /// `n_j = sum_i s_ij`.
    ScoreSum,
    /// `n_j = sum_i s_ij^alpha`.
    #[default]
    BoostedSum,
}

impl NormMode {
    pub const ALL: [NormMode; 3] = [NormMode::Constant, NormMode::ScoreSum, NormMode::BoostedSum];

    pub fn name(self) -> &'static str {
        match self {
            NormMode::Constant => "constant",
            NormMode::ScoreSum => "score-sum",
            NormMode::BoostedSum => "boosted-sum",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(NormMode::Constant),
            "score-sum" => Ok(NormMode::ScoreSum),
            "boosted-sum" => Ok(NormMode::BoostedSum),
            other => config_err(format!("unknown normalization mode '{other}' (constant, score-sum, boosted-sum)")),
        }
    }
}

fn check_dims<T: Real>(z: &Matrix<T>, centers: &Matrix<T>, v: f64) -> Result<()> {
    if centers.rows() == 0 {
        return config_err("soft assignment needs at least one cluster center");
    }
    if z.cols() != centers.cols() {
        return config_err(format!("features have {} dimensions, centers {}", z.cols(), centers.cols()));
    }
    if !(v > 0.0) {
        return config_err(format!("degrees of freedom must be positive, got {v}"));
    }
    Ok(())
}

fn sq_dist_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.f64() - y.f64()).powi(2)).sum()
}

/// Student-t scores `s_ij ∝ (1 + ||z_i - μ_j||²/v)^(-(v+1)/2)`, normalized
/// per row. Evaluated in log space so far-away points cannot underflow
/// every entry of a row.
pub fn soft_assign<T: Real>(z: &Matrix<T>, centers: &Matrix<T>, v: f64) -> Result<Matrix<T>> {
    check_dims(z, centers, v)?;
    let k = centers.rows();
    let expo = -(v + 1.0) / 2.0;
    let mut s = Matrix::zeros(z.rows(), k);
    let mut logq = vec![0.0f64; k];
    for (i, zi) in z.iter_rows().enumerate() {
        for (j, mu) in centers.iter_rows().enumerate() {
            logq[j] = expo * (sq_dist_f64(zi, mu) / v).ln_1p();
        }
        let top = logq.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logq.iter().map(|&l| (l - top).exp()).sum();
        for (out, &l) in s.row_mut(i).iter_mut().zip(&logq) {
            *out = T::of((l - top).exp() / total);
        }
    }
    Ok(s)
}

/// Boosted target `r_ij = (s_ij^α / n_j) / sum_j (s_ij^α / n_j)`.
pub fn boost_target<T: Real>(s: &Matrix<T>, alpha: f64, mode: NormMode) -> Result<Matrix<T>> {
    if s.rows() == 0 || s.cols() == 0 {
        return config_err("cannot boost an empty score matrix");
    }
    if !(alpha > 1.0) {
        return config_err(format!("boosting factor must exceed 1, got {alpha}"));
    }
    let k = s.cols();
    let powered: Vec<f64> = s.data().iter().map(|&x| x.f64().powf(alpha)).collect();
    let mut norm = vec![0.0f64; k];
    match mode {
        NormMode::Constant => norm.fill(1.0),
        NormMode::ScoreSum => s.iter_rows().for_each(|r| r.iter().zip(&mut norm).for_each(|(x, n)| *n += x.f64())),
        NormMode::BoostedSum => powered.chunks(k).for_each(|r| r.iter().zip(&mut norm).for_each(|(x, n)| *n += x)),
    }
    let mut r = Matrix::zeros(s.rows(), k);
    let mut row = vec![0.0f64; k];
    for (i, p) in powered.chunks(k).enumerate() {
        for j in 0..k {
            row[j] = if norm[j] > 0.0 { p[j] / norm[j] } else { 0.0 };
        }
        let total: f64 = row.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Domain(format!("target row {i} has no mass after boosting")));
        }
        for (out, &x) in r.row_mut(i).iter_mut().zip(&row) {
            *out = T::of(x / total);
        }
    }
    Ok(r)
}

/// `L = sum_i sum_j r_ij ln(r_ij / s_ij)`; terms with `r_ij = 0` vanish.
pub fn kl_loss<T: Real>(r: &Matrix<T>, s: &Matrix<T>) -> Result<f64> {
    if (r.rows(), r.cols()) != (s.rows(), s.cols()) {
        return config_err("target and score matrices differ in shape");
    }
    let mut total = 0.0;
    for (&rv, &sv) in r.data().iter().zip(s.data()) {
        let (rv, sv) = (rv.f64(), sv.f64());
        if !(sv > 0.0) {
            return Err(Error::Domain("KL loss needs strictly positive scores".into()));
        }
        if rv > 0.0 {
            total += rv * (rv / sv).ln();
        }
    }
    Ok(total)
}

/// Shared kernel of both gradients:
/// `c_ij = ((1+v)/v) (r_ij - s_ij) / (1 + ||z_i - μ_j||²/v)`.
fn coefficients<T: Real>(z: &Matrix<T>, centers: &Matrix<T>, s: &Matrix<T>, r: &Matrix<T>, v: f64) -> Result<Vec<f64>> {
    check_dims(z, centers, v)?;
    let (m, k) = (z.rows(), centers.rows());
    if (s.rows(), s.cols()) != (m, k) || (r.rows(), r.cols()) != (m, k) {
        return config_err("score/target matrices must be m×k");
    }
    debug_assert!(
        {
            let fresh = soft_assign(z, centers, v)?;
            fresh.data().iter().zip(s.data()).all(|(a, b)| (a.f64() - b.f64()).abs() <= 1e-4 * (1.0 + b.f64().abs()))
        },
        "scores passed to the gradient are not soft_assign(z, centers, v)"
    );
    let scale = (1.0 + v) / v;
    let mut c = vec![0.0f64; m * k];
    for i in 0..m {
        for j in 0..k {
            let d2 = sq_dist_f64(z.row(i), centers.row(j));
            c[i * k + j] = scale * (r.get(i, j).f64() - s.get(i, j).f64()) / (1.0 + d2 / v);
        }
    }
    Ok(c)
}

/// `∂L/∂z_i = ((1+v)/v) sum_j (r_ij - s_ij)(z_i - μ_j) / (1 + ||z_i - μ_j||²/v)`
/// with `r` held fixed. `s` must equal `soft_assign(z, centers, v)`.
pub fn grad_features<T: Real>(
    z: &Matrix<T>,
    centers: &Matrix<T>,
    s: &Matrix<T>,
    r: &Matrix<T>,
    v: f64,
) -> Result<Matrix<T>> {
    let c = coefficients(z, centers, s, r, v)?;
    let (m, k, d) = (z.rows(), centers.rows(), z.cols());
    let mut g = Matrix::zeros(m, d);
    let mut acc = vec![0.0f64; d];
    for i in 0..m {
        acc.fill(0.0);
        for j in 0..k {
            let cij = c[i * k + j];
            for ((a, &zv), &mv) in acc.iter_mut().zip(z.row(i)).zip(centers.row(j)) {
                *a += cij * (zv.f64() - mv.f64());
            }
        }
        for (out, &a) in g.row_mut(i).iter_mut().zip(&acc) {
            *out = T::of(a);
        }
    }
    Ok(g)
}

/// `∂L/∂μ_j = ((1+v)/v) sum_i (r_ij - s_ij)(μ_j - z_i) / (1 + ||μ_j - z_i||²/v)`.
pub fn grad_centers<T: Real>(
    z: &Matrix<T>,
    centers: &Matrix<T>,
    s: &Matrix<T>,
    r: &Matrix<T>,
    v: f64,
) -> Result<Matrix<T>> {
    let c = coefficients(z, centers, s, r, v)?;
    let (m, k, d) = (z.rows(), centers.rows(), z.cols());
    let mut acc = vec![0.0f64; k * d];
    for i in 0..m {
        for j in 0..k {
            let cij = c[i * k + j];
            for ((a, &zv), &mv) in acc[j * d..(j + 1) * d].iter_mut().zip(z.row(i)).zip(centers.row(j)) {
                *a += cij * (mv.f64() - zv.f64());
            }
        }
    }
    Matrix::from_vec(k, d, acc.into_iter().map(T::of).collect())
}

/// Row-wise argmax; ties go to the lowest cluster index.
pub fn hard_assign<T: Real>(s: &Matrix<T>) -> Vec<usize> {
    s.iter_rows()
        .map(|row| row.iter().enumerate().fold((0, T::neg_infinity()), |b, (j, &x)| if x > b.1 { (j, x) } else { b }).0)
        .collect()
}

/// Fraction of positions where two labelings differ.
pub fn changed_fraction(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

/// Objective `kl_loss(R, soft_assign(Z, μ))` as a gradient-check target
/// over the features and the centers, with `R` frozen.
#[derive(Debug, Clone)]
pub struct KlProbe {
    pub z: Matrix<f64>,
    pub centers: Matrix<f64>,
    pub r: Matrix<f64>,
    pub v: f64,
}

impl crate::tensor::GradCheckable for KlProbe {
    fn loss(&self) -> f64 {
        let s = soft_assign(&self.z, &self.centers, self.v).expect("probe dimensions agree");
        kl_loss(&self.r, &s).expect("t-kernel scores are positive")
    }

    fn gradients(&self) -> Vec<(String, Vec<f64>)> {
        let s = soft_assign(&self.z, &self.centers, self.v).expect("probe dimensions agree");
        let gz = grad_features(&self.z, &self.centers, &s, &self.r, self.v).expect("consistent scores");
        let gm = grad_centers(&self.z, &self.centers, &s, &self.r, self.v).expect("consistent scores");
        vec![("features".into(), gz.into_vec()), ("centers".into(), gm.into_vec())]
    }

    fn variables_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.z.data_mut(), self.centers.data_mut()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn equidistant_point_splits_evenly() {
        let s = soft_assign(&m(&[&[0.0, 0.0]]), &m(&[&[1.0, 0.0], &[-1.0, 0.0]]), 1.0).unwrap();
        assert!(close(s.data(), &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn point_on_a_center() {
        // q = (1, 1/4) -> (0.8, 0.2)
        let s = soft_assign(&m(&[&[0.0]]), &m(&[&[0.0], &[3f64.sqrt()]]), 1.0).unwrap();
        assert!(close(s.data(), &[0.8, 0.2], 1e-12));
    }

    #[test]
    fn single_cluster_and_empty_centers() {
        let z = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let s = soft_assign(&z, &m(&[&[0.0, 0.0]]), 1.0).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0]);
        assert!(soft_assign(&z, &Matrix::zeros(0, 2), 1.0).is_err());
        assert!(soft_assign(&z, &m(&[&[0.0, 0.0]]), 0.0).is_err());
    }

    #[test]
    fn far_points_do_not_underflow() {
        // (1e120 / 0.1)^(-5.5) is far below the smallest double.
        let s = soft_assign(&m(&[&[1e60]]), &m(&[&[0.0], &[1.0]]), 0.1).unwrap();
        assert!(s.all_finite());
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boosting_examples() {
        let uniform = m(&[&[0.25; 4]]);
        assert!(close(boost_target(&uniform, 3.0, NormMode::Constant).unwrap().data(), &[0.25; 4], 1e-15));
        let r = boost_target(&m(&[&[0.8, 0.2]]), 2.0, NormMode::Constant).unwrap();
        assert!(close(r.data(), &[16.0 / 17.0, 1.0 / 17.0], 1e-12));
        let r = boost_target(&m(&[&[0.8, 0.2], &[0.8, 0.2]]), 2.0, NormMode::BoostedSum).unwrap();
        assert!(close(r.data(), &[0.5; 4], 1e-12));
        assert!(boost_target(&uniform, 1.0, NormMode::Constant).is_err());
        assert!(boost_target(&Matrix::<f64>::zeros(0, 2), 2.0, NormMode::Constant).is_err());
    }

    #[test]
    fn score_sum_mode_divides_by_column_mass() {
        // n = (1.0, 1.0) for these two rows, so it reduces to constant mode.
        let s = m(&[&[0.8, 0.2], &[0.2, 0.8]]);
        let a = boost_target(&s, 2.0, NormMode::ScoreSum).unwrap();
        let b = boost_target(&s, 2.0, NormMode::Constant).unwrap();
        assert!(close(a.data(), b.data(), 1e-15));
    }

    #[test]
    fn kl_examples() {
        let s = m(&[&[0.3, 0.7]]);
        assert_eq!(kl_loss(&s, &s).unwrap(), 0.0);
        assert!((kl_loss(&m(&[&[1.0, 0.0]]), &m(&[&[0.5, 0.5]])).unwrap() - 2f64.ln()).abs() < 1e-15);
        let l = kl_loss(&m(&[&[0.9412, 0.0588]]), &m(&[&[0.8, 0.2]])).unwrap();
        let oracle = 0.9412 * (0.9412f64 / 0.8).ln() + 0.0588 * (0.0588f64 / 0.2).ln();
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 0.0810).abs() < 1e-3);
        assert!(matches!(kl_loss(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0]])), Err(Error::Domain(_))));
    }

    #[test]
    fn gradients_vanish_when_target_equals_scores() {
        let z = m(&[&[0.1, 0.2], &[1.0, -1.0]]);
        let c = m(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let s = soft_assign(&z, &c, 1.0).unwrap();
        assert!(grad_features(&z, &c, &s, &s, 1.0).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(grad_centers(&z, &c, &s, &s, 1.0).unwrap().data().iter().all(|&g| g == 0.0));
        let c1 = m(&[&[0.3, 0.3]]);
        let s1 = soft_assign(&z, &c1, 1.0).unwrap();
        assert!(grad_features(&z, &c1, &s1, &s1, 1.0).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in [1.0, 0.5, 3.0] {
            let z = Matrix::from_vec(5, 4, (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let c = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let r = boost_target(&soft_assign(&z, &c, v).unwrap(), 2.0, NormMode::BoostedSum).unwrap();
            let mut probe = KlProbe { z, centers: c, r, v };
            let report = grad_check(&mut probe, 1e-5, 1e-10, None);
            assert!(report.passes(1e-6), "{report:?}");
        }
    }

    #[test]
    fn hard_assignment_ties_go_low() {
        assert_eq!(hard_assign(&m(&[&[0.8, 0.2], &[0.5, 0.5]])), vec![0, 0]);
        assert_eq!(hard_assign(&m(&[&[0.1, 0.45, 0.45], &[0.2, 0.3, 0.5]])), vec![1, 2]);
    }

    #[test]
    fn norm_modes_parse() {
        for mode in NormMode::ALL {
            assert_eq!(mode.name().parse::<NormMode>().unwrap(), mode);
        }
        assert!("dec".parse::<NormMode>().is_err());
    }
}
