//! The DBC head against independent reference computations: direct
//! transcriptions of the soft assignment and target formulas, central
//! differences of the composed loss, and the translation-invariance
//! identity of the gradients.

use dbc_core::dbc::{boost_target, grad_centers, grad_features, hard_assign, kl_loss, soft_assign, KlProbe, NormMode};
use dbc_core::tensor::grad_check;
use dbc_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Student-t scores straight from the definition, without log-space tricks.
fn naive_soft(z: &Matrix<f64>, mu: &Matrix<f64>, v: f64) -> Vec<Vec<f64>> {
    z.iter_rows()
        .map(|zi| {
            let q: Vec<f64> = mu
                .iter_rows()
                .map(|mj| {
                    let d2: f64 = zi.iter().zip(mj).map(|(a, b)| (a - b) * (a - b)).sum();
                    (1.0 + d2 / v).powf(-(v + 1.0) / 2.0)
                })
                .collect();
            let total: f64 = q.iter().sum();
            q.into_iter().map(|x| x / total).collect()
        })
        .collect()
}

fn naive_target(s: &[Vec<f64>], alpha: f64, mode: NormMode) -> Vec<Vec<f64>> {
    let k = s[0].len();
    let n: Vec<f64> = (0..k)
        .map(|j| match mode {
            NormMode::Constant => 1.0,
            NormMode::ScoreSum => s.iter().map(|r| r[j]).sum(),
            NormMode::BoostedSum => s.iter().map(|r| r[j].powf(alpha)).sum(),
        })
        .collect();
    s.iter()
        .map(|r| {
            let w: Vec<f64> = (0..k).map(|j| r[j].powf(alpha) / n[j]).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        })
        .collect()
}

/// A random instance with the target taken from a second, unrelated set of
/// scores so the gradient is far from zero.
fn instance(seed: u64, m: usize, k: usize, d: usize, v: f64) -> KlProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random(m, d, 2.0, &mut rng);
    let centers = random(k, d, 2.0, &mut rng);
    let other = soft_assign(&random(m, d, 2.0, &mut rng), &centers, v).unwrap();
    let r = boost_target(&other, 2.0, NormMode::BoostedSum).unwrap();
    KlProbe { z, centers, r, v }
}

#[test]
fn soft_assignment_matches_the_definition() {
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = [1.0, 0.5, 3.0, 10.0][seed as usize % 4];
        let z = random(7, 3, 3.0, &mut rng);
        let mu = random(4, 3, 3.0, &mut rng);
        let s = soft_assign(&z, &mu, v).unwrap();
        for (i, row) in naive_soft(&z, &mu, v).iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                assert!((s.get(i, j) - want).abs() < 1e-12, "seed {seed} ({i},{j})");
            }
        }
    }
}

#[test]
fn boosted_target_matches_the_definition() {
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let z = random(9, 2, 2.0, &mut rng);
        let mu = random(3, 2, 2.0, &mut rng);
        let s = soft_assign(&z, &mu, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = s.iter_rows().map(<[f64]>::to_vec).collect();
        for alpha in [1.5, 2.0, 4.0] {
            for mode in NormMode::ALL {
                let r = boost_target(&s, alpha, mode).unwrap();
                for (i, row) in naive_target(&rows, alpha, mode).iter().enumerate() {
                    for (j, &want) in row.iter().enumerate() {
                        assert!((r.get(i, j) - want).abs() < 1e-12, "{mode} alpha {alpha}");
                    }
                }
            }
        }
    }
}

#[test]
fn kl_loss_matches_the_definition() {
    let r = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.0, 1.0]]).unwrap();
    let s = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
    let want = 0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln() + (1.0f64 / 0.75).ln();
    assert!((kl_loss(&r, &s).unwrap() - want).abs() < 1e-15);
    assert_eq!(kl_loss(&s, &s).unwrap(), 0.0);
}

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..30 {
        for v in [1.0, 0.5, 2.5] {
            let mut probe = instance(seed, 5, 3, 4, v);
            // Round-off in the loss is ~1e-16, so a 1e-6 step resolves
            // gradient entries down to ~1e-5 at this relative tolerance.
            let report = grad_check(&mut probe, 1e-6, 1e-8, None);
            assert!(report.passes(1e-5), "seed {seed} v {v}: {:?}", report.groups);
            assert_eq!(report.checked, 5 * 4 + 3 * 4);
        }
    }
}

#[test]
fn gradients_cancel_under_joint_translation() {
    // L depends only on z_i - mu_j, so shifting everything by the same
    // vector leaves it unchanged: sum_i dL/dz_i + sum_j dL/dmu_j = 0.
    for seed in 0..30 {
        let p = instance(seed, 5, 3, 4, 1.0);
        let s = soft_assign(&p.z, &p.centers, p.v).unwrap();
        let gz = grad_features(&p.z, &p.centers, &s, &p.r, p.v).unwrap();
        let gm = grad_centers(&p.z, &p.centers, &s, &p.r, p.v).unwrap();
        let col_sum = |g: &Matrix<f64>| (0..4).map(|c| g.iter_rows().map(|r| r[c]).sum::<f64>()).collect::<Vec<_>>();
        let (a, b) = (col_sum(&gz), col_sum(&gm));
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let total: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert!(norm(&total) < 1e-10 * norm(&a).max(1e-300), "seed {seed}: {total:?} vs {a:?}");
    }
}

#[test]
fn hard_assignment_is_the_nearest_center() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let z = random(30, 3, 4.0, &mut rng);
        let mu = random(5, 3, 4.0, &mut rng);
        let labels = hard_assign(&soft_assign(&z, &mu, 1.0).unwrap());
        for (i, zi) in z.iter_rows().enumerate() {
            let d: Vec<f64> = mu.iter_rows().map(|m| zi.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let best = (0..5).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
            assert_eq!(labels[i], best);
        }
    }
}
