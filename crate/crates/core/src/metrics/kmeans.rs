use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{config_err, Result};
use crate::matrix::Matrix;
use crate::tensor::{matmul, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    /// Lloyd stops once the objective improves by less than this fraction.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, restarts: 20, max_iters: 300, tol: 1e-6, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub centers: Matrix<T>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squared distances of the returned labeling.
    pub inertia: f64,
    /// Objective after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub restart: usize,
}

/// Rows per distance block; fixed so results do not depend on the thread
/// count.
const BLOCK: usize = 512;

/// Nearest center (lowest index on ties) and squared distance for each row,
/// via `||x||² - 2 x·c + ||c||²`.
pub fn assign_nearest<T: Real>(x: &Matrix<T>, centers: &Matrix<T>) -> (Vec<usize>, Vec<f64>) {
    let (m, d, k) = (x.rows(), x.cols(), centers.rows());
    assert_eq!(centers.cols(), d, "center dimension");
    let cnorm: Vec<f64> = centers.iter_rows().map(|c| c.iter().map(|v| v.f64() * v.f64()).sum()).collect();
    let blocks: Vec<(Vec<usize>, Vec<f64>)> = x
        .data()
        .par_chunks(BLOCK * d.max(1))
        .map(|chunk| {
            let rows = if d == 0 { chunk.len().min(BLOCK) } else { chunk.len() / d };
            let mut dots = vec![T::zero(); rows * k];
            matmul(rows, d, k, chunk, false, centers.data(), true, T::zero(), &mut dots);
            let mut labels = Vec::with_capacity(rows);
            let mut dist = Vec::with_capacity(rows);
            for r in 0..rows {
                let xr = &chunk[r * d..(r + 1) * d];
                let xnorm: f64 = xr.iter().map(|v| v.f64() * v.f64()).sum();
                let mut best = (0, f64::INFINITY);
                for j in 0..k {
                    let dj = (xnorm - 2.0 * dots[r * k + j].f64() + cnorm[j]).max(0.0);
                    if dj < best.1 {
                        best = (j, dj);
                    }
                }
                labels.push(best.0);
                dist.push(best.1);
            }
            (labels, dist)
        })
        .collect();
    let mut labels = Vec::with_capacity(m);
    let mut dist = Vec::with_capacity(m);
    for (l, d) in blocks {
        labels.extend(l);
        dist.extend(d);
    }
    (labels, dist)
}

fn sq_dist_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.f64() - y.f64()).powi(2)).sum()
}

/// k-means++ seeding: first center uniform, then proportional to the squared
/// distance to the nearest chosen center.
fn seed_plus_plus<T: Real>(x: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let m = x.rows();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut nearest: Vec<f64> = (0..m).into_par_iter().map(|i| sq_dist_f64(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Fewer distinct points than clusters.
            rng.random_range(0..m)
        };
        chosen.push(next);
        let c = x.row(next);
        nearest.par_iter_mut().enumerate().for_each(|(i, n)| *n = n.min(sq_dist_f64(x.row(i), c)));
    }
    x.select_rows(&chosen)
}

/// Means of the assigned rows. A cluster that lost all its points is moved
/// onto the point farthest from its own center, which then counts as taken.
fn update_centers<T: Real>(x: &Matrix<T>, labels: &[usize], dist: &mut [f64], k: usize) -> Matrix<T> {
    let d = x.cols();
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (row, &l) in x.iter_rows().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
            *s += v.f64();
        }
    }
    let mut centers = Matrix::zeros(k, d);
    for j in 0..k {
        if counts[j] == 0 {
            let far = dist
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            dist[far] = 0.0;
            centers.row_mut(j).copy_from_slice(x.row(far));
        } else {
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centers.row_mut(j).iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *c = T::of(s * inv);
            }
        }
    }
    centers
}

/// Lloyd iterations from the given centers.
pub fn lloyd<T: Real>(x: &Matrix<T>, mut centers: Matrix<T>, max_iters: usize, tol: f64) -> KMeansResult<T> {
    let k = centers.rows();
    let mut history = Vec::new();
    loop {
        let (labels, mut dist) = assign_nearest(x, &centers);
        let inertia: f64 = dist.iter().sum();
        let converged = history.last().is_some_and(|&prev: &f64| prev - inertia <= tol * prev);
        history.push(inertia);
        if converged || history.len() >= max_iters.max(1) {
            return KMeansResult { centers, labels, inertia, history, restart: 0 };
        }
        centers = update_centers(x, &labels, &mut dist, k);
    }
}

/// Best-of-restarts k-means with k-means++ seeding. Restart `r` draws from
/// stream `r` of the master seed, so restarts can run in parallel without
/// changing the result.
pub fn kmeans<T: Real>(x: &Matrix<T>, config: &KMeansConfig) -> Result<KMeansResult<T>> {
    let (m, k) = (x.rows(), config.k);
    if k == 0 {
        return config_err("k-means needs k >= 1");
    }
    if m < k {
        return config_err(format!("k-means needs at least k = {k} points, got {m}"));
    }
    if !x.all_finite() {
        return config_err("k-means input contains non-finite values");
    }
    let runs: Vec<KMeansResult<T>> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            let init = seed_plus_plus(x, k, &mut rng);
            KMeansResult { restart: r, ..lloyd(x, init, config.max_iters, config.tol) }
        })
        .collect();
    Ok(runs.into_iter().reduce(|best, r| if r.inertia < best.inertia { r } else { best }).expect("at least one restart"))
}
