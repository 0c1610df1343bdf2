//! The idealized learning chain `S -> R = S' -> R' -> ...`: every step
//! replaces each row by its normalized `alpha`-th power. Uniform rows are
//! fixed points; a row with a unique maximum converges to the indicator of
//! that maximum, with pairwise ratios following `(s_j / s_l)^(alpha^t)`.
//!
//! Rows are carried as logarithms so that large `alpha^t` cannot underflow;
//! probabilities below `exp(-700)` read back as exactly 0 and raise a flag.

use crate::error::{config_err, Result};

/// Log-probabilities below this read back as 0.
pub const LOG_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Per-row log-probabilities, each row normalized (`logsumexp = 0`).
    log_rows: Vec<Vec<f64>>,
    pub t: usize,
    pub alpha: f64,
}

fn log_normalize(row: &mut [f64]) {
    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|&l| (l - top).exp()).sum::<f64>().ln();
    // Shifting by `top` first keeps tied entries bit-identical, so uniform
    // rows stay exactly uniform.
    row.iter_mut().for_each(|l| *l = (*l - top) - log_sum);
}

impl ChainState {
    /// Starts a chain from row-stochastic rows (rows are renormalized).
    pub fn new(rows: &[Vec<f64>], alpha: f64) -> Result<Self> {
        if !(alpha > 1.0) || !alpha.is_finite() {
            return config_err(format!("boosting factor must exceed 1, got {alpha}"));
        }
        if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
            return config_err("chain needs at least one non-empty row");
        }
        let mut log_rows = Vec::with_capacity(rows.len());
        for r in rows {
            if r.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || r.iter().sum::<f64>() <= 0.0 {
                return config_err("chain rows must be non-negative with positive mass");
            }
            let mut l: Vec<f64> = r.iter().map(|&x| x.ln()).collect();
            log_normalize(&mut l);
            log_rows.push(l);
        }
        Ok(Self { log_rows, t: 0, alpha })
    }

    pub fn log_rows(&self) -> &[Vec<f64>] {
        &self.log_rows
    }

    /// Probabilities, with entries below `exp(-700)` clamped to 0.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.log_rows
            .iter()
            .map(|r| {
                let top = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = r.iter().map(|&l| if l < LOG_FLOOR { 0.0 } else { (l - top).exp() }).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            })
            .collect()
    }

    /// Whether any entry is currently clamped to 0 by [`ChainState::rows`].
    pub fn clamped(&self) -> bool {
        self.log_rows.iter().flatten().any(|&l| l < LOG_FLOOR)
    }
}

/// One step: `s'_ij = s_ij^alpha / sum_j s_ij^alpha`.
pub fn chain_step(state: &ChainState) -> ChainState {
    let log_rows = state
        .log_rows
        .iter()
        .map(|r| {
            let mut next: Vec<f64> = r.iter().map(|&l| state.alpha * l).collect();
            log_normalize(&mut next);
            next
        })
        .collect();
    ChainState { log_rows, t: state.t + 1, alpha: state.alpha }
}

/// Predicted `ln(s_j^(t) / s_l^(t))` from the starting row:
/// `alpha^t · ln(s_j^(0) / s_l^(0))`.
pub fn log_ratio_law(initial: &[f64], j: usize, l: usize, alpha: f64, t: usize) -> f64 {
    alpha.powi(t as i32) * (initial[j].ln() - initial[l].ln())
}

/// Where a row ends up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Limit {
    /// Every entry equal; the row never moves.
    Uniform,
    /// Unique maximum at `index`; `steps` is the first `t` with
    /// `s_index > 1 - tol`, or `None` if `max_steps` ran out first.
    Indicator { index: usize, steps: Option<usize> },
    /// Several tied maxima: mass spreads uniformly over them.
    TiedMaxima { indices_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    /// States `t = 0..=steps_taken`.
    pub trajectory: Vec<ChainState>,
    /// One classification per row.
    pub limits: Vec<Limit>,
    pub clamped: bool,
}

impl ChainRun {
    /// CSV with header `t,r{i}_s{j},...`, one line per step.
    pub fn to_csv(&self) -> String {
        let first = &self.trajectory[0];
        let mut header = vec!["t".to_string()];
        for (i, r) in first.log_rows().iter().enumerate() {
            header.extend((0..r.len()).map(|j| format!("r{i}_s{j}")));
        }
        let mut out = header.join(",");
        out.push('\n');
        for st in &self.trajectory {
            let mut line = vec![st.t.to_string()];
            line.extend(st.rows().into_iter().flatten().map(|x| format!("{x:.17e}")));
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Runs `max_steps` steps and classifies each row's limit.
pub fn chain_run(initial: &ChainState, max_steps: usize, tol: f64) -> Result<ChainRun> {
    if max_steps == 0 {
        return config_err("chain_run needs at least one step");
    }
    if !(tol > 0.0) {
        return config_err("tolerance must be positive");
    }
    let mut trajectory = vec![initial.clone()];
    for _ in 0..max_steps {
        let next = chain_step(trajectory.last().expect("non-empty"));
        trajectory.push(next);
    }
    let limits = initial
        .log_rows()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let at_top: Vec<usize> = (0..row.len()).filter(|&j| row[j] == top).collect();
            if at_top.len() == row.len() {
                Limit::Uniform
            } else if at_top.len() > 1 {
                Limit::TiedMaxima { indices_len: at_top.len() }
            } else {
                let index = at_top[0];
                let steps = trajectory.iter().position(|st| st.log_rows()[i][index].exp() > 1.0 - tol);
                Limit::Indicator { index, steps }
            }
        })
        .collect();
    let clamped = trajectory.iter().any(ChainState::clamped);
    Ok(ChainRun { trajectory, limits, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rows_are_fixed_points() {
        let s = ChainState::new(&[vec![0.5, 0.5], vec![0.25; 4]], 3.0).unwrap();
        let run = chain_run(&s, 100, 1e-6).unwrap();
        assert_eq!(run.trajectory.last().unwrap().rows(), vec![vec![0.5, 0.5], vec![0.25; 4]]);
        assert_eq!(run.limits, vec![Limit::Uniform, Limit::Uniform]);
    }

    #[test]
    fn hand_evaluated_step() {
        let s = chain_step(&ChainState::new(&[vec![0.6, 0.4]], 2.0).unwrap());
        let r = &s.rows()[0];
        assert!((r[0] - 0.36 / 0.52).abs() < 1e-15);
        assert!((r[1] - 0.16 / 0.52).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn unique_maximum_converges_and_larger_alpha_is_faster() {
        let steps = |alpha| {
            let run = chain_run(&ChainState::new(&[vec![0.6, 0.4]], alpha).unwrap(), 30, 1e-6).unwrap();
            let last = &run.trajectory.last().unwrap().rows()[0];
            assert!((last[0] - 1.0).abs() < 1e-6 && last[1] < 1e-6);
            match run.limits[0] {
                Limit::Indicator { index: 0, steps: Some(t) } => t,
                other => panic!("{other:?}"),
            }
        };
        assert!(steps(4.0) < steps(2.0));
    }

    #[test]
    fn deep_chains_clamp_and_flag() {
        let run = chain_run(&ChainState::new(&[vec![0.6, 0.4]], 4.0).unwrap(), 20, 1e-6).unwrap();
        assert!(run.clamped);
        assert_eq!(run.trajectory.last().unwrap().rows()[0], vec![1.0, 0.0]);
    }

    #[test]
    fn tied_maxima_are_reported() {
        let run = chain_run(&ChainState::new(&[vec![0.4, 0.4, 0.2]], 2.0).unwrap(), 5, 1e-6).unwrap();
        assert_eq!(run.limits[0], Limit::TiedMaxima { indices_len: 2 });
    }

    #[test]
    fn csv_has_one_line_per_state() {
        let run = chain_run(&ChainState::new(&[vec![0.6, 0.4]], 2.0).unwrap(), 30, 1e-6).unwrap();
        let csv = run.to_csv();
        assert_eq!(csv.lines().count(), 32);
        assert!(csv.starts_with("t,r0_s0,r0_s1\n0,"));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ChainState::new(&[vec![0.5, 0.5]], 1.0).is_err());
        assert!(ChainState::new(&[vec![-0.5, 1.5]], 2.0).is_err());
        assert!(ChainState::new(&[], 2.0).is_err());
    }
}
