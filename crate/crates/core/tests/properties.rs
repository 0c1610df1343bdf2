//! Randomized invariants of the DBC head, the metrics and the batching.

use dbc_core::data::batches;
use dbc_core::dbc::{boost_target, hard_assign, soft_assign, NormMode};
use dbc_core::metrics::{acc, nmi, score_histogram};
use dbc_core::Matrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-50.0f64..50.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn instance() -> impl Strategy<Value = (Matrix<f64>, Matrix<f64>, f64)> {
    (1usize..12, 1usize..6, 1usize..5)
        .prop_flat_map(|(m, k, d)| (matrix(m, d), matrix(k, d), prop_oneof![Just(1.0), 0.2f64..20.0]))
}

fn labels() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..60).prop_flat_map(|m| (prop::collection::vec(0usize..7, m), prop::collection::vec(0usize..5, m)))
}

proptest! {
    #[test]
    fn scores_and_targets_are_row_stochastic((z, mu, v) in instance(), alpha in 1.01f64..8.0) {
        let s = soft_assign(&z, &mu, v).unwrap();
        for row in s.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x > 0.0 && x <= 1.0));
        }
        for mode in NormMode::ALL {
            let r = boost_target(&s, alpha, mode).unwrap();
            for (rr, sr) in r.iter_rows().zip(s.iter_rows()) {
                prop_assert!((rr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(rr.iter().all(|x| x.is_finite() && *x >= 0.0));
                if mode == NormMode::Constant {
                    // Boosting keeps the per-sample ranking.
                    prop_assert_eq!(hard_assign(&Matrix::from_rows(&[rr.to_vec()]).unwrap()), hard_assign(&Matrix::from_rows(&[sr.to_vec()]).unwrap()));
                }
            }
        }
    }

    #[test]
    fn metrics_ignore_cluster_names((pred, truth) in labels(), shift in 1usize..7) {
        let renamed: Vec<usize> = pred.iter().map(|&p| (p + shift) % 7).collect();
        prop_assert!((acc(&pred, &truth).unwrap() - acc(&renamed, &truth).unwrap()).abs() < 1e-12);
        prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&renamed, &truth).unwrap()).abs() < 1e-12);
        let a = acc(&pred, &truth).unwrap();
        let n = nmi(&pred, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&n));
        prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&truth, &pred).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_scores_the_majority_share(truth in prop::collection::vec(0usize..5, 1..60)) {
        let mut counts = [0usize; 5];
        truth.iter().for_each(|&t| counts[t] += 1);
        let majority = *counts.iter().max().unwrap() as f64 / truth.len() as f64;
        let single = vec![0; truth.len()];
        prop_assert!((acc(&single, &truth).unwrap() - majority).abs() < 1e-12);
        prop_assert!(nmi(&single, &truth).unwrap() == 0.0);
    }

    #[test]
    fn batches_partition_every_epoch(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..1000) {
        let b = batches(n, bs, seed, epoch);
        prop_assert_eq!(b.len(), n.div_ceil(bs));
        prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(b, batches(n, bs, seed, epoch));
    }

    #[test]
    fn histogram_counts_every_sample((z, mu, v) in instance(), bins in 2usize..20) {
        let s = soft_assign(&z, &mu, v).unwrap();
        let h = score_histogram(&s, 0, bins).unwrap();
        prop_assert_eq!(h.total(), z.rows());
        prop_assert_eq!(h.edges.len(), bins + 1);
    }
}
