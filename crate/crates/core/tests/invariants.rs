use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamda::assoc::{round_trip, transition_matrices, visit_probs, EqualityMatrix};
use streamda::estimate::ClassDistribution;
use streamda::gradcheck::{run_all, SuiteKind, OP_TOL};
use streamda::numgrad::{Axis, Graph, Matrix};
use streamda::sampling::{kl_divergence, largest_remainder_counts, make_divergent_distribution};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-spread..spread))
}

fn random_simplex(rng: &mut ChaCha8Rng, c: usize) -> ClassDistribution {
    let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
    ClassDistribution::from_weights(&w).unwrap()
}

#[test]
fn every_op_passes_finite_differences_over_100_seeds() {
    let results = run_all(100, 2024, None).unwrap();
    let ops: Vec<_> = results.iter().filter(|r| r.kind == SuiteKind::Op).collect();
    assert_eq!(ops.len(), 14);
    for r in ops {
        assert_eq!(r.tolerance, OP_TOL);
        assert!(r.passed, "{} max error {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn transition_and_visit_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n_s = rng.random_range(1..=12);
        let n_t = rng.random_range(1..=12);
        let spread = [0.1, 3.0, 40.0][rng.random_range(0..3)];
        let a = random_matrix(&mut rng, n_s, n_t, spread);
        let (pst, pts) = transition_matrices(&a).unwrap();
        for p in [pst.probs(), pts.probs()] {
            for i in 0..p.rows() {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            }
        }
        let mut g = Graph::new();
        let pst_n = g.constant(pst.probs().clone());
        let vp = visit_probs(&mut g, pst_n).unwrap();
        let total = g.value(vp).data().iter().sum::<f64>();
        assert!((total - 1.0).abs() < 1e-9, "visit total {total}");

        let pts_n = g.constant(pts.probs().clone());
        let rt = round_trip(&mut g, pst_n, pts_n).unwrap();
        for i in 0..n_s {
            let s: f64 = g.value(rt).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn equality_rows_are_exact_reciprocal_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = rng.random_range(1..=16);
        let c = rng.random_range(1..=5);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let e = EqualityMatrix::from_classes(&classes);
        for i in 0..n {
            let count = classes.iter().filter(|&&k| k == classes[i]).count();
            let row = e.values().row(i);
            let nonzero: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            // the row is `count` copies of 1/count: a rational sum of exactly one
            assert_eq!(nonzero.len(), count);
            assert!(nonzero.iter().all(|&v| v == 1.0 / count as f64));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn kl_is_nonnegative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let c = rng.random_range(2..=10);
        let p = random_simplex(&mut rng, c);
        let q = random_simplex(&mut rng, c);
        assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
    }
}

#[test]
fn divergent_distributions_hit_requested_kl() {
    for c in 2..=10 {
        for &kl in &[0.05, 0.2, 0.4] {
            for seed in 0..50 {
                let t = make_divergent_distribution(c, kl, seed).unwrap();
                let achieved =
                    kl_divergence(&ClassDistribution::uniform(c), &t.distribution).unwrap();
                assert!(
                    (achieved - kl).abs() < 1e-3,
                    "C={c} kl={kl} seed={seed}: {achieved}"
                );
                assert_eq!(achieved, t.achieved_kl);
            }
        }
    }
}

fn mean_over(g: &mut Graph, m: &Matrix, axis: Axis) -> Matrix {
    let n = g.constant(m.clone());
    let r = g.mean(n, axis).unwrap();
    g.value(r).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn largest_remainder_sums_to_n(weights in prop::collection::vec(0.01f64..1.0, 1..12), n in 0usize..500) {
        let dist = ClassDistribution::from_weights(&weights).unwrap();
        let counts = largest_remainder_counts(&dist, n);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, p) in counts.iter().zip(dist.probs()) {
            prop_assert!((*c as f64 - p * n as f64).abs() < 1.0);
        }
    }

    #[test]
    fn transpose_is_an_involution(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, rows, cols, 5.0);
        prop_assert_eq!(m.transpose().transpose(), m.clone());
        let mut g = Graph::new();
        let by_rows = mean_over(&mut g, &m, Axis::Rows);
        let by_cols = mean_over(&mut g, &m.transpose(), Axis::Cols);
        prop_assert!(by_rows.transpose().max_abs_diff(&by_cols) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..8, cols in 1usize..8, spread in 0.1f64..200.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, rows, cols, spread);
        let (pst, _) = transition_matrices(&m).unwrap();
        for i in 0..rows {
            prop_assert!(pst.probs().row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
