mod common;

use approx::assert_relative_eq;
use common::{gaussian_matrix, rng, uniform_points};
use koopman_rkhs::eigensolve::{EigenOptions, top_eigenpairs};
use koopman_rkhs::kernel::{GramOperator, KernelSpec, bandwidth_grid, tune_bandwidth};
use koopman_rkhs::points::PointSet;
use proptest::prelude::*;

fn markov(points: PointSet, epsilon: f64) -> GramOperator {
    GramOperator::new(points, KernelSpec::MarkovGaussian { epsilon }, usize::MAX).unwrap()
}

#[test]
fn two_point_markov_closed_form() {
    for d2 in [0.01f64, 0.3, 1.0, 4.0] {
        let epsilon = 0.7;
        let a: f64 = (-d2 / epsilon).exp();
        let pts = PointSet::from_rows(&[[0.0], [d2.sqrt()]]).unwrap();
        let g = markov(pts, epsilon);
        let norm = g.normalization().unwrap();
        for i in 0..2 {
            assert_relative_eq!(norm.rho[i], (1.0 + a) / 2.0, max_relative = 1e-14);
            assert_relative_eq!(norm.sigma[i], 1.0, max_relative = 1e-14);
        }
        assert_relative_eq!(g.kernel_entry(0, 1), 2.0 * a / (1.0 + a), max_relative = 1e-14);
        assert_relative_eq!(g.kernel_entry(0, 0), 2.0 / (1.0 + a), max_relative = 1e-14);
        let basis = top_eigenpairs(&g, 2, &EigenOptions::default()).unwrap();
        assert_relative_eq!(basis.lambdas[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(basis.lambdas[1], (1.0 - a) / (1.0 + a), max_relative = 1e-12);
    }
}

#[test]
fn dense_and_matrix_free_agree() {
    let mut r = rng(3);
    let pts = uniform_points(&mut r, 300, 3);
    let f: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
    for spec in [
        KernelSpec::Gaussian { epsilon: 0.2 },
        KernelSpec::MarkovGaussian { epsilon: 0.2 },
        KernelSpec::Covariance,
    ] {
        let dense = GramOperator::new(pts.clone(), spec, usize::MAX).unwrap();
        let free = GramOperator::new(pts.clone(), spec, 0).unwrap();
        let a = dense.apply(&f).unwrap();
        let b = free.apply(&f).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()), "{spec:?}: {x} vs {y}");
        }
    }
}

#[test]
fn tuned_bandwidth_is_on_the_grid_and_near_exact_argmax() {
    let mut r = rng(11);
    let pts = uniform_points(&mut r, 200, 2);
    let grid = bandwidth_grid();
    let eps = tune_bandwidth(&pts).unwrap();
    assert!(grid.iter().any(|&g| g.exp2() == eps));

    // Exact sum over all pairs, then the maximal log-log slope.
    let n = pts.len() as f64;
    let d2: Vec<f64> = (0..pts.len())
        .flat_map(|i| (0..pts.len()).map(move |j| (i, j)))
        .map(|(i, j)| {
            pts.row(i)
                .iter()
                .zip(pts.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    let s: Vec<f64> = grid
        .iter()
        .map(|&e| e.exp2())
        .map(|e| d2.iter().map(|d| (-d / e).exp()).sum::<f64>() / (n * n))
        .collect();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 1..grid.len() - 1 {
        let slope = (s[i + 1].ln() - s[i - 1].ln()) / (grid[i + 1] - grid[i - 1]);
        if slope > best.0 {
            best = (slope, grid[i].exp2());
        }
    }
    let step = 2f64.powf(0.25);
    assert!(
        eps / best.1 <= step * 1.000001 && best.1 / eps <= step * 1.000001,
        "tuned {eps}, exact argmax {}",
        best.1
    );
}

proptest! {
    #![proptest_config(common::config(24))]

    #[test]
    fn gaussian_gram_is_symmetric_and_positive_definite(
        seed in 0u64..1000, n in 4usize..40, dim in 1usize..4, epsilon in 0.005f64..0.05,
    ) {
        let mut r = rng(seed);
        let pts = uniform_points(&mut r, n, dim);
        prop_assume!(common::min_separation_sq(&pts) > 1e-3);
        let g = GramOperator::new(pts.clone(), KernelSpec::Gaussian { epsilon }, usize::MAX).unwrap();
        let k = gaussian_matrix(&pts, epsilon);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(g.kernel_entry(i, j), g.kernel_entry(j, i));
                prop_assert!((g.kernel_entry(i, j) - k[i][j]).abs() <= 1e-15);
            }
        }
        // Cholesky succeeds only for positive definite matrices.
        let ones = vec![num_complex::Complex64::new(1.0, 0.0); n];
        let q = common::inverse_quadratic_form(&k, &ones);
        prop_assert!(q > 0.0);
    }

    #[test]
    fn markov_rows_sum_to_one_and_top_eigenvalue_is_one(
        seed in 0u64..1000, n in 2usize..=256, dim in 1usize..4, epsilon in 0.01f64..1.0,
    ) {
        let mut r = rng(seed);
        let pts = uniform_points(&mut r, n, dim);
        let g = markov(pts, epsilon);
        let norm = g.normalization().unwrap().clone();
        for m in 0..n {
            // p(x_m, x_n) = p̂(x_m, x_n) sqrt(ρ_m / σ_m) sqrt(σ_n / ρ_n)
            let left = (norm.rho[m] / norm.sigma[m]).sqrt();
            let s: f64 = (0..n)
                .map(|j| g.kernel_entry(m, j) * left * (norm.sigma[j] / norm.rho[j]).sqrt())
                .sum::<f64>() / n as f64;
            prop_assert!((s - 1.0).abs() <= 1e-12, "row {} sums to {}", m, s);
        }
        let basis = top_eigenpairs(&g, 1.min(n), &EigenOptions::default()).unwrap();
        prop_assert!((basis.lambdas[0] - 1.0).abs() <= 1e-8, "top eigenvalue {}", basis.lambdas[0]);
    }

    #[test]
    fn out_of_sample_row_matches_stored_entries(
        seed in 0u64..1000, n in 2usize..60, epsilon in 0.02f64..1.0, markov_kernel: bool,
    ) {
        let mut r = rng(seed);
        let pts = uniform_points(&mut r, n, 2);
        let spec = if markov_kernel {
            KernelSpec::MarkovGaussian { epsilon }
        } else {
            KernelSpec::Gaussian { epsilon }
        };
        let g = GramOperator::new(pts.clone(), spec, usize::MAX).unwrap();
        for m in 0..n {
            let row = g.kernel_row(pts.row(m)).unwrap();
            for (j, v) in row.iter().enumerate() {
                prop_assert_eq!(v.to_bits(), g.kernel_entry(m, j).to_bits());
            }
        }
    }
}
