mod common;

use common::{rng, uniform_points};
use faer::{Mat, Side};
use koopman_rkhs::eigensolve::{EigenOptions, load_basis, save_basis, top_eigenpairs};
use koopman_rkhs::kernel::{GramOperator, KernelSpec};
use koopman_rkhs::rkhs::{FrequencyGrid, extend_frequency, norm_table};
use koopman_rkhs::selection::{SelectionConfig, select_frequencies};
use koopman_rkhs::{Error, points::PointSet};
use proptest::prelude::*;

fn dense_eigenvalues(g: &GramOperator) -> Vec<f64> {
    let n = g.len();
    let m = Mat::from_fn(n, n, |i, j| g.kernel_entry(i, j) / n as f64);
    let eig = m.self_adjoint_eigen(Side::Lower).unwrap();
    let s = eig.S().column_vector();
    let mut v: Vec<f64> = (0..n).map(|i| s[i]).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Noisy samples of a circle in the plane, a stand-in for an orbit.
fn circle(n: usize, seed: u64) -> PointSet {
    let mut r = rng(seed);
    let mut pts = PointSet::new(2);
    for k in 0..n {
        let t = 0.05 * k as f64;
        let jitter = 1e-3 * (common::random_complex(&mut r, 1)[0].re);
        pts.push(&[t.cos() + jitter, t.sin()]).unwrap();
    }
    pts
}

#[test]
fn iterative_eigenpairs_match_dense_solver() {
    let pts = circle(900, 1);
    for dense_limit in [usize::MAX, 0] {
        let g = GramOperator::new(pts.clone(), KernelSpec::MarkovGaussian { epsilon: 0.05 }, dense_limit)
            .unwrap();
        let basis = top_eigenpairs(&g, 60, &EigenOptions::default()).unwrap();
        let exact = dense_eigenvalues(&g);
        for j in 0..60 {
            assert!(
                (basis.lambdas[j] - exact[j]).abs() <= 1e-10,
                "λ_{j}: {} vs {}",
                basis.lambdas[j],
                exact[j]
            );
        }
        // Columns are orthogonal with squared norm N.
        let n = g.len() as f64;
        for a in 0..60 {
            for b in 0..=a {
                let dot: f64 = basis.phi_col(a).iter().zip(basis.phi_col(b)).map(|(x, y)| x * y).sum();
                let expect = if a == b { n } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-8 * n, "<φ_{a}, φ_{b}> = {dot}");
            }
        }
        assert!(basis.residuals.iter().all(|&r| r <= 1e-10));
    }
}

#[test]
fn same_seed_gives_identical_basis() {
    let pts = circle(700, 2);
    let g = GramOperator::new(pts, KernelSpec::MarkovGaussian { epsilon: 0.05 }, 0).unwrap();
    let opts = EigenOptions::default();
    let a = top_eigenpairs(&g, 40, &opts).unwrap();
    let b = top_eigenpairs(&g, 40, &opts).unwrap();
    assert_eq!(a.lambdas, b.lambdas);
    assert!(a.phi == b.phi);
}

#[test]
fn basis_cache_round_trip_and_mismatch() {
    let pts = circle(200, 3);
    let g = GramOperator::new(pts, KernelSpec::Gaussian { epsilon: 0.1 }, usize::MAX).unwrap();
    let basis = top_eigenpairs(&g, 20, &EigenOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("basis.bin");
    save_basis(&path, &basis, &g.fingerprint()).unwrap();
    let back = load_basis(&path, &g.fingerprint()).unwrap();
    assert_eq!(back.lambdas, basis.lambdas);
    assert_eq!(back.residuals, basis.residuals);
    assert!(back.phi == basis.phi);
    let other = "0".repeat(64);
    assert!(matches!(load_basis(&path, &other), Err(Error::Cache(_))));
}

#[test]
fn nystrom_norm_matches_quadratic_form_of_weights() {
    let mut r = rng(4);
    let pts = uniform_points(&mut r, 40, 2);
    let g = GramOperator::new(pts, KernelSpec::Gaussian { epsilon: 0.02 }, usize::MAX).unwrap();
    let basis = top_eigenpairs(&g, 25, &EigenOptions::default()).unwrap();
    let h = extend_frequency(&basis, 3.0, 0.1, 25).unwrap();
    // ‖h‖² = N⁻² c^H K c
    let n = g.len();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += (h.weights[i].conj() * h.weights[j]).re * g.kernel_entry(i, j);
        }
    }
    q /= (n * n) as f64;
    assert!(common::rel_err(h.rkhs_norm_sq, q) <= 1e-9, "{} vs {q}", h.rkhs_norm_sq);
}

proptest! {
    #![proptest_config(common::config(16))]

    #[test]
    fn iterative_eigenvalues_match_dense_for_any_size(
        seed in 0u64..1000, n in 20usize..200, frac in 0.05f64..0.45, epsilon in 0.01f64..0.5,
        matrix_free: bool,
    ) {
        let mut r = rng(seed);
        let pts = uniform_points(&mut r, n, 2);
        let limit = if matrix_free { 0 } else { usize::MAX };
        let g = GramOperator::new(pts, KernelSpec::MarkovGaussian { epsilon }, limit).unwrap();
        let l = ((n as f64 * frac) as usize).max(1);
        let basis = top_eigenpairs(&g, l, &EigenOptions { seed, ..Default::default() }).unwrap();
        let exact = dense_eigenvalues(&g);
        for j in 0..basis.l() {
            prop_assert!((basis.lambdas[j] - exact[j]).abs() <= 1e-9, "λ_{}: {} vs {}", j, basis.lambdas[j], exact[j]);
        }
    }

    #[test]
    fn norms_are_periodic_in_frequency(seed in 0u64..1000, n in 8usize..80) {
        let mut r = rng(seed);
        let pts = uniform_points(&mut r, n, 2);
        let g = GramOperator::new(pts, KernelSpec::Gaussian { epsilon: 0.05 }, usize::MAX).unwrap();
        let basis = top_eigenpairs(&g, n.min(10), &EigenOptions::default()).unwrap();
        let dt = 0.1;
        let grid = FrequencyGrid::new(n, dt).unwrap();
        let table = norm_table(&basis, &grid, &[basis.l()]).unwrap();
        // f_ω and f_{ω + 2π/Δt} agree at every sample, so their norms do too.
        let row = n / 3;
        let omega = grid.omega(row);
        let a = extend_frequency(&basis, omega, dt, basis.l()).unwrap();
        let b = extend_frequency(&basis, omega + std::f64::consts::TAU / dt, dt, basis.l()).unwrap();
        prop_assert!(common::rel_err(a.rkhs_norm_sq, b.rkhs_norm_sq) <= 1e-9);
        prop_assert!(common::rel_err(a.rkhs_norm_sq, table.w[0][row]) <= 1e-9);
    }

    #[test]
    fn selection_shrinks_as_thresholds_tighten(
        seed in 0u64..1000, n in 20usize..80, d0a in 0.1f64..5.0, d0b in 0.1f64..5.0,
        d1a in 0.05f64..3.0, d1b in 0.05f64..3.0,
    ) {
        let mut r = rng(seed);
        let pts = uniform_points(&mut r, n, 2);
        let g = GramOperator::new(pts, KernelSpec::MarkovGaussian { epsilon: 0.05 }, usize::MAX).unwrap();
        let basis = top_eigenpairs(&g, 15, &EigenOptions::default()).unwrap();
        let grid = FrequencyGrid::new(n, 0.1).unwrap();
        let table = norm_table(&basis, &grid, &[5, 15]).unwrap();
        let loose = SelectionConfig { l0: 5, l1: 15, delta0: d0a.min(d0b), delta1: d1a.max(d1b) };
        let tight = SelectionConfig { l0: 5, l1: 15, delta0: d0a.max(d0b), delta1: d1a.min(d1b) };
        let big: Vec<usize> = select_frequencies(&table, &loose).unwrap().iter().map(|c| c.row).collect();
        let small = select_frequencies(&table, &tight).unwrap();
        for c in &small {
            prop_assert!(big.contains(&c.row));
        }
        for w in small.windows(2) {
            prop_assert!(w[0].w_l1 <= w[1].w_l1 + 1e-15);
        }
    }
}
