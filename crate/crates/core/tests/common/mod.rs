#![allow(dead_code)]

use std::f64::consts::TAU;

use koopman_rkhs::points::PointSet;
use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> PointSet {
    let data = (0..n * dim).map(|_| rng.random::<f64>()).collect();
    PointSet::from_flat(dim, data).unwrap()
}

/// Smallest pairwise squared distance.
pub fn min_separation_sq(points: &PointSet) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in 0..i {
            let d: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d);
        }
    }
    best
}

pub fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        .collect()
}

/// Plain Gaussian kernel matrix `exp(-|x - y|² / ε)`, row-major.
pub fn gaussian_matrix(points: &PointSet, epsilon: f64) -> Vec<Vec<f64>> {
    let n = points.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let d: f64 = points
                        .row(i)
                        .iter()
                        .zip(points.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (-d / epsilon).exp()
                })
                .collect()
        })
        .collect()
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn cholesky_solve(a: &[Vec<f64>], b: &[Complex64]) -> Vec<Complex64> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                assert!(s > 0.0, "matrix is not positive definite");
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= y[k] * l[i][k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= x[k] * l[k][i];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// `f^H A⁻¹ f` for SPD `A`.
pub fn inverse_quadratic_form(a: &[Vec<f64>], f: &[Complex64]) -> f64 {
    let x = cholesky_solve(a, f);
    f.iter().zip(&x).map(|(fi, xi)| (fi.conj() * xi).re).sum()
}

/// `N⁻¹ Σ_n e^{-iω n Δt} a_n` summed directly.
pub fn direct_coefficient(a: &[f64], omega: f64, dt: f64) -> Complex64 {
    let n = a.len();
    let mut s = Complex64::new(0.0, 0.0);
    for (k, v) in a.iter().enumerate() {
        s += Complex64::from_polar(*v, -omega * k as f64 * dt);
    }
    s / n as f64
}

/// Grid frequencies `2πr / (N Δt)` listed independently of the library.
pub fn grid_omegas(n: usize, dt: f64) -> Vec<f64> {
    let r0 = -(n as i64 / 2);
    (0..n as i64)
        .map(|i| TAU * (r0 + i) as f64 / (n as f64 * dt))
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub fn config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}
