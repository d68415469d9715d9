//! Fourier coefficients against the kernel eigenbasis, truncated RKHS norms and
//! Nyström extensions.

use std::f64::consts::TAU;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::eigensolve::SpectralBasis;
use crate::error::{Error, Result};
use crate::kernel::GramOperator;

/// DFT frequencies `ω_r = 2πr / (N Δt)`, `r` running over
/// `-(N-1)/2 ..= (N-1)/2` for odd `N` and `-N/2 ..= N/2 - 1` for even `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub n: usize,
    pub dt: f64,
}

impl FrequencyGrid {
    pub fn new(n: usize, dt: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGrid);
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("sampling interval {dt} is not positive")));
        }
        Ok(Self { n, dt })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn r_min(&self) -> i64 {
        -(self.n as i64 / 2)
    }

    /// Integer index `r` of row `i`.
    pub fn r(&self, i: usize) -> i64 {
        self.r_min() + i as i64
    }

    pub fn spacing(&self) -> f64 {
        TAU / (self.n as f64 * self.dt)
    }

    pub fn omega(&self, i: usize) -> f64 {
        TAU * self.r(i) as f64 / (self.n as f64 * self.dt)
    }

    pub fn omegas(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.omega(i)).collect()
    }

    pub fn nyquist(&self) -> f64 {
        std::f64::consts::PI / self.dt
    }

    /// FFT output bin holding row `i`.
    fn bin(&self, i: usize) -> usize {
        self.r(i).rem_euclid(self.n as i64) as usize
    }

    /// Row whose frequency is closest to `omega`.
    pub fn nearest(&self, omega: f64) -> usize {
        let r = (omega / self.spacing()).round() as i64;
        (r - self.r_min()).clamp(0, self.n as i64 - 1) as usize
    }
}

/// Samples `exp(i ω n Δt)`, `n = 0..N`.
pub fn fourier_function(omega: f64, n: usize, dt: f64) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, omega * k as f64 * dt))
        .collect()
}

/// Normalized DFT `b_r = N⁻¹ Σ_n e^{-2πinr/N} a_n` of each input column,
/// rows in grid order.
pub(crate) fn dft_columns<'a, I>(grid: &FrequencyGrid, columns: I) -> Vec<Vec<Complex64>>
where
    I: IndexedParallelIterator<Item = Vec<Complex64>> + 'a,
{
    let n = grid.n;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let inv_n = 1.0 / n as f64;
    columns
        .map(|mut buf| {
            fft.process(&mut buf);
            (0..n).map(|i| buf[grid.bin(i)] * inv_n).collect()
        })
        .collect()
}

/// Columns `j` of `A = Z Λ^{-1/2} Φ`: entry `(r, j)` is
/// `N⁻¹ Σ_n e^{-iω_r n Δt} λ_j^{-1/2} φ_j(x_n)`.
#[derive(Debug, Clone)]
pub struct CoefficientMatrix {
    pub columns: Vec<Vec<Complex64>>,
}

impl CoefficientMatrix {
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.columns[col][row]
    }
}

pub fn coeffs_fft(basis: &SpectralBasis, grid: &FrequencyGrid) -> Result<CoefficientMatrix> {
    check_grid(basis, grid)?;
    let cols = (0..basis.l()).into_par_iter().map(|j| {
        let s = basis.lambdas[j].powf(-0.5);
        basis
            .phi_col(j)
            .iter()
            .map(|&v| Complex64::new(v * s, 0.0))
            .collect()
    });
    Ok(CoefficientMatrix {
        columns: dft_columns(grid, cols),
    })
}

fn check_grid(basis: &SpectralBasis, grid: &FrequencyGrid) -> Result<()> {
    if basis.n() != grid.n {
        return Err(Error::DimensionMismatch {
            expected: basis.n(),
            got: grid.n,
        });
    }
    Ok(())
}

/// Truncated squared RKHS norms `w_{N,l}(f_ω) = Σ_{j<l} |⟨φ_j, f_ω⟩|² / λ_j`
/// on the DFT grid.
#[derive(Debug, Clone)]
pub struct NormTable {
    pub grid: FrequencyGrid,
    pub truncations: Vec<usize>,
    /// `w[t][i]` for truncation `truncations[t]` and grid row `i`.
    pub w: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
    /// `|⟨φ_j, f_{ω_i}⟩|²` stored by eigenfunction: `coeff_power[j][i]`.
    coeff_power: Vec<Vec<f64>>,
}

impl NormTable {
    pub fn l_max(&self) -> usize {
        self.lambdas.len()
    }

    pub fn coeff_power(&self, row: usize, j: usize) -> f64 {
        self.coeff_power[j][row]
    }

    /// `w_{N,l}` over the grid for any `l`, recomputed from the cached coefficients.
    pub fn w_for(&self, l: usize) -> Vec<f64> {
        if let Some(t) = self.truncations.iter().position(|&x| x == l) {
            return self.w[t].clone();
        }
        let mut w = vec![0.0; self.grid.n];
        for (cp, lam) in self.coeff_power.iter().zip(&self.lambdas).take(l) {
            for (acc, c) in w.iter_mut().zip(cp) {
                *acc += c / lam;
            }
        }
        w
    }

    /// `w_{N,l}` at one grid row.
    pub fn w_at(&self, row: usize, l: usize) -> f64 {
        let mut s = 0.0;
        for (cp, lam) in self.coeff_power.iter().zip(&self.lambdas).take(l) {
            s += cp[row] / lam;
        }
        s
    }

    pub fn truncation_index(&self, l: usize) -> Option<usize> {
        self.truncations.iter().position(|&x| x == l)
    }
}

pub fn norm_table(
    basis: &SpectralBasis,
    grid: &FrequencyGrid,
    truncations: &[usize],
) -> Result<NormTable> {
    check_grid(basis, grid)?;
    if let Some(&l) = truncations.iter().find(|&&l| l > basis.l()) {
        warn!(
            "truncation {l} exceeds the {} available eigenpairs; the missing terms are dropped",
            basis.l()
        );
    }
    let cols = (0..basis.l()).into_par_iter().map(|j| {
        basis
            .phi_col(j)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect()
    });
    let coeff_power: Vec<Vec<f64>> = dft_columns(grid, cols)
        .into_iter()
        .map(|c| c.iter().map(|z| z.norm_sqr()).collect())
        .collect();
    let mut table = NormTable {
        grid: *grid,
        truncations: Vec::new(),
        w: Vec::new(),
        lambdas: basis.lambdas.clone(),
        coeff_power,
    };
    let w = truncations.iter().map(|&l| table.w_for(l)).collect();
    table.truncations = truncations.to_vec();
    table.w = w;
    Ok(table)
}

/// Inner products `⟨φ_j, f⟩_μ = N⁻¹ Σ_n φ_j(x_n) f(x_n)` for `j < l`.
pub fn expansion_coefficients(basis: &SpectralBasis, f: &[Complex64], l: usize) -> Vec<Complex64> {
    let inv_n = 1.0 / basis.n() as f64;
    (0..l.min(basis.l()))
        .into_par_iter()
        .map(|j| {
            let mut s = Complex64::new(0.0, 0.0);
            for (p, v) in basis.phi_col(j).iter().zip(f) {
                s += v * *p;
            }
            s * inv_n
        })
        .collect()
}

/// An RKHS function `h(x) = N⁻¹ Σ_n k(x, x_n) c_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NystromFunction {
    pub weights: Vec<Complex64>,
    pub omega: Option<f64>,
    pub l: usize,
    pub n: usize,
    pub rkhs_norm_sq: f64,
}

impl NystromFunction {
    pub fn evaluate(&self, gram: &GramOperator, x: &[f64]) -> Result<Complex64> {
        if gram.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: gram.len(),
            });
        }
        let row = gram.kernel_row(x)?;
        Ok(self.combine(&row))
    }

    fn combine(&self, row: &[f64]) -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for (k, c) in row.iter().zip(&self.weights) {
            s += c * *k;
        }
        s / self.n as f64
    }

    /// `h(x_m)` at every sample, evaluated exactly as [`Self::evaluate`] would.
    pub fn sample_values(&self, gram: &GramOperator) -> Result<Vec<Complex64>> {
        let samples = gram.samples();
        (0..samples.len())
            .into_par_iter()
            .map(|m| self.evaluate(gram, samples.row(m)))
            .collect()
    }
}

/// Nyström extension of `f` truncated to the leading `l` eigenfunctions.
pub fn nystrom_extend(basis: &SpectralBasis, f: &[Complex64], l: usize) -> Result<NystromFunction> {
    if f.len() != basis.n() {
        return Err(Error::DimensionMismatch {
            expected: basis.n(),
            got: f.len(),
        });
    }
    if l > basis.l() {
        warn!(
            "extension truncation {l} exceeds the {} available eigenpairs; the missing terms are dropped",
            basis.l()
        );
    }
    let a = expansion_coefficients(basis, f, l);
    let scaled: Vec<Complex64> = a
        .iter()
        .zip(&basis.lambdas)
        .map(|(a, lam)| a / lam)
        .collect();
    let rkhs_norm_sq = a
        .iter()
        .zip(&basis.lambdas)
        .map(|(a, lam)| a.norm_sqr() / lam)
        .sum();
    let n = basis.n();
    let weights = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = Complex64::new(0.0, 0.0);
            for (j, c) in scaled.iter().enumerate() {
                s += c * basis.phi[(i, j)];
            }
            s
        })
        .collect();
    Ok(NystromFunction {
        weights,
        omega: None,
        l: l.min(basis.l()),
        n,
        rkhs_norm_sq,
    })
}

/// Nyström extension of the Fourier function at `omega`.
pub fn extend_frequency(
    basis: &SpectralBasis,
    omega: f64,
    dt: f64,
    l: usize,
) -> Result<NystromFunction> {
    let f = fourier_function(omega, basis.n(), dt);
    let mut h = nystrom_extend(basis, &f, l)?;
    h.omega = Some(omega);
    Ok(h)
}
