//! Harmonic averaging and the covariance-kernel comparison.

use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::eigensolve::{SpectralBasis, finish};
use crate::error::{Error, Result};
use crate::points::PointSet;
use crate::rkhs::{FrequencyGrid, dft_columns};

/// Singular values below this fraction of the largest are treated as zero.
const RANK_RTOL: f64 = 1e-10;

/// A sequence of equal-length complex vectors stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSeries {
    dim: usize,
    data: Vec<Complex64>,
}

impl ComplexSeries {
    pub fn from_flat(dim: usize, data: Vec<Complex64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, n: usize, k: usize) -> Complex64 {
        self.data[n * self.dim + k]
    }

    fn component(&self, k: usize) -> Vec<Complex64> {
        self.data.iter().skip(k).step_by(self.dim).copied().collect()
    }
}

impl From<&PointSet> for ComplexSeries {
    fn from(p: &PointSet) -> Self {
        Self {
            dim: p.dim(),
            data: p.as_flat().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub grid: FrequencyGrid,
    /// `‖N⁻¹ Σ_n e^{-iω_r n Δt} F(x_n)‖²` per grid row.
    pub power: Vec<f64>,
}

fn check_len(series: &ComplexSeries, grid: &FrequencyGrid) -> Result<()> {
    if series.len() != grid.n {
        return Err(Error::DimensionMismatch {
            expected: grid.n,
            got: series.len(),
        });
    }
    Ok(())
}

pub fn harmonic_average(series: &ComplexSeries, grid: &FrequencyGrid) -> Result<PowerSpectrum> {
    check_len(series, grid)?;
    let cols = (0..series.dim()).into_par_iter().map(|k| series.component(k));
    let mut power = vec![0.0; grid.n];
    for c in dft_columns(grid, cols) {
        for (p, z) in power.iter_mut().zip(&c) {
            *p += z.norm_sqr();
        }
    }
    Ok(PowerSpectrum {
        grid: *grid,
        power,
    })
}

/// Spectra from the covariance kernel `k(x, y) = ⟨F(x), F(y)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceNorms {
    pub grid: FrequencyGrid,
    /// Nonzero eigenvalues `λ_j = s_j²` of the covariance Gram operator.
    pub lambdas: Vec<f64>,
    /// `|⟨φ_j, f_{ω_r}⟩|²`, stored as `coeff_power[j][r]`.
    pub coeff_power: Vec<Vec<f64>>,
    /// `Σ_j |⟨φ_j, f_ω⟩|² / λ_j`, the squared RKHS norm at full rank.
    pub w: Vec<f64>,
    /// `Σ_j |⟨φ_j, f_ω⟩|² λ_j`, which reproduces the harmonic-average power.
    pub power: Vec<f64>,
}

impl CovarianceNorms {
    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }
}

/// Eigenpairs of the covariance Gram operator from a thin SVD of the `N × m`
/// data matrix scaled by `N^{-1/2}`.
pub fn covariance_rkhs_norms(series: &ComplexSeries, grid: &FrequencyGrid) -> Result<CovarianceNorms> {
    check_len(series, grid)?;
    let n = series.len();
    let scale = 1.0 / (n as f64).sqrt();
    let d = Mat::from_fn(n, series.dim(), |i, k| series.get(i, k) * scale);
    let svd = d
        .thin_svd()
        .map_err(|e| Error::DegenerateData(format!("SVD failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let u = svd.U();
    let s_max = (0..s.nrows()).map(|j| s[j].re).fold(0.0, f64::max);
    if !(s_max > 0.0) {
        return Err(Error::DegenerateData("the series is identically zero".into()));
    }
    let kept: Vec<usize> = (0..s.nrows())
        .filter(|&j| s[j].re > RANK_RTOL * s_max)
        .collect();
    let lambdas: Vec<f64> = kept.iter().map(|&j| s[j].re * s[j].re).collect();
    let root_n = (n as f64).sqrt();
    let cols = kept
        .par_iter()
        .map(|&j| (0..n).map(|i| u[(i, j)] * root_n).collect::<Vec<_>>());
    let coeff_power: Vec<Vec<f64>> = dft_columns(grid, cols)
        .into_iter()
        .map(|c| c.iter().map(|z| z.norm_sqr()).collect())
        .collect();
    let mut w = vec![0.0; n];
    let mut power = vec![0.0; n];
    for (cp, lam) in coeff_power.iter().zip(&lambdas) {
        for r in 0..n {
            w[r] += cp[r] / lam;
            power[r] += cp[r] * lam;
        }
    }
    Ok(CovarianceNorms {
        grid: *grid,
        lambdas,
        coeff_power,
        w,
        power,
    })
}

/// Eigenbasis of the covariance Gram operator `G = N⁻¹ D Dᵀ` (rows of `D`
/// are the points), obtained from a thin SVD of `D / √N`. Eigenvalues below
/// the floor used by the iterative solver are dropped.
pub fn covariance_basis(points: &PointSet) -> Result<SpectralBasis> {
    let n = points.len();
    let scale = 1.0 / (n as f64).sqrt();
    let d = Mat::from_fn(n, points.dim(), |i, k| points.row(i)[k] * scale);
    let svd = d
        .thin_svd()
        .map_err(|e| Error::DegenerateData(format!("SVD failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let u = svd.U();
    let k = s.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let s_max = s[order[0]];
    if !(s_max > 0.0) {
        return Err(Error::DegenerateData("the data are identically zero".into()));
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&j| s[j] > RANK_RTOL * s_max)
        .collect();
    let theta: Vec<f64> = kept.iter().map(|&j| s[j] * s[j]).collect();
    let y = Mat::from_fn(n, kept.len(), |i, c| u[(i, kept[c])]);
    let gy = &d * (d.transpose() * &y);
    let residuals = (0..kept.len())
        .map(|c| {
            (0..n)
                .map(|i| (gy[(i, c)] - theta[c] * y[(i, c)]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let l = kept.len();
    finish(theta, y, residuals, l, n)
}
