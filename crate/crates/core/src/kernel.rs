//! Kernels on embedded data and the sampled integral operator built from them.

use faer::{Mat, MatRef};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::points::PointSet;

/// Largest sample count stored as a dense matrix by default (1.2 GB of f64).
pub const DEFAULT_DENSE_LIMIT: usize = 12_288;

const KERNEL_FLOOR: f64 = 1e-300;
const SIGMA_HAT_FLOOR: f64 = 1e-150;
const TILE_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelSpec {
    Gaussian { epsilon: f64 },
    Covariance,
    MarkovGaussian { epsilon: f64 },
}

impl KernelSpec {
    pub fn epsilon(&self) -> Option<f64> {
        match *self {
            KernelSpec::Gaussian { epsilon } | KernelSpec::MarkovGaussian { epsilon } => {
                Some(epsilon)
            }
            KernelSpec::Covariance => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.epsilon() {
            Some(e) if !(e > 0.0 && e.is_finite()) => Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive and finite, got {e}"
            ))),
            _ => Ok(()),
        }
    }

    /// Unnormalized kernel value.
    #[inline]
    fn raw(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { epsilon } | KernelSpec::MarkovGaussian { epsilon } => {
                eval_gaussian(a, b, epsilon)
            }
            KernelSpec::Covariance => eval_covariance(a, b),
        }
    }
}

/// Squared Euclidean distance, accumulated in index order.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[inline]
pub fn eval_gaussian(a: &[f64], b: &[f64], epsilon: f64) -> f64 {
    let v = (-squared_distance(a, b) / epsilon).exp();
    if v < KERNEL_FLOOR { 0.0 } else { v }
}

#[inline]
pub fn eval_covariance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Exponents of the bandwidth grid `ε = 2^e`.
pub fn bandwidth_grid() -> Vec<f64> {
    (-160..=160).map(|i| i as f64 * 0.25).collect()
}

/// Bandwidth maximizing `d log S / d log ε` for the kernel sum
/// `S(ε) = N^{-2} Σ_{m,n} exp(-d²(x_m, x_n) / ε)` over the dyadic grid.
///
/// Pairwise squared distances are histogrammed by their leading 17 bits
/// (exponent plus 6 mantissa bits) and each bin is represented by its
/// midpoint, which keeps the sum exact in counts and independent of thread
/// scheduling.
pub fn tune_bandwidth(points: &PointSet) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidArgument("bandwidth tuning needs at least 2 points".into()));
    }
    const SHIFT: u32 = 46;
    const BINS: usize = 1 << (64 - SHIFT - 1);
    let (zeros, counts) = (0..n)
        .into_par_iter()
        .fold(
            || (0u64, vec![0u64; BINS]),
            |(mut zeros, mut counts), i| {
                let xi = points.row(i);
                for j in i + 1..n {
                    let d2 = squared_distance(xi, points.row(j));
                    if d2 > 0.0 {
                        counts[(d2.to_bits() >> SHIFT) as usize] += 2;
                    } else {
                        zeros += 2;
                    }
                }
                (zeros, counts)
            },
        )
        .reduce(
            || (0u64, vec![0u64; BINS]),
            |(za, mut ca), (zb, cb)| {
                for (a, b) in ca.iter_mut().zip(&cb) {
                    *a += b;
                }
                (za + zb, ca)
            },
        );
    let bins: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(b, &c)| {
            let lo = f64::from_bits((b as u64) << SHIFT);
            let hi = f64::from_bits(((b as u64 + 1) << SHIFT) - 1);
            (0.5 * (lo + hi), c as f64)
        })
        .collect();
    if bins.is_empty() {
        return Err(Error::DegenerateData("all points coincide".into()));
    }
    let total = (n as f64) * (n as f64);
    let diag = (zeros + n as u64) as f64;
    let kernel_sum = |log2_eps: f64| {
        let eps = log2_eps.exp2();
        let s: f64 = bins.iter().map(|(d2, c)| c * (-d2 / eps).exp()).sum();
        (diag + s) / total
    };
    Ok(slope_argmax(&bandwidth_grid(), kernel_sum).exp2())
}

/// Grid point with the largest central-difference slope of `ln S` against `ln ε`.
fn slope_argmax(grid: &[f64], kernel_sum: impl Fn(f64) -> f64) -> f64 {
    let log_s: Vec<f64> = grid.iter().map(|&e| kernel_sum(e).ln()).collect();
    let mut best = (f64::NEG_INFINITY, grid[1]);
    for i in 1..grid.len() - 1 {
        let slope = (log_s[i + 1] - log_s[i - 1])
            / ((grid[i + 1] - grid[i - 1]) * std::f64::consts::LN_2);
        if slope > best.0 {
            best = (slope, grid[i]);
        }
    }
    best.1
}

/// Degree functions of the Markov normalization at the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Storage {
    Dense,
    MatrixFree,
}

/// The operator `f ↦ N⁻¹ Σ_n k(·, x_n) f(x_n)` restricted to the samples.
#[derive(Debug, Clone)]
pub struct GramOperator {
    samples: PointSet,
    spec: KernelSpec,
    normalization: Option<Normalization>,
    /// Column-major `N × N` matrix of `k(x_m, x_n) / N`, when stored.
    dense: Option<Vec<f64>>,
}

impl GramOperator {
    /// Builds the operator, Markov-normalizing when `spec` asks for it.
    /// Dense storage is used when the sample count is at most `dense_limit`.
    pub fn new(samples: PointSet, spec: KernelSpec, dense_limit: usize) -> Result<Self> {
        spec.validate()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        let markov = matches!(spec, KernelSpec::MarkovGaussian { .. });
        let raw_spec = match spec {
            KernelSpec::MarkovGaussian { epsilon } => KernelSpec::Gaussian { epsilon },
            s => s,
        };
        let mut op = Self {
            samples,
            spec: raw_spec,
            normalization: None,
            dense: None,
        };
        let raw = (op.len() <= dense_limit).then(|| op.assemble_raw());
        if markov {
            return normalize(op, raw);
        }
        op.dense = raw.map(|mut d| {
            let nf = op.samples.len() as f64;
            d.par_iter_mut().for_each(|v| *v /= nf);
            d
        });
        Ok(op)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &PointSet {
        &self.samples
    }

    pub fn spec(&self) -> KernelSpec {
        match (self.spec, &self.normalization) {
            (KernelSpec::Gaussian { epsilon }, Some(_)) => KernelSpec::MarkovGaussian { epsilon },
            (s, _) => s,
        }
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn storage(&self) -> Storage {
        if self.dense.is_some() {
            Storage::Dense
        } else {
            Storage::MatrixFree
        }
    }

    /// Dense matrix view, if stored.
    pub fn dense(&self) -> Option<MatRef<'_, f64>> {
        let n = self.len();
        self.dense
            .as_deref()
            .map(|d| MatRef::from_column_major_slice(d, n, n))
    }

    /// Drops the dense matrix so applications recompute kernel rows.
    pub fn into_matrix_free(mut self) -> Self {
        self.dense = None;
        self
    }

    fn assemble_raw(&self) -> Vec<f64> {
        let n = self.len();
        let mut data = vec![0.0; n * n];
        // Column m holds row m, which is the same by symmetry.
        data.par_chunks_mut(n).enumerate().for_each(|(m, col)| {
            self.raw_row(self.samples.row(m), col);
        });
        data
    }

    fn raw_row(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().zip(self.samples.rows()) {
            *o = self.spec.raw(x, y);
        }
    }

    /// Kernel value `k(x_m, x_n)` including normalization (without the `1/N` factor).
    pub fn kernel_entry(&self, m: usize, n: usize) -> f64 {
        let raw = self.spec.raw(self.samples.row(m), self.samples.row(n));
        match &self.normalization {
            Some(nm) => raw / (nm.sigma_hat[m] * nm.sigma_hat[n]),
            None => raw,
        }
    }

    /// Kernel section `k(x, x_n)` for all samples `n`, with the normalization
    /// degree of `x` computed from the same raw row.
    pub fn kernel_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.samples.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.samples.dim(),
                got: x.len(),
            });
        }
        let mut row = vec![0.0; self.len()];
        self.raw_row(x, &mut row);
        if let Some(nm) = &self.normalization {
            let (rho, sigma) = degrees(&row, &nm.rho);
            let sh = (sigma * rho).sqrt();
            if !(sh > SIGMA_HAT_FLOOR) {
                return Err(Error::DegenerateData(format!(
                    "point lies outside the kernel's numerical support (degree {sh:e})"
                )));
            }
            for (v, s) in row.iter_mut().zip(&nm.sigma_hat) {
                *v /= sh * s;
            }
        }
        Ok(row)
    }

    /// `G f` for real `f`.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f.len())?;
        let v = MatRef::from_column_major_slice(f, f.len(), 1);
        let out = self.apply_block(v)?;
        Ok(out.col(0).iter().copied().collect())
    }

    /// `G f` for complex `f`.
    pub fn apply_complex(&self, f: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(f.len())?;
        let n = f.len();
        let v = Mat::from_fn(n, 2, |i, j| if j == 0 { f[i].re } else { f[i].im });
        let out = self.apply_block(v.as_ref())?;
        Ok((0..n).map(|i| Complex64::new(out[(i, 0)], out[(i, 1)])).collect())
    }

    /// `G V` for a block of real columns.
    pub fn apply_block(&self, v: MatRef<'_, f64>) -> Result<Mat<f64>> {
        self.check_len(v.nrows())?;
        if let Some(g) = self.dense() {
            return Ok(g * v);
        }
        let n = self.len();
        let tiles: Vec<Mat<f64>> = (0..n.div_ceil(TILE_ROWS))
            .into_par_iter()
            .map(|t| {
                let start = t * TILE_ROWS;
                let rows = TILE_ROWS.min(n - start);
                // Columns of `tile` are kernel rows, so the product uses its transpose.
                let mut tile = vec![0.0; n * rows];
                for (r, col) in tile.chunks_exact_mut(n).enumerate() {
                    let m = start + r;
                    for (k, c) in col.iter_mut().enumerate() {
                        *c = self.kernel_entry(m, k) / n as f64;
                    }
                }
                MatRef::from_column_major_slice(&tile, n, rows).transpose() * v
            })
            .collect();
        let mut out = Mat::zeros(n, v.ncols());
        for (t, tile) in tiles.iter().enumerate() {
            out.as_mut()
                .submatrix_mut(t * TILE_ROWS, 0, tile.nrows(), v.ncols())
                .copy_from(tile);
        }
        Ok(out)
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }

    /// See [`kernel_fingerprint`].
    pub fn fingerprint(&self) -> String {
        kernel_fingerprint(&self.spec(), &self.samples)
    }
}

/// SHA-256 (hex) over the kernel parameters and the sample coordinates.
pub fn kernel_fingerprint(spec: &KernelSpec, samples: &PointSet) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("kernel spec serializes"));
    h.update((samples.dim() as u64).to_le_bytes());
    for v in samples.as_flat() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `(ρ(x), σ(x))` from a raw kernel row and the sample degrees `ρ_n`.
fn degrees(raw: &[f64], rho: &[f64]) -> (f64, f64) {
    let n = raw.len() as f64;
    let mut r = 0.0;
    let mut s = 0.0;
    for (k, p) in raw.iter().zip(rho) {
        r += k;
        s += k / p;
    }
    (r / n, s / n)
}

fn rho_of(raw: &[f64]) -> f64 {
    let mut r = 0.0;
    for k in raw {
        r += k;
    }
    r / raw.len() as f64
}

/// Replaces a Gaussian kernel `k` by `k(x, y) / (σ̂(x) σ̂(y))` with
/// `ρ = K 1`, `σ = K (1/ρ)`, `σ̂ = sqrt(σ ρ)`.
pub fn markov_normalize(mut gram: GramOperator) -> Result<GramOperator> {
    if gram.normalization.is_some() {
        return Ok(gram);
    }
    if !matches!(gram.spec, KernelSpec::Gaussian { .. }) {
        return Err(Error::InvalidArgument(
            "Markov normalization requires a Gaussian kernel".into(),
        ));
    }
    // The stored matrix carries the 1/N factor; degrees are taken from exact raw values.
    let raw = gram.dense.take().map(|_| gram.assemble_raw());
    normalize(gram, raw)
}

fn normalize(mut gram: GramOperator, raw: Option<Vec<f64>>) -> Result<GramOperator> {
    let n = gram.len();
    let row = |m: usize, buf: &mut Vec<f64>| match &raw {
        Some(d) => buf.copy_from_slice(&d[m * n..(m + 1) * n]),
        None => gram.raw_row(gram.samples.row(m), buf),
    };
    let rho: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, m| {
                row(m, buf);
                rho_of(buf)
            },
        )
        .collect();
    let sigma: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, m| {
                row(m, buf);
                degrees(buf, &rho).1
            },
        )
        .collect();
    let sigma_hat: Vec<f64> = sigma.iter().zip(&rho).map(|(s, r)| (s * r).sqrt()).collect();
    if let Some((m, &v)) = sigma_hat
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > SIGMA_HAT_FLOOR))
    {
        return Err(Error::NonPositiveKernel {
            row: m,
            col: m,
            value: v,
        });
    }
    if let Some(mut d) = raw {
        let nf = n as f64;
        d.par_chunks_mut(n).enumerate().for_each(|(m, col)| {
            for (k, v) in col.iter_mut().enumerate() {
                *v = *v / (sigma_hat[m] * sigma_hat[k]) / nf;
            }
        });
        gram.dense = Some(d);
    }
    gram.normalization = Some(Normalization {
        rho,
        sigma,
        sigma_hat,
    });
    Ok(gram)
}
