//! Two-threshold eigenfrequency selection and the lattice of frequency combinations.

use serde::{Deserialize, Serialize};

use crate::eigensolve::SpectralBasis;
use crate::error::{Error, Result};
use crate::rkhs::{NormTable, NystromFunction, extend_frequency};

const TIE_TOL: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub l0: usize,
    pub l1: usize,
    pub delta0: f64,
    pub delta1: f64,
}

impl SelectionConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.l0 > self.l1 || self.l1 >= n {
            return Err(Error::InvalidArgument(format!(
                "truncations must satisfy l0 <= l1 < N (l0 = {}, l1 = {}, N = {n})",
                self.l0, self.l1
            )));
        }
        if !(self.delta0 > 0.0 && self.delta1 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must be positive (delta0 = {}, delta1 = {})",
                self.delta0, self.delta1
            )));
        }
        Ok(())
    }
}

/// `w_l1 / w_l0 − 1`, or `+∞` when `w_l0` vanishes.
pub fn ratio(w_l0: f64, w_l1: f64) -> f64 {
    if w_l0 == 0.0 {
        f64::INFINITY
    } else {
        w_l1 / w_l0 - 1.0
    }
}

/// A grid frequency that passed both thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub row: usize,
    pub omega: f64,
    pub w_l0: f64,
    pub w_l1: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct CandidateEigenpair {
    pub candidate: Candidate,
    pub eigenfunction: NystromFunction,
}

/// Keeps grid frequencies with `w_l0 > δ0` and `ratio ≤ δ1`, ordered by
/// nondecreasing `w_l1` (near-ties by ascending `|ω|`).
pub fn select_frequencies(table: &NormTable, cfg: &SelectionConfig) -> Result<Vec<Candidate>> {
    if table.grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    cfg.validate(table.grid.n)?;
    let w0 = table.w_for(cfg.l0);
    let w1 = table.w_for(cfg.l1);
    let mut out: Vec<Candidate> = (0..table.grid.n)
        .filter(|&i| w0[i] > cfg.delta0)
        .map(|i| Candidate {
            row: i,
            omega: table.grid.omega(i),
            w_l0: w0[i],
            w_l1: w1[i],
            ratio: ratio(w0[i], w1[i]),
        })
        .filter(|c| c.ratio <= cfg.delta1)
        .collect();
    sort_candidates(&mut out);
    Ok(out)
}

fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| a.w_l1.total_cmp(&b.w_l1).then(a.omega.total_cmp(&b.omega)));
    let mut start = 0;
    while start < c.len() {
        let mut end = start + 1;
        while end < c.len() && c[end].w_l1 - c[end - 1].w_l1 <= TIE_TOL {
            end += 1;
        }
        c[start..end].sort_by(|a, b| {
            a.omega
                .abs()
                .total_cmp(&b.omega.abs())
                .then(a.omega.total_cmp(&b.omega))
        });
        start = end;
    }
}

/// Selection followed by Nyström extension of each surviving Fourier function at `l1`.
pub fn algorithm_e(
    table: &NormTable,
    cfg: &SelectionConfig,
    basis: &SpectralBasis,
) -> Result<Vec<CandidateEigenpair>> {
    select_frequencies(table, cfg)?
        .into_iter()
        .map(|c| {
            Ok(CandidateEigenpair {
                candidate: c,
                eigenfunction: extend_frequency(basis, c.omega, table.grid.dt, cfg.l1)?,
            })
        })
        .collect()
}

/// Integer combinations `Σ c_j ω_j` with `Σ |c_j| ≤ max_order`, folded into
/// `[-nyquist, nyquist)`, sorted and deduplicated to 1e-12.
pub fn frequency_lattice(generators: &[f64], max_order: usize, nyquist: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut coeffs = vec![0i64; generators.len()];
    combinations(generators, max_order as i64, 0, &mut coeffs, &mut out);
    let period = 2.0 * nyquist;
    let mut folded: Vec<f64> = out
        .into_iter()
        .map(|v| v - period * ((v + nyquist) / period).floor())
        .collect();
    folded.sort_by(f64::total_cmp);
    folded.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    folded
}

fn combinations(g: &[f64], budget: i64, k: usize, coeffs: &mut [i64], out: &mut Vec<f64>) {
    if k == g.len() {
        out.push(coeffs.iter().zip(g).map(|(&c, w)| c as f64 * w).sum());
        return;
    }
    for c in -budget..=budget {
        coeffs[k] = c;
        combinations(g, budget - c.abs(), k + 1, coeffs, out);
    }
    coeffs[k] = 0;
}
