//! Leading eigenpairs of the Gram operator by thick-restarted block Lanczos.

use std::io::{Read, Write};
use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Side};
use log::{debug, warn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::GramOperator;

/// Eigenvalues below `LAMBDA_FLOOR * λ_0` are treated as zero.
pub const LAMBDA_FLOOR: f64 = 1e-12;
const DEGENERACY_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    pub seed: u64,
    /// Residual tolerance relative to `λ_0` for unit eigenvectors.
    pub tol: f64,
    pub max_restarts: usize,
    pub block: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            tol: 1e-10,
            max_restarts: 300,
            block: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpectralBasis {
    /// Nonincreasing eigenvalues of the Gram operator.
    pub lambdas: Vec<f64>,
    /// `N × l` eigenvector values, each column of Euclidean norm `√N`.
    pub phi: Mat<f64>,
    /// `‖G u_j − λ_j u_j‖` for the unit-norm eigenvectors `u_j = φ_j / √N`.
    pub residuals: Vec<f64>,
    /// Set when `λ_{l-1}` and `λ_l` agree to within 1e-9 relative.
    pub boundary_degenerate: bool,
}

impl SpectralBasis {
    pub fn l(&self) -> usize {
        self.lambdas.len()
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn phi_col(&self, j: usize) -> &[f64] {
        self.phi
            .col(j)
            .try_as_col_major()
            .expect("owned matrix columns are contiguous")
            .as_slice()
    }
}

/// The `l` largest eigenpairs of `gram`.
pub fn top_eigenpairs(gram: &GramOperator, l: usize, opts: &EigenOptions) -> Result<SpectralBasis> {
    let n = gram.len();
    if l == 0 || l > n {
        return Err(Error::InvalidArgument(format!(
            "requested {l} eigenpairs of an operator on {n} samples"
        )));
    }
    let m = (2 * l + 16).min(n);
    let (theta, y, residuals) = if m == n {
        full_space(gram)?
    } else {
        block_lanczos(gram, l, m, opts)?
    };
    finish(theta, y, residuals, l, n)
}

/// Rayleigh–Ritz over the whole sample space.
fn full_space(gram: &GramOperator) -> Result<(Vec<f64>, Mat<f64>, Vec<f64>)> {
    let n = gram.len();
    let a = match gram.dense() {
        Some(d) => d.to_owned(),
        None => gram.apply_block(Mat::<f64>::identity(n, n).as_ref())?,
    };
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let (theta, y) = sorted_eigen(sym.as_ref())?;
    let ay = &a * &y;
    let residuals = residual_norms(ay.as_ref(), y.as_ref(), &theta, n);
    Ok((theta, y, residuals))
}

/// Eigenpairs of a small symmetric matrix, eigenvalues nonincreasing.
fn sorted_eigen(h: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let eig = h
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::DegenerateData(format!("dense eigensolver failed: {e:?}")))?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let k = h.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let theta = order.iter().map(|&i| s[i]).collect();
    let vecs = Mat::from_fn(k, k, |i, j| u[(i, order[j])]);
    Ok((theta, vecs))
}

fn residual_norms(ay: MatRef<'_, f64>, y: MatRef<'_, f64>, theta: &[f64], count: usize) -> Vec<f64> {
    (0..count)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..y.nrows() {
                let r = ay[(i, j)] - theta[j] * y[(i, j)];
                s += r * r;
            }
            s.sqrt()
        })
        .collect()
}

struct Subspace {
    v: Mat<f64>,
    w: Mat<f64>,
    k: usize,
    rng: ChaCha8Rng,
}

impl Subspace {
    fn basis(&self) -> MatRef<'_, f64> {
        self.v.as_ref().subcols(0, self.k)
    }

    /// Orthonormalizes `x` against the current basis and within itself, then
    /// appends it along with `G x`. Columns that vanish under projection are
    /// replaced by random directions. Returns the number of columns added.
    fn extend(&mut self, gram: &GramOperator, mut x: Mat<f64>) -> Result<usize> {
        let n = x.nrows();
        let room = self.v.ncols() - self.k;
        if x.ncols() > room {
            x = x.as_ref().subcols(0, room).to_owned();
        }
        let b = x.ncols();
        let norms: Vec<f64> = (0..b).map(|j| x.col(j).norm_l2()).collect();
        self.project_block(&mut x);
        self.project_block(&mut x);
        for j in 0..b {
            let mut reference = norms[j];
            let mut before = reference;
            let mut attempts = 0;
            loop {
                self.project_within(&mut x, j);
                self.project_within(&mut x, j);
                let mut after = x.col(j).norm_l2();
                // A large drop leaves rounding errors of relative size ε·before/after
                // along the basis; project again until a pass removes little.
                let mut passes = 0;
                while after > 1e-8 * reference && after < 0.5 * before && passes < 4 {
                    let mut c = x.as_ref().subcols(j, 1).to_owned();
                    self.project_block(&mut c);
                    x.col_mut(j).copy_from(c.col(0));
                    self.project_within(&mut x, j);
                    before = after;
                    after = x.col(j).norm_l2();
                    passes += 1;
                }
                if after > 1e-8 * reference && after > 0.0 {
                    let inv = 1.0 / after;
                    x.col_mut(j).iter_mut().for_each(|v| *v *= inv);
                    break;
                }
                attempts += 1;
                if attempts > 8 {
                    return Err(Error::DegenerateData(
                        "could not extend the Krylov basis".into(),
                    ));
                }
                let mut r = random_block(&mut self.rng, n, 1);
                reference = r.col(0).norm_l2();
                self.project_block(&mut r);
                self.project_block(&mut r);
                before = r.col(0).norm_l2();
                x.col_mut(j).copy_from(r.col(0));
            }
        }
        let ax = gram.apply_block(x.as_ref())?;
        self.v.as_mut().subcols_mut(self.k, b).copy_from(&x);
        self.w.as_mut().subcols_mut(self.k, b).copy_from(&ax);
        self.k += b;
        Ok(b)
    }

    /// Removes from column `j` its components along the earlier columns of `x`.
    fn project_within(&self, x: &mut Mat<f64>, j: usize) {
        for p in 0..j {
            let d = dot(x, p, j);
            for i in 0..x.nrows() {
                let v = x[(i, p)];
                x[(i, j)] -= d * v;
            }
        }
    }

    /// One classical Gram–Schmidt pass of `x` against the basis.
    fn project_block(&self, x: &mut Mat<f64>) {
        if self.k == 0 {
            return;
        }
        let vk = self.basis();
        let c = vk.transpose() * x.as_ref();
        matmul(
            x.as_mut(),
            Accum::Add,
            vk,
            c.as_ref(),
            -1.0,
            faer::get_global_parallelism(),
        );
    }
}

fn dot(x: &Mat<f64>, p: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..x.nrows() {
        s += x[(i, p)] * x[(i, j)];
    }
    s
}

fn random_block(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Mat<f64> {
    Mat::from_fn(n, b, |_, _| rng.random::<f64>() - 0.5)
}

fn block_lanczos(
    gram: &GramOperator,
    l: usize,
    m: usize,
    opts: &EigenOptions,
) -> Result<(Vec<f64>, Mat<f64>, Vec<f64>)> {
    let n = gram.len();
    let block = opts.block.clamp(1, m - l);
    let keep = l + (m - l) / 2;
    let mut sub = Subspace {
        v: Mat::zeros(n, m),
        w: Mat::zeros(n, m),
        k: 0,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
    };
    let start = random_block(&mut sub.rng, n, block);
    let mut last = (0, sub.extend(gram, start)?);
    let mut max_residual = f64::INFINITY;
    let mut residuals = Vec::new();
    for restart in 0..=opts.max_restarts {
        while sub.k < m {
            let next = sub.w.as_ref().subcols(last.0, last.1).to_owned();
            let k0 = sub.k;
            let added = sub.extend(gram, next)?;
            last = (k0, added);
        }
        let v = sub.v.as_ref();
        let w = sub.w.as_ref();
        let h = v.transpose() * w;
        let hs = Mat::from_fn(m, m, |i, j| 0.5 * (h[(i, j)] + h[(j, i)]));
        let (theta, s) = sorted_eigen(hs.as_ref())?;
        let y = v * s.as_ref();
        let ay = w * s.as_ref();
        residuals = residual_norms(ay.as_ref(), y.as_ref(), &theta, l);
        let scale = theta[0].abs().max(f64::MIN_POSITIVE);
        max_residual = residuals.iter().cloned().fold(0.0, f64::max) / scale;
        debug!("restart {restart}: max relative residual {max_residual:e}");
        if max_residual <= opts.tol {
            let degenerate_check = theta[l.min(m - 1)];
            let mut theta = theta;
            theta.truncate(l);
            theta.push(degenerate_check);
            return Ok((theta, y.as_ref().subcols(0, l).to_owned(), residuals));
        }
        if restart == opts.max_restarts {
            break;
        }
        // Thick restart: keep the leading Ritz pairs, continue from the
        // residuals of those that have not converged.
        let tol_abs = opts.tol * scale;
        let pending: Vec<usize> = (0..l).filter(|&j| residuals[j] > tol_abs).collect();
        let b = pending.len().min(block);
        let r = Mat::from_fn(n, b, |i, c| {
            let j = pending[c];
            ay[(i, j)] - theta[j] * y[(i, j)]
        });
        sub.v.as_mut().subcols_mut(0, keep).copy_from(y.as_ref().subcols(0, keep));
        sub.w.as_mut().subcols_mut(0, keep).copy_from(ay.as_ref().subcols(0, keep));
        sub.k = keep;
        last = (keep, sub.extend(gram, r)?);
    }
    Err(Error::NonConvergence {
        restarts: opts.max_restarts,
        max_residual,
        residuals,
    })
}

/// Truncates at the eigenvalue floor, fixes signs and scales to `√N` norm.
/// `theta` may carry one extra trailing value used for the degeneracy check.
pub(crate) fn finish(
    mut theta: Vec<f64>,
    y: Mat<f64>,
    mut residuals: Vec<f64>,
    l: usize,
    n: usize,
) -> Result<SpectralBasis> {
    let lambda0 = theta[0];
    if !(lambda0 > 0.0) {
        return Err(Error::DegenerateData(format!(
            "leading eigenvalue {lambda0:e} is not positive"
        )));
    }
    let next = theta.get(l).copied();
    theta.truncate(l);
    let floor = LAMBDA_FLOOR * lambda0;
    let kept = theta.iter().take_while(|&&t| t > floor).count();
    if kept < l {
        warn!(
            "only {kept} of {l} eigenvalues exceed the floor {floor:e}; truncating the basis"
        );
    }
    let boundary_degenerate = kept == l
        && next.is_some_and(|t| (theta[l - 1] - t).abs() <= DEGENERACY_RTOL * theta[l - 1].abs());
    if boundary_degenerate {
        warn!(
            "eigenvalues {} and {} agree to 1e-9 relative; the truncation splits an eigenspace",
            l - 1,
            l
        );
    }
    theta.truncate(kept);
    residuals.truncate(kept);
    let root_n = (n as f64).sqrt();
    let phi = Mat::from_fn(n, kept, |i, j| y[(i, j)] * root_n);
    let mut phi = phi;
    for j in 0..kept {
        let mut best = 0;
        for i in 1..n {
            if phi[(i, j)].abs() > phi[(best, j)].abs() {
                best = i;
            }
        }
        if phi[(best, j)] < 0.0 {
            phi.col_mut(j).iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(SpectralBasis {
        lambdas: theta,
        phi,
        residuals,
        boundary_degenerate,
    })
}

const CACHE_MAGIC: &[u8; 8] = b"KRKHSBAS";
const CACHE_VERSION: u32 = 1;

/// Writes the basis: magic, version (u32), N (u64), l (u64), 64-byte hex
/// fingerprint, then eigenvalues, column-major `phi` and residuals as
/// little-endian f64.
pub fn save_basis(path: &Path, basis: &SpectralBasis, fingerprint: &str) -> Result<()> {
    let fp = fingerprint_bytes(fingerprint)?;
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(basis.n() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(basis.l() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&fp).map_err(io)?;
    for v in &basis.lambdas {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for j in 0..basis.l() {
        for v in basis.phi_col(j) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    for v in &basis.residuals {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a basis written by [`save_basis`], refusing files whose fingerprint differs.
pub fn load_basis(path: &Path, fingerprint: &str) -> Result<SpectralBasis> {
    let expected = fingerprint_bytes(fingerprint)?;
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let mut take = |k: usize| -> Result<&[u8]> {
        if cur.len() < k {
            return Err(Error::Cache("file is truncated".into()));
        }
        let (a, b) = cur.split_at(k);
        cur = b;
        Ok(a)
    };
    if take(8)? != CACHE_MAGIC {
        return Err(Error::Cache("not a basis file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let l = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if take(64)? != expected {
        return Err(Error::Cache("fingerprint does not match the current data and kernel".into()));
    }
    let mut floats = |k: usize| -> Result<Vec<f64>> {
        let raw = take(8 * k)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let lambdas = floats(l)?;
    let phi_flat = floats(n * l)?;
    let residuals = floats(l)?;
    let phi = Mat::from_fn(n, l, |i, j| phi_flat[j * n + i]);
    Ok(SpectralBasis {
        lambdas,
        phi,
        residuals,
        boundary_degenerate: false,
    })
}

fn fingerprint_bytes(fingerprint: &str) -> Result<[u8; 64]> {
    fingerprint
        .as_bytes()
        .try_into()
        .map_err(|_| Error::Cache("fingerprint must be 64 hex characters".into()))
}
