//! Benchmark flows, an adaptive Dormand–Prince integrator, and observation maps.

use std::f64::consts::{SQRT_2, TAU};
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointSet;

/// A point in state space. Angular coordinates are kept in `[0, 2π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        StateVector(v)
    }
}

impl<const D: usize> From<[f64; D]> for StateVector {
    fn from(v: [f64; D]) -> Self {
        StateVector(v.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FlowSpec {
    TorusRotation { alpha1: f64, alpha2: f64 },
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    ProductL63Rotation { alpha: f64, c: f64 },
}

pub const L63_SIGMA: f64 = 10.0;
pub const L63_RHO: f64 = 28.0;
pub const L63_BETA: f64 = 8.0 / 3.0;

impl FlowSpec {
    pub fn torus() -> Self {
        FlowSpec::TorusRotation {
            alpha1: 1.0,
            alpha2: SQRT_2,
        }
    }

    pub fn lorenz63() -> Self {
        FlowSpec::Lorenz63 {
            sigma: L63_SIGMA,
            rho: L63_RHO,
            beta: L63_BETA,
        }
    }

    pub fn product() -> Self {
        FlowSpec::ProductL63Rotation { alpha: 1.0, c: 0.2 }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            FlowSpec::TorusRotation { .. } => 2,
            FlowSpec::Lorenz63 { .. } => 3,
            FlowSpec::ProductL63Rotation { .. } => 4,
        }
    }

    pub fn observation_dim(&self) -> usize {
        match self {
            FlowSpec::TorusRotation { .. } => 1,
            _ => 3,
        }
    }

    pub fn default_x0(&self) -> StateVector {
        match self {
            FlowSpec::TorusRotation { .. } => [0.0, 0.0].into(),
            FlowSpec::Lorenz63 { .. } => [0.0, 1.0, 1.05].into(),
            FlowSpec::ProductL63Rotation { .. } => [0.0, 1.0, 1.05, 0.0].into(),
        }
    }

    pub fn default_spinup(&self) -> f64 {
        match self {
            FlowSpec::TorusRotation { .. } => 0.0,
            _ => 4000.0,
        }
    }
}

pub fn flow_torus(theta: &StateVector, t: f64, alpha1: f64, alpha2: f64) -> StateVector {
    assert_eq!(theta.len(), 2, "torus state has two angles");
    StateVector(vec![
        (theta[0] + alpha1 * t).rem_euclid(TAU),
        (theta[1] + alpha2 * t).rem_euclid(TAU),
    ])
}

fn rotate(theta: f64, alpha: f64, t: f64) -> f64 {
    (theta + alpha * t).rem_euclid(TAU)
}

pub fn l63_vector_field(x: &StateVector, sigma: f64, rho: f64, beta: f64) -> StateVector {
    assert_eq!(x.len(), 3, "L63 state has three components");
    let mut out = [0.0; 3];
    l63_rhs(&[x[0], x[1], x[2]], &mut out, sigma, rho, beta);
    out.into()
}

#[inline]
fn l63_rhs(x: &[f64; 3], out: &mut [f64; 3], sigma: f64, rho: f64, beta: f64) {
    out[0] = sigma * (x[1] - x[0]);
    out[1] = x[0] * (rho - x[2]) - x[1];
    out[2] = x[0] * x[1] - beta * x[2];
}

/// Relative and absolute local error tolerances for the adaptive integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
        }
    }
}

impl Tolerance {
    /// A single tolerance: `tol` relative, `1e-3 * tol` absolute.
    pub fn uniform(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol * 1e-3,
        }
    }
}

// Dormand–Prince 5(4) tableau. The field is autonomous, so the nodes c_i are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Adaptive Dormand–Prince integrator for the L63 field. Keeps its step size
/// between calls so a trajectory can be advanced one sampling interval at a time.
#[derive(Debug, Clone)]
pub struct Dopri5 {
    sigma: f64,
    rho: f64,
    beta: f64,
    tol: Tolerance,
    h: Option<f64>,
}

impl Dopri5 {
    pub fn new(sigma: f64, rho: f64, beta: f64, tol: Tolerance) -> Self {
        Self {
            sigma,
            rho,
            beta,
            tol,
            h: None,
        }
    }

    fn f(&self, x: &[f64; 3], out: &mut [f64; 3]) {
        l63_rhs(x, out, self.sigma, self.rho, self.beta);
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.tol.atol + self.tol.rtol * a.abs().max(b.abs())
    }

    fn initial_step(&self, x: &[f64; 3], k1: &[f64; 3], span: f64) -> f64 {
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..3 {
            let sc = self.scale(x[i], x[i]);
            d0 += (x[i] / sc).powi(2);
            d1 += (k1[i] / sc).powi(2);
        }
        let h = if d0 < 1e-10 || d1 < 1e-10 {
            1e-6
        } else {
            0.01 * (d0 / d1).sqrt()
        };
        h.min(span)
    }

    /// Advances `x` in place by time `span` (`t0` is only used in error reports).
    pub fn advance(&mut self, x: &mut [f64; 3], t0: f64, span: f64) -> Result<()> {
        if span <= 0.0 {
            return Ok(());
        }
        let mut k1 = [0.0; 3];
        self.f(x, &mut k1);
        let mut h = match self.h {
            Some(h) => h,
            None => self.initial_step(x, &k1, span),
        };
        let mut t = 0.0;
        let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
            ([0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]);
        let mut y = [0.0; 3];
        let mut y_new = [0.0; 3];
        while t < span {
            let remaining = span - t;
            let last = h >= remaining;
            let hs = if last { remaining } else { h };
            if !(hs > 1e-14 * (t0 + t).abs().max(1.0)) && !last {
                return Err(Error::IntegrationFailure { t: t0 + t, h: hs });
            }
            for i in 0..3 {
                y[i] = x[i] + hs * A21 * k1[i];
            }
            self.f(&y, &mut k2);
            for i in 0..3 {
                y[i] = x[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            self.f(&y, &mut k3);
            for i in 0..3 {
                y[i] = x[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            self.f(&y, &mut k4);
            for i in 0..3 {
                y[i] = x[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            self.f(&y, &mut k5);
            for i in 0..3 {
                y[i] = x[i]
                    + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            self.f(&y, &mut k6);
            for i in 0..3 {
                y_new[i] = x[i]
                    + hs * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            self.f(&y_new, &mut k7);

            let mut err = 0.0;
            for i in 0..3 {
                let e = hs
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
                err += (e / self.scale(x[i], y_new[i])).powi(2);
            }
            let err = (err / 3.0).sqrt();
            if !err.is_finite() {
                return Err(Error::IntegrationFailure { t: t0 + t, h: hs });
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err <= 1.0 {
                t = if last { span } else { t + hs };
                *x = y_new;
                k1 = k7;
                // A clipped final step says nothing about the natural step size.
                if !last || factor < 1.0 {
                    h = hs * factor;
                }
            } else {
                h = hs * factor.min(1.0);
                if h < 1e-14 * (t0 + t).abs().max(1.0) {
                    return Err(Error::IntegrationFailure { t: t0 + t, h });
                }
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationFailure { t: t0 + span, h });
        }
        self.h = Some(h);
        Ok(())
    }
}

/// Flow image `Φ^t(x0)`. Rotations are applied analytically.
pub fn integrate(flow: &FlowSpec, x0: &StateVector, t: f64, tol: Tolerance) -> Result<StateVector> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("integration time {t} is negative")));
    }
    if !(tol.rtol > 0.0 && tol.atol > 0.0) {
        return Err(Error::InvalidArgument("tolerances must be positive".into()));
    }
    if x0.len() != flow.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: flow.state_dim(),
            got: x0.len(),
        });
    }
    match *flow {
        FlowSpec::TorusRotation { alpha1, alpha2 } => Ok(flow_torus(x0, t, alpha1, alpha2)),
        FlowSpec::Lorenz63 { sigma, rho, beta } => {
            let mut x = [x0[0], x0[1], x0[2]];
            Dopri5::new(sigma, rho, beta, tol).advance(&mut x, 0.0, t)?;
            Ok(x.into())
        }
        FlowSpec::ProductL63Rotation { alpha, .. } => {
            let mut x = [x0[0], x0[1], x0[2]];
            Dopri5::new(L63_SIGMA, L63_RHO, L63_BETA, tol).advance(&mut x, 0.0, t)?;
            Ok(vec![x[0], x[1], x[2], rotate(x0[3], alpha, t)].into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub n: usize,
    pub dt: f64,
    /// Initial state; `None` selects the flow's default.
    pub x0: Option<StateVector>,
    pub spinup: f64,
}

/// How a state is turned into an observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationMap {
    /// The observable used with each benchmark flow.
    #[default]
    Benchmark,
    /// The full state vector.
    FullState,
}

impl ObservationMap {
    pub fn apply(&self, flow: &FlowSpec, x: &StateVector) -> Vec<f64> {
        match self {
            ObservationMap::Benchmark => observe(flow, x),
            ObservationMap::FullState => x.0.clone(),
        }
    }

    pub fn dim(&self, flow: &FlowSpec) -> usize {
        match self {
            ObservationMap::Benchmark => flow.observation_dim(),
            ObservationMap::FullState => flow.state_dim(),
        }
    }
}

pub fn observe(flow: &FlowSpec, x: &StateVector) -> Vec<f64> {
    assert_eq!(x.len(), flow.state_dim(), "state dimension does not match flow");
    match *flow {
        FlowSpec::TorusRotation { .. } => vec![x[0].sin() * x[1].cos()],
        FlowSpec::Lorenz63 { .. } => x.0.clone(),
        FlowSpec::ProductL63Rotation { c, .. } => {
            let th = x[3];
            vec![
                x[0] + c * th.sin(),
                x[1] + c * (2.0 * th).cos(),
                x[2] + c * (2.0 * th).sin(),
            ]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
    pub dt: f64,
    pub series: PointSet,
}

pub fn generate_trajectory(
    flow: &FlowSpec,
    cfg: &TrajectoryConfig,
    obs: ObservationMap,
    tol: Tolerance,
) -> Result<Trajectory> {
    if cfg.n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {}", cfg.n)));
    }
    if !(cfg.dt > 0.0) || !(cfg.spinup >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive and spinup nonnegative (dt = {}, spinup = {})",
            cfg.dt, cfg.spinup
        )));
    }
    let x0 = cfg.x0.clone().unwrap_or_else(|| flow.default_x0());
    if x0.len() != flow.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: flow.state_dim(),
            got: x0.len(),
        });
    }
    let times = (0..cfg.n).map(|n| cfg.spinup + n as f64 * cfg.dt);
    let states: Vec<StateVector> = match *flow {
        FlowSpec::TorusRotation { alpha1, alpha2 } => {
            times.map(|t| flow_torus(&x0, t, alpha1, alpha2)).collect()
        }
        FlowSpec::Lorenz63 { sigma, rho, beta } => {
            l63_samples(Dopri5::new(sigma, rho, beta, tol), &x0, cfg)?
                .into_iter()
                .map(StateVector::from)
                .collect()
        }
        FlowSpec::ProductL63Rotation { alpha, .. } => {
            let xyz = l63_samples(Dopri5::new(L63_SIGMA, L63_RHO, L63_BETA, tol), &x0, cfg)?;
            xyz.into_iter()
                .zip(times)
                .map(|(p, t)| StateVector(vec![p[0], p[1], p[2], rotate(x0[3], alpha, t)]))
                .collect()
        }
    };
    let mut series = PointSet::with_capacity(obs.dim(flow), cfg.n);
    for s in &states {
        series.push(&obs.apply(flow, s))?;
    }
    Ok(Trajectory {
        states,
        dt: cfg.dt,
        series,
    })
}

fn l63_samples(mut ode: Dopri5, x0: &StateVector, cfg: &TrajectoryConfig) -> Result<Vec<[f64; 3]>> {
    let mut x = [x0[0], x0[1], x0[2]];
    ode.advance(&mut x, 0.0, cfg.spinup)?;
    let mut out = Vec::with_capacity(cfg.n);
    out.push(x);
    for n in 1..cfg.n {
        ode.advance(&mut x, cfg.spinup + (n - 1) as f64 * cfg.dt, cfg.dt)?;
        out.push(x);
    }
    Ok(out)
}
