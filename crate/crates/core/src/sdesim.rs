//! Sub-path simulation between consecutive observation times.
//!
//! Three proposal mechanisms are supported: the Euler-Maruyama discretisation
//! (EMD) itself, the modified diffusion bridge (MDB), and the residual bridge
//! (RB), which applies the MDB to the residual left after subtracting the
//! drift-ODE path. Every propagator returns the log-density of the sub-path
//! under the proposal (`log_q`) and under the EMD transition (`log_f`).

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::math::normal_logpdf;
use crate::model::{Dynamics, Sdemem};
use crate::rng::Stream;
use crate::Error;

/// Particle proposal used between observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Proposal {
    Emd,
    Mdb,
    Rb,
}

impl Proposal {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "emd" => Some(Proposal::Emd),
            "mdb" => Some(Proposal::Mdb),
            "rb" => Some(Proposal::Rb),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Proposal::Emd => "emd",
            Proposal::Mdb => "mdb",
            Proposal::Rb => "rb",
        }
    }
}

/// `D` equal sub-intervals of `[t0, t1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub substeps: usize,
    pub delta_tau: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, substeps: usize) -> Result<Self, Error> {
        if substeps == 0 {
            return Err(Error::Config("number of sub-steps must be at least 1".into()));
        }
        if !(t1 > t0) {
            return Err(Error::Config(alloc::format!("empty time interval [{t0}, {t1}]")));
        }
        Ok(Self {
            t0,
            t1,
            substeps,
            delta_tau: (t1 - t0) / substeps as f64,
        })
    }

    /// `τ_k`; the last knot is `t1` exactly.
    pub fn knot(&self, k: usize) -> f64 {
        if k == self.substeps {
            self.t1
        } else {
            self.t0 + k as f64 * self.delta_tau
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.substeps).map(|k| self.knot(k)).collect()
    }

    /// `Δ_k = t1 − τ_k`.
    #[inline]
    fn remaining(&self, k: usize) -> f64 {
        (self.substeps - k) as f64 * self.delta_tau
    }
}

/// A simulated sub-path `x_{τ_1}, …, x_{τ_D}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubPath {
    pub states: Vec<f64>,
    pub log_q: f64,
    pub log_f: f64,
}

/// Next observation used to steer a bridge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeEnd {
    pub y: f64,
    pub sigma: f64,
}

/// Proposal with everything it conditions on.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Kernel<'a> {
    Emd,
    Mdb(BridgeEnd),
    /// `ode` holds the drift-ODE path at knots `τ_0..τ_D`.
    Rb(BridgeEnd, &'a [f64]),
}

/// MDB drift and variance rate at one sub-step:
/// `μ_MDB = (μσ² + v(y − x)) / (vΔ_k + σ²)` and
/// `Ψ_MDB = (vσ² + v²(Δ_k − Δτ)) / (vΔ_k + σ²)`.
#[inline]
pub fn mdb_moments(mu: f64, v: f64, sigma: f64, y: f64, x: f64, delta_k: f64, delta_tau: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let denom = v * delta_k + s2;
    (
        (mu * s2 + v * (y - x)) / denom,
        (v * s2 + v * v * (delta_k - delta_tau)) / denom,
    )
}

/// RB drift `μ + v(y − (η_J + r + (μ − δ^η)Δ_k)) / (vΔ_k + σ²)`.
#[inline]
#[allow(clippy::too_many_arguments)]
pub fn rb_drift(mu: f64, v: f64, sigma: f64, y: f64, ode_end: f64, residual: f64, ode_slope: f64, delta_k: f64) -> f64 {
    mu + v * (y - (ode_end + residual + (mu - ode_slope) * delta_k)) / (v * delta_k + sigma * sigma)
}

struct StepMoments {
    emd_mean: f64,
    emd_var: f64,
    q_mean: f64,
    q_var: f64,
    /// Noise-free bridge endpoint: the state is pinned to the observation.
    dirac: Option<f64>,
}

#[inline]
fn step_moments<L: Dynamics>(local: &L, kernel: &Kernel<'_>, grid: &TimeGrid, k: usize, x: f64) -> Option<StepMoments> {
    let (mu, v) = local.coefficients(x);
    if !(mu.is_finite() && v.is_finite()) {
        return None;
    }
    let dt = grid.delta_tau;
    let emd_mean = x + mu * dt;
    let emd_var = v * dt;
    let last = k + 1 == grid.substeps;
    let m = match *kernel {
        Kernel::Emd => StepMoments {
            emd_mean,
            emd_var,
            q_mean: emd_mean,
            q_var: emd_var,
            dirac: None,
        },
        Kernel::Mdb(end) => {
            let delta_k = grid.remaining(k);
            let (drift, psi) = mdb_moments(mu, v, end.sigma, end.y, x, delta_k, dt);
            StepMoments {
                emd_mean,
                emd_var,
                q_mean: x + drift * dt,
                q_var: psi * dt,
                dirac: (end.sigma == 0.0 && last).then_some(end.y),
            }
        }
        Kernel::Rb(end, ode) => {
            let delta_k = grid.remaining(k);
            let slope = (ode[k + 1] - ode[k]) / dt;
            let drift = rb_drift(mu, v, end.sigma, end.y, ode[grid.substeps], x - ode[k], slope, delta_k);
            let (_, psi) = mdb_moments(mu, v, end.sigma, end.y, x, delta_k, dt);
            StepMoments {
                emd_mean,
                emd_var,
                q_mean: x + drift * dt,
                q_var: psi * dt,
                dirac: (end.sigma == 0.0 && last).then_some(end.y),
            }
        }
    };
    Some(m)
}

/// Log-density of `x` under a possibly degenerate normal.
#[inline]
fn step_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    if var > 0.0 {
        normal_logpdf(x, mean, var)
    } else if x == mean {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Draws a sub-path into `out` from standard-normal inputs `z` and returns
/// `(log_q, log_f)`, or `(0, 0)` when `densities` is false. Non-finite
/// coefficients poison the path with NaN and return `(-∞, -∞)`.
pub(crate) fn propagate_into<L: Dynamics>(
    local: &L,
    kernel: &Kernel<'_>,
    x_start: f64,
    grid: &TimeGrid,
    z: &[f64],
    out: &mut [f64],
    densities: bool,
) -> (f64, f64) {
    debug_assert_eq!(z.len(), grid.substeps);
    debug_assert_eq!(out.len(), grid.substeps);
    let mut x = x_start;
    let mut log_q = 0.0;
    let mut log_f = 0.0;
    for k in 0..grid.substeps {
        let Some(m) = step_moments(local, kernel, grid, k, x) else {
            out[k..].iter_mut().for_each(|s| *s = f64::NAN);
            return (f64::NEG_INFINITY, f64::NEG_INFINITY);
        };
        let next = match m.dirac {
            Some(y) => y,
            None if m.q_var > 0.0 => m.q_mean + m.q_var.sqrt() * z[k],
            None => m.q_mean,
        };
        if !next.is_finite() {
            out[k..].iter_mut().for_each(|s| *s = f64::NAN);
            return (f64::NEG_INFINITY, f64::NEG_INFINITY);
        }
        if densities {
            if m.dirac.is_none() {
                log_q += step_logpdf(next, m.q_mean, m.q_var);
            }
            log_f += step_logpdf(next, m.emd_mean, m.emd_var);
        }
        out[k] = next;
        x = next;
    }
    (log_q, log_f)
}

/// `(log_q, log_f)` of an existing sub-path.
pub(crate) fn evaluate_path<L: Dynamics>(
    local: &L,
    kernel: &Kernel<'_>,
    x_start: f64,
    grid: &TimeGrid,
    states: &[f64],
) -> (f64, f64) {
    let mut x = x_start;
    let mut log_q = 0.0;
    let mut log_f = 0.0;
    for (k, &next) in states.iter().enumerate() {
        let Some(m) = step_moments(local, kernel, grid, k, x) else {
            return (f64::NEG_INFINITY, f64::NEG_INFINITY);
        };
        match m.dirac {
            Some(y) if next != y => log_q = f64::NEG_INFINITY,
            Some(_) => {}
            None => log_q += step_logpdf(next, m.q_mean, m.q_var),
        }
        log_f += step_logpdf(next, m.emd_mean, m.emd_var);
        x = next;
    }
    (log_q, log_f)
}

fn check_z(z: &[f64], grid: &TimeGrid) -> Result<(), Error> {
    if z.len() != grid.substeps {
        return Err(Error::Config(alloc::format!(
            "expected {} normal draws, got {}",
            grid.substeps,
            z.len()
        )));
    }
    Ok(())
}

fn run_kernel<M: Sdemem + ?Sized>(
    model: &M,
    phi_x: &[f64],
    eta: &[f64],
    kernel: Kernel<'_>,
    x_start: f64,
    grid: &TimeGrid,
    z: &[f64],
) -> Result<SubPath, Error> {
    check_z(z, grid)?;
    let local = model.localize(phi_x, eta);
    let mut states = vec![0.0; grid.substeps];
    let (log_q, log_f) = propagate_into(&local, &kernel, x_start, grid, z, &mut states, true);
    Ok(SubPath { states, log_q, log_f })
}

/// Euler-Maruyama sub-path: `x_{k+1} = x_k + μ_k Δτ + √(v_k Δτ) z_k`.
pub fn euler_propagate<M: Sdemem + ?Sized>(
    model: &M,
    phi_x: &[f64],
    eta: &[f64],
    x_start: f64,
    grid: &TimeGrid,
    z: &[f64],
) -> Result<SubPath, Error> {
    run_kernel(model, phi_x, eta, Kernel::Emd, x_start, grid, z)
}

/// Modified diffusion bridge towards the observation `y_end` at `grid.t1`.
#[allow(clippy::too_many_arguments)]
pub fn mdb_propagate<M: Sdemem + ?Sized>(
    model: &M,
    phi_x: &[f64],
    eta: &[f64],
    x_start: f64,
    grid: &TimeGrid,
    y_end: f64,
    sigma: f64,
    z: &[f64],
) -> Result<SubPath, Error> {
    run_kernel(
        model,
        phi_x,
        eta,
        Kernel::Mdb(BridgeEnd { y: y_end, sigma }),
        x_start,
        grid,
        z,
    )
}

/// Residual bridge; `ode_path` is the drift-ODE solution at the `D + 1` knots.
#[allow(clippy::too_many_arguments)]
pub fn rb_propagate<M: Sdemem + ?Sized>(
    model: &M,
    phi_x: &[f64],
    eta: &[f64],
    x_start: f64,
    grid: &TimeGrid,
    y_end: f64,
    sigma: f64,
    ode_path: &[f64],
    z: &[f64],
) -> Result<SubPath, Error> {
    if ode_path.len() != grid.substeps + 1 {
        return Err(Error::Config(alloc::format!(
            "ODE path needs {} knots, got {}",
            grid.substeps + 1,
            ode_path.len()
        )));
    }
    run_kernel(
        model,
        phi_x,
        eta,
        Kernel::Rb(BridgeEnd { y: y_end, sigma }, ode_path),
        x_start,
        grid,
        z,
    )
}

/// Simulates the latent state at every time in `times` by EMD with
/// `substeps` sub-intervals per observation interval.
pub fn simulate_latent<M: Sdemem + ?Sized>(
    model: &M,
    phi_x: &[f64],
    eta: &[f64],
    times: &[f64],
    substeps: usize,
    stream: &mut Stream,
) -> Result<Vec<f64>, Error> {
    let local = model.localize(phi_x, eta);
    let mut x = model.initial_state(phi_x, eta);
    let mut out = Vec::with_capacity(times.len());
    out.push(x);
    let mut z = vec![0.0; substeps];
    let mut buf = vec![0.0; substeps];
    for w in times.windows(2) {
        let grid = TimeGrid::new(w[0], w[1], substeps)?;
        stream.fill_normal(&mut z);
        let (lq, _) = propagate_into(&local, &Kernel::Emd, x, &grid, &z, &mut buf, false);
        if !lq.is_finite() || buf.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                what: "latent simulation",
                time: w[1],
            });
        }
        x = buf[substeps - 1];
        out.push(x);
    }
    Ok(out)
}
