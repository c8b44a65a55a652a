//! SDE mixed-effects model definitions.
//!
//! A model is a one-dimensional SDE `dX = μ(X; φ_X, η_m) dt + √v(X; φ_X, η_m) dB`
//! observed through `y ~ N(x, σ²)`, with subject-level random effects
//! `η_m` drawn from independent normals whose means and standard deviations
//! are the hyperparameters `φ_η`.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::math::{half_normal_logpdf, normal_logpdf};
use crate::rng::Stream;
use crate::Error;

/// Scale on which a parameter is explored by the samplers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log,
}

impl Transform {
    #[inline]
    pub fn to_unconstrained(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
        }
    }

    #[inline]
    pub fn to_natural(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
        }
    }

    /// `ln |dx/du|` at unconstrained value `u`.
    #[inline]
    pub fn log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Log => u,
        }
    }
}

/// Prior on a static parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prior {
    Normal {
        mean: f64,
        sd: f64,
    },
    /// Density `2·N(x; 0, scale²)` on `x ≥ 0`.
    HalfNormal {
        scale: f64,
    },
}

impl Prior {
    pub fn logpdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => normal_logpdf(x, mean, sd * sd),
            Prior::HalfNormal { scale } => half_normal_logpdf(x, scale),
        }
    }

    /// Derivative of `logpdf` with respect to `x`.
    pub fn dlogpdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => -(x - mean) / (sd * sd),
            Prior::HalfNormal { scale } => -x / (scale * scale),
        }
    }

    pub fn sample(&self, stream: &mut Stream) -> f64 {
        match *self {
            Prior::Normal { mean, sd } => mean + sd * stream.normal(),
            Prior::HalfNormal { scale } => (scale * stream.normal()).abs(),
        }
    }
}

/// Parameter block of `θ = (σ, φ_X, φ_η)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    Sigma,
    PhiX,
    PhiEta,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamDef {
    pub name: &'static str,
    pub block: Block,
    /// Position inside the block vector.
    pub index: usize,
    pub transform: Transform,
    pub prior: Prior,
}

/// Static parameters on the natural scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    pub sigma: f64,
    pub phi_x: Vec<f64>,
    pub phi_eta: Vec<f64>,
}

impl Theta {
    pub fn get(&self, def: &ParamDef) -> f64 {
        match def.block {
            Block::Sigma => self.sigma,
            Block::PhiX => self.phi_x[def.index],
            Block::PhiEta => self.phi_eta[def.index],
        }
    }

    pub fn set(&mut self, def: &ParamDef, value: f64) {
        match def.block {
            Block::Sigma => self.sigma = value,
            Block::PhiX => self.phi_x[def.index] = value,
            Block::PhiEta => self.phi_eta[def.index] = value,
        }
    }

    /// Builds θ from a flat vector ordered like `layout`.
    pub fn from_flat(layout: &[ParamDef], values: &[f64]) -> Self {
        let n_x = layout.iter().filter(|d| d.block == Block::PhiX).count();
        let n_eta = layout.iter().filter(|d| d.block == Block::PhiEta).count();
        let mut theta = Theta {
            sigma: 0.0,
            phi_x: alloc::vec![0.0; n_x],
            phi_eta: alloc::vec![0.0; n_eta],
        };
        for (def, &v) in layout.iter().zip(values) {
            theta.set(def, v);
        }
        theta
    }

    pub fn to_flat(&self, layout: &[ParamDef]) -> Vec<f64> {
        layout.iter().map(|d| self.get(d)).collect()
    }

    /// Unconstrained coordinates of the parameters at `indices` (layout positions).
    pub fn unconstrained(&self, layout: &[ParamDef], indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .map(|&i| layout[i].transform.to_unconstrained(self.get(&layout[i])))
            .collect()
    }

    pub fn set_unconstrained(&mut self, layout: &[ParamDef], indices: &[usize], u: &[f64]) {
        for (&i, &ui) in indices.iter().zip(u) {
            self.set(&layout[i], layout[i].transform.to_natural(ui));
        }
    }
}

/// Layout positions of every parameter in `block`.
pub fn block_indices(layout: &[ParamDef], block: Block) -> Vec<usize> {
    layout
        .iter()
        .enumerate()
        .filter(|(_, d)| d.block == block)
        .map(|(i, _)| i)
        .collect()
}

/// Log prior of the parameters at `indices` on the unconstrained scale
/// (natural-scale prior plus the log-Jacobian of the transform).
pub fn log_prior_unconstrained(layout: &[ParamDef], theta: &Theta, indices: &[usize]) -> f64 {
    indices
        .iter()
        .map(|&i| {
            let def = &layout[i];
            let x = theta.get(def);
            def.prior.logpdf(x) + def.transform.log_jacobian(def.transform.to_unconstrained(x))
        })
        .sum()
}

/// Drift and squared diffusion of one subject with its parameters bound.
pub trait Dynamics: Copy + Send + Sync {
    /// `(μ(x), v(x))`.
    fn coefficients(&self, x: f64) -> (f64, f64);
}

/// A one-dimensional SDEMEM with Gaussian observations and independent
/// normal random-effect priors.
pub trait Sdemem: Sync {
    type Local: Dynamics;

    fn name(&self) -> &'static str;

    /// Static parameters in reporting order.
    fn layout(&self) -> &'static [ParamDef];

    fn re_names(&self) -> &'static [&'static str];

    /// For each random effect, the `(mean, sd)` positions inside `φ_η`.
    fn re_hyper(&self) -> &'static [(usize, usize)];

    /// Binds `(φ_X, η_m)` for fast repeated evaluation.
    fn localize(&self, phi_x: &[f64], eta: &[f64]) -> Self::Local;

    /// `X_{m,0}` as a function of `(φ_X, η_m)`.
    fn initial_state(&self, phi_x: &[f64], eta: &[f64]) -> f64;

    fn re_dim(&self) -> usize {
        self.re_hyper().len()
    }

    fn drift(&self, x: f64, phi_x: &[f64], eta: &[f64]) -> f64 {
        self.localize(phi_x, eta).coefficients(x).0
    }

    fn diffusion_sq(&self, x: f64, phi_x: &[f64], eta: &[f64]) -> f64 {
        self.localize(phi_x, eta).coefficients(x).1
    }

    fn obs_logdensity(&self, y: f64, x: f64, sigma: f64) -> f64 {
        normal_logpdf(y, x, sigma * sigma)
    }

    /// Mean and standard deviation of random effect `j` under `φ_η`.
    fn re_moments(&self, phi_eta: &[f64], j: usize) -> (f64, f64) {
        let (a, b) = self.re_hyper()[j];
        (phi_eta[a], phi_eta[b])
    }

    fn re_logprior(&self, eta: &[f64], phi_eta: &[f64]) -> f64 {
        (0..self.re_dim())
            .map(|j| {
                let (mu, sd) = self.re_moments(phi_eta, j);
                normal_logpdf(eta[j], mu, sd * sd)
            })
            .sum()
    }

    fn re_sample(&self, phi_eta: &[f64], stream: &mut Stream) -> Vec<f64> {
        (0..self.re_dim())
            .map(|j| {
                let (mu, sd) = self.re_moments(phi_eta, j);
                mu + sd * stream.normal()
            })
            .collect()
    }
}

/// Bound coefficients of the built-in models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BuiltinDynamics {
    Constant {
        beta: f64,
        gamma_sq: f64,
    },
    /// `k = 2(ρ − 1)`.
    Tumour {
        beta: f64,
        gamma_sq: f64,
        k: f64,
    },
}

/// Exponent cap for `e^{2(ρ−1)x}`.
const TUMOUR_EXP_CAP: f64 = 700.0;

impl BuiltinDynamics {
    pub fn constant(beta: f64, gamma: f64) -> Self {
        BuiltinDynamics::Constant {
            beta,
            gamma_sq: gamma * gamma,
        }
    }

    pub fn tumour(beta: f64, gamma: f64, rho: f64) -> Self {
        BuiltinDynamics::Tumour {
            beta,
            gamma_sq: gamma * gamma,
            k: 2.0 * (rho - 1.0),
        }
    }
}

impl Dynamics for BuiltinDynamics {
    #[inline]
    fn coefficients(&self, x: f64) -> (f64, f64) {
        match *self {
            BuiltinDynamics::Constant { beta, gamma_sq } => (beta, gamma_sq),
            BuiltinDynamics::Tumour { beta, gamma_sq, k } => {
                if k == 0.0 {
                    return (beta, gamma_sq);
                }
                let e = (k * x).min(TUMOUR_EXP_CAP).exp();
                (beta + 0.5 * gamma_sq * (1.0 - e), gamma_sq * e)
            }
        }
    }
}

/// The two built-in models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    /// `dX = β_m dt + γ dB`, `X_0 = x0`, `log β_m ~ N(μ_β, σ_β²)`.
    Constant,
    /// Log tumour volume: `dX = (β_m + γ²/2·(1 − e^{2(ρ−1)X})) dt + γ e^{(ρ−1)X} dB`,
    /// `X_{m0} ~ N(μ_X0, σ_X0²)`, `log β_m ~ N(μ_β, σ_β²)`.
    Tumour,
}

const CONSTANT_LAYOUT: [ParamDef; 5] = [
    ParamDef {
        name: "sigma",
        block: Block::Sigma,
        index: 0,
        transform: Transform::Log,
        prior: Prior::HalfNormal { scale: 5.0 },
    },
    ParamDef {
        name: "gamma",
        block: Block::PhiX,
        index: 0,
        transform: Transform::Log,
        prior: Prior::HalfNormal { scale: 5.0 },
    },
    ParamDef {
        name: "x0",
        block: Block::PhiX,
        index: 1,
        transform: Transform::Identity,
        prior: Prior::Normal { mean: 0.0, sd: 10.0 },
    },
    ParamDef {
        name: "mu_beta",
        block: Block::PhiEta,
        index: 0,
        transform: Transform::Identity,
        prior: Prior::Normal { mean: 0.0, sd: 4.0 },
    },
    ParamDef {
        name: "sigma_beta",
        block: Block::PhiEta,
        index: 1,
        transform: Transform::Log,
        prior: Prior::HalfNormal { scale: 5.0 },
    },
];

const TUMOUR_LAYOUT: [ParamDef; 7] = [
    ParamDef {
        name: "mu_x0",
        block: Block::PhiEta,
        index: 0,
        transform: Transform::Identity,
        prior: Prior::Normal { mean: 3.0, sd: 4.0 },
    },
    ParamDef {
        name: "sigma_x0",
        block: Block::PhiEta,
        index: 1,
        transform: Transform::Log,
        prior: Prior::HalfNormal { scale: 5.0 },
    },
    ParamDef {
        name: "mu_beta",
        block: Block::PhiEta,
        index: 2,
        transform: Transform::Identity,
        prior: Prior::Normal { mean: 0.0, sd: 4.0 },
    },
    ParamDef {
        name: "sigma_beta",
        block: Block::PhiEta,
        index: 3,
        transform: Transform::Log,
        prior: Prior::HalfNormal { scale: 5.0 },
    },
    ParamDef {
        name: "gamma",
        block: Block::PhiX,
        index: 0,
        transform: Transform::Log,
        prior: Prior::HalfNormal { scale: 5.0 },
    },
    ParamDef {
        name: "sigma",
        block: Block::Sigma,
        index: 0,
        transform: Transform::Log,
        prior: Prior::HalfNormal { scale: 5.0 },
    },
    ParamDef {
        name: "rho",
        block: Block::PhiX,
        index: 1,
        transform: Transform::Identity,
        prior: Prior::Normal { mean: 1.0, sd: 0.5 },
    },
];

/// Looks up a built-in model by name (`constant` or `tumour`).
pub fn builtin_model(name: &str) -> Result<ModelSpec, Error> {
    match name {
        "constant" => Ok(ModelSpec::Constant),
        "tumour" | "tumor" => Ok(ModelSpec::Tumour),
        other => Err(Error::Config(alloc::format!("unknown model `{other}`"))),
    }
}

impl Sdemem for ModelSpec {
    type Local = BuiltinDynamics;

    fn name(&self) -> &'static str {
        match self {
            ModelSpec::Constant => "constant",
            ModelSpec::Tumour => "tumour",
        }
    }

    fn layout(&self) -> &'static [ParamDef] {
        match self {
            ModelSpec::Constant => &CONSTANT_LAYOUT,
            ModelSpec::Tumour => &TUMOUR_LAYOUT,
        }
    }

    fn re_names(&self) -> &'static [&'static str] {
        match self {
            ModelSpec::Constant => &["log_beta"],
            ModelSpec::Tumour => &["x0", "log_beta"],
        }
    }

    fn re_hyper(&self) -> &'static [(usize, usize)] {
        match self {
            ModelSpec::Constant => &[(0, 1)],
            ModelSpec::Tumour => &[(0, 1), (2, 3)],
        }
    }

    #[inline]
    fn localize(&self, phi_x: &[f64], eta: &[f64]) -> BuiltinDynamics {
        match self {
            ModelSpec::Constant => BuiltinDynamics::constant(eta[0].exp(), phi_x[0]),
            ModelSpec::Tumour => BuiltinDynamics::tumour(eta[1].exp(), phi_x[0], phi_x[1]),
        }
    }

    fn initial_state(&self, phi_x: &[f64], eta: &[f64]) -> f64 {
        match self {
            ModelSpec::Constant => phi_x[1],
            ModelSpec::Tumour => eta[0],
        }
    }
}

/// Exact transition moments of the constant model over a step `dt`.
pub fn exact_transition_constant(x: f64, beta: f64, gamma: f64, dt: f64) -> (f64, f64) {
    (x + beta * dt, gamma * gamma * dt)
}

/// Integrates the drift ODE `dx/dt = μ(x)` with classical RK4, `substeps`
/// steps per interval, returning the state at every entry of `times`.
pub fn solve_drift_ode<M: Sdemem + ?Sized>(
    model: &M,
    phi_x: &[f64],
    eta: &[f64],
    times: &[f64],
    substeps: usize,
) -> Result<Vec<f64>, Error> {
    let local = model.localize(phi_x, eta);
    let x0 = model.initial_state(phi_x, eta);
    solve_ode_local(&local, x0, times, substeps)
}

pub(crate) fn solve_ode_local<L: Dynamics>(
    local: &L,
    x0: f64,
    times: &[f64],
    substeps: usize,
) -> Result<Vec<f64>, Error> {
    let substeps = substeps.max(1);
    let mut out = Vec::with_capacity(times.len());
    let mut x = x0;
    if !x.is_finite() {
        return Err(Error::NonFinite {
            what: "drift ODE",
            time: times.first().copied().unwrap_or(0.0),
        });
    }
    out.push(x);
    let f = |x: f64| local.coefficients(x).0;
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let k1 = f(x);
            let k2 = f(x + 0.5 * h * k1);
            let k3 = f(x + 0.5 * h * k2);
            let k4 = f(x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: "drift ODE",
                    time: w[0] + h * (s + 1) as f64,
                });
            }
        }
        out.push(x);
    }
    Ok(out)
}
