//! MCMC samplers for SDEMEMs: importance-augmented pseudo-marginal (IAPM),
//! component-wise pseudo-marginal (CWPM) and the mixed particle method
//! (MPM), each with an optional block-correlated variant.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::data::Dataset;
use crate::math::LN_2PI;
use crate::model::{block_indices, log_prior_unconstrained, Block, ParamDef, Sdemem, Theta};
use crate::pfilter::{run_cpf, subject_loglik, FilterConfig, InvariantPath, PathSelection, ResampleScheme};
use crate::relik::{fit_importance, iapm_subject_loglik, IapmConfig, ImportanceKind};
use crate::rng::{derive_seed, RngBlockStore, Stream};
use crate::sdesim::Proposal;
use crate::{map_subjects, Clock, Error};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Iapm,
    Cwpm,
    Mpm,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "iapm" => Some(Method::Iapm),
            "cwpm" => Some(Method::Cwpm),
            "mpm" => Some(Method::Mpm),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Iapm => "iapm",
            Method::Cwpm => "cwpm",
            Method::Mpm => "mpm",
        }
    }

    /// Names of the update blocks whose acceptance is recorded.
    pub fn blocks(self) -> &'static [&'static str] {
        match self {
            Method::Iapm => &["theta"],
            Method::Cwpm => &["eta", "theta_x", "phi_eta"],
            Method::Mpm => &["eta", "sigma", "phi_x", "phi_eta"],
        }
    }
}

/// How MPM updates the observation noise given the latent paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaUpdate {
    Slice,
    /// Random walk on `log σ` with the `σ` variance from `rw_cov`.
    Mh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub correlated: bool,
    pub proposal: Proposal,
    pub scheme: ResampleScheme,
    pub importance: ImportanceKind,
    pub qmc: bool,
    pub particles: usize,
    pub draws: usize,
    pub substeps: usize,
    pub iterations: usize,
    /// Random-walk covariance over all static parameters on the
    /// unconstrained scale, layout order, row-major.
    pub rw_cov: Vec<f64>,
    pub mala_step: f64,
    /// MALA preconditioner over `φ_η` on the unconstrained scale, row-major.
    pub mala_precond: Vec<f64>,
    /// Random-walk standard deviation per random-effect dimension.
    pub re_rw_scales: Vec<f64>,
    /// Accept or reject all random effects together instead of per subject.
    pub joint_eta: bool,
    pub sigma_update: SigmaUpdate,
    pub selection: PathSelection,
    pub seed: u64,
}

impl MethodConfig {
    pub fn new<M: Sdemem + ?Sized>(model: &M, method: Method) -> Self {
        let p = model.layout().len();
        let k = block_indices(model.layout(), Block::PhiEta).len();
        Self {
            method,
            correlated: false,
            proposal: Proposal::Mdb,
            scheme: ResampleScheme::Stratified,
            importance: ImportanceKind::LaplaceMdb,
            qmc: false,
            particles: 10,
            draws: 10,
            substeps: 10,
            iterations: 1000,
            rw_cov: diagonal(p, 0.01),
            mala_step: 0.3,
            mala_precond: diagonal(k, 1.0),
            re_rw_scales: vec![0.1; model.re_dim()],
            joint_eta: false,
            sigma_update: SigmaUpdate::Slice,
            selection: PathSelection::Backward,
            seed: 1,
        }
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            particles: self.particles,
            substeps: self.substeps,
            proposal: self.proposal,
            scheme: self.scheme,
            ess_fraction: 0.5,
        }
    }

    pub fn iapm(&self) -> IapmConfig {
        IapmConfig {
            draws: self.draws,
            filter: self.filter(),
            kind: self.importance,
            qmc: self.qmc,
        }
    }

    pub fn validate<M: Sdemem + ?Sized>(&self, model: &M) -> Result<(), Error> {
        self.filter().validate()?;
        if self.method == Method::Iapm && self.draws == 0 {
            return Err(Error::Config("number of random-effect draws must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        let p = model.layout().len();
        square(&self.rw_cov, p, "rw_cov")?
            .cholesky()
            .ok_or_else(|| Error::Config("rw_cov is not positive definite".into()))?;
        let k = block_indices(model.layout(), Block::PhiEta).len();
        square(&self.mala_precond, k, "mala_precond")?
            .cholesky()
            .ok_or_else(|| Error::Config("mala_precond is not positive definite".into()))?;
        if !(self.mala_step > 0.0) {
            return Err(Error::Config("mala_step must be positive".into()));
        }
        if self.re_rw_scales.len() != model.re_dim() || self.re_rw_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!(
                "re_rw_scales needs {} positive values",
                model.re_dim()
            )));
        }
        Ok(())
    }
}

fn diagonal(n: usize, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = v;
    }
    out
}

fn square(values: &[f64], n: usize, what: &str) -> Result<DMatrix<f64>, Error> {
    if values.len() != n * n {
        return Err(Error::Config(format!(
            "{what} needs {} entries, got {}",
            n * n,
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(n, n, values))
}

/// Lower Cholesky factor of the sub-matrix of `cov` at `idx`.
fn sub_cholesky(cov: &DMatrix<f64>, idx: &[usize]) -> Result<DMatrix<f64>, Error> {
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |i, j| cov[(idx[i], idx[j])]);
    sub.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Config("proposal covariance block is not positive definite".into()))
}

/// Metropolis-Hastings decision: accept iff
/// `ln u < new − old + ln q_backward − ln q_forward`.
pub fn mh_accept(log_target_new: f64, log_target_old: f64, log_q_forward: f64, log_q_backward: f64, u: f64) -> bool {
    if log_target_new.is_nan() || log_target_new == f64::NEG_INFINITY {
        return false;
    }
    if log_target_old == f64::NEG_INFINITY {
        return true;
    }
    u.ln() < log_target_new - log_target_old + log_q_backward - log_q_forward
}

/// Univariate slice sampler (stepping out, then shrinkage) on a log-density.
pub fn slice_sample<F: Fn(f64) -> f64>(f: F, x0: f64, width: f64, max_steps: usize, stream: &mut Stream) -> f64 {
    let log_y = f(x0) + stream.uniform().ln();
    let mut left = x0 - width * stream.uniform();
    let mut right = left + width;
    let mut j = ((max_steps as f64) * stream.uniform()) as usize;
    let mut k = max_steps.saturating_sub(1 + j);
    while j > 0 && f(left) > log_y {
        left -= width;
        j -= 1;
    }
    while k > 0 && f(right) > log_y {
        right += width;
        k -= 1;
    }
    loop {
        let x1 = left + stream.uniform() * (right - left);
        if f(x1) > log_y {
            return x1;
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
        if right - left < 1e-14 * (1.0 + x0.abs()) {
            return x0;
        }
    }
}

/// `φ_η` definitions ordered by their position in the block.
fn phi_eta_defs(layout: &[ParamDef]) -> Vec<ParamDef> {
    let mut defs: Vec<ParamDef> = layout.iter().filter(|d| d.block == Block::PhiEta).copied().collect();
    defs.sort_by_key(|d| d.index);
    defs
}

/// `log P(η_{1:M} | φ_η) + log P(φ_η)` on the unconstrained scale of `φ_η`
/// (natural-scale argument, Jacobian included).
pub fn phi_eta_log_target<M: Sdemem + ?Sized>(model: &M, etas: &[Vec<f64>], phi_eta: &[f64]) -> f64 {
    let re: f64 = etas.iter().map(|e| model.re_logprior(e, phi_eta)).sum();
    let prior: f64 = phi_eta_defs(model.layout())
        .iter()
        .map(|d| {
            let x = phi_eta[d.index];
            d.prior.logpdf(x) + d.transform.log_jacobian(d.transform.to_unconstrained(x))
        })
        .sum();
    re + prior
}

/// Gradient of [`phi_eta_log_target`] with respect to the unconstrained
/// coordinates of `φ_η`.
pub fn phi_eta_gradient<M: Sdemem + ?Sized>(model: &M, etas: &[Vec<f64>], phi_eta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; phi_eta.len()];
    for (j, &(a, b)) in model.re_hyper().iter().enumerate() {
        let mu = phi_eta[a];
        let s = phi_eta[b];
        let s2 = s * s;
        for eta in etas {
            let r = eta[j] - mu;
            g[a] += r / s2;
            g[b] += -1.0 / s + r * r / (s2 * s);
        }
    }
    for d in phi_eta_defs(model.layout()) {
        let x = phi_eta[d.index];
        g[d.index] += d.prior.dlogpdf(x);
        if d.transform == crate::model::Transform::Log {
            g[d.index] = g[d.index] * x + 1.0;
        }
    }
    g
}

fn phi_eta_to_u(defs: &[ParamDef], phi_eta: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        defs.len(),
        defs.iter().map(|d| d.transform.to_unconstrained(phi_eta[d.index])),
    )
}

fn u_to_phi_eta(defs: &[ParamDef], u: &DVector<f64>) -> Vec<f64> {
    let mut out = vec![0.0; defs.len()];
    for (d, &ui) in defs.iter().zip(u.iter()) {
        out[d.index] = d.transform.to_natural(ui);
    }
    out
}

/// Preconditioned MALA proposal for `φ_η` given the random effects.
///
/// With `P = L Lᵀ` and step `ε`, proposes
/// `u' = u + (ε²/2) P ∇ + ε L z` on the unconstrained scale and returns the
/// natural-scale proposal with the forward and backward proposal
/// log-densities. `None` when a gradient is not finite.
pub fn mala_propose<M: Sdemem + ?Sized>(
    model: &M,
    etas: &[Vec<f64>],
    phi_eta: &[f64],
    precond_chol: &DMatrix<f64>,
    step: f64,
    z: &[f64],
) -> Option<(Vec<f64>, f64, f64)> {
    let defs = phi_eta_defs(model.layout());
    let k = defs.len();
    let precond = precond_chol * precond_chol.transpose();
    let u = phi_eta_to_u(&defs, phi_eta);
    let g = DVector::from_vec(phi_eta_gradient(model, etas, phi_eta));
    if g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let half = 0.5 * step * step;
    let mean_f = &u + half * (&precond * &g);
    let u_new = &mean_f + step * (precond_chol * DVector::from_column_slice(z));
    let phi_new = u_to_phi_eta(&defs, &u_new);
    let g_new = DVector::from_vec(phi_eta_gradient(model, etas, &phi_new));
    if g_new.iter().any(|v| !v.is_finite()) || phi_new.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mean_b = &u_new + half * (&precond * &g_new);
    let log_det = 2.0 * precond_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>() + 2.0 * k as f64 * step.ln();
    let logq = |x: &DVector<f64>, m: &DVector<f64>| {
        let w = precond_chol
            .solve_lower_triangular(&(x - m))
            .unwrap_or_else(|| DVector::from_element(k, f64::INFINITY));
        -0.5 * (k as f64 * LN_2PI + log_det + w.norm_squared() / (step * step))
    };
    Some((phi_new, logq(&u_new, &mean_f), logq(&u, &mean_b)))
}

/// Source of likelihood evaluations for the samplers.
pub trait LikelihoodBackend: Sync {
    type Model: Sdemem;

    fn model(&self) -> &Self::Model;

    fn num_subjects(&self) -> usize;

    /// `log P̂(y_m | η_m, σ, φ_X)` from the block keyed by `seed`.
    fn subject_loglik(&self, theta: &Theta, eta: &[f64], m: usize, seed: u64) -> Result<f64, Error>;

    /// `log P̂(y_m | θ)` with the random effects integrated out.
    fn marginal_loglik(&self, theta: &Theta, m: usize, seed: u64) -> Result<f64, Error>;

    /// `Σ_t log g(y_{m,t} | x_{m,t}, σ)` along `path`, with the initial state
    /// taken from the current `(φ_X, η_m)`.
    fn path_loglik(&self, theta: &Theta, eta: &[f64], m: usize, path: &InvariantPath) -> f64;

    /// Draws a new latent path by conditional particle filtering.
    fn refresh_path(
        &self,
        theta: &Theta,
        eta: &[f64],
        m: usize,
        path: Option<&InvariantPath>,
        stream: &mut Stream,
    ) -> Result<InvariantPath, Error>;

    /// Starting random effects for subject `m`.
    fn initial_eta(&self, theta: &Theta, m: usize) -> Vec<f64>;
}

/// Particle-filter likelihoods on a dataset.
pub struct ParticleBackend<'a, M: Sdemem> {
    pub model: &'a M,
    pub dataset: &'a Dataset,
    pub iapm: IapmConfig,
    pub selection: PathSelection,
}

impl<'a, M: Sdemem> ParticleBackend<'a, M> {
    pub fn new(model: &'a M, dataset: &'a Dataset, cfg: &MethodConfig) -> Self {
        Self {
            model,
            dataset,
            iapm: cfg.iapm(),
            selection: cfg.selection,
        }
    }
}

impl<M: Sdemem> LikelihoodBackend for ParticleBackend<'_, M> {
    type Model = M;

    fn model(&self) -> &M {
        self.model
    }

    fn num_subjects(&self) -> usize {
        self.dataset.num_subjects()
    }

    fn subject_loglik(&self, theta: &Theta, eta: &[f64], m: usize, seed: u64) -> Result<f64, Error> {
        let mut stream = Stream::with_substream(seed, 0);
        subject_loglik(
            self.model,
            theta,
            eta,
            &self.dataset.subjects[m],
            &self.iapm.filter,
            &mut stream,
        )
    }

    fn marginal_loglik(&self, theta: &Theta, m: usize, seed: u64) -> Result<f64, Error> {
        let subject = &self.dataset.subjects[m];
        let density = fit_importance(self.iapm.kind, self.model, theta, subject, self.iapm.filter.substeps);
        iapm_subject_loglik(self.model, theta, subject, &self.iapm, &density, seed)
    }

    fn path_loglik(&self, theta: &Theta, eta: &[f64], m: usize, path: &InvariantPath) -> f64 {
        let s = &self.dataset.subjects[m];
        let x0 = self.model.initial_state(&theta.phi_x, eta);
        (0..s.len())
            .map(|t| {
                let x = if t == 0 { x0 } else { path.at_obs(t) };
                self.model.obs_logdensity(s.obs[t], x, theta.sigma)
            })
            .sum()
    }

    fn refresh_path(
        &self,
        theta: &Theta,
        eta: &[f64],
        m: usize,
        path: Option<&InvariantPath>,
        stream: &mut Stream,
    ) -> Result<InvariantPath, Error> {
        run_cpf(
            self.model,
            theta,
            eta,
            &self.dataset.subjects[m],
            &self.iapm.filter,
            path,
            self.selection,
            stream,
        )
    }

    fn initial_eta(&self, theta: &Theta, m: usize) -> Vec<f64> {
        let s = &self.dataset.subjects[m];
        fit_importance(
            ImportanceKind::LaplaceMdb,
            self.model,
            theta,
            s,
            self.iapm.filter.substeps,
        )
        .mean
    }
}

/// A likelihood that is identically `value`; the posterior is then the
/// prior. Used to check that the samplers leave the prior invariant.
pub struct FrozenBackend<'a, M: Sdemem> {
    pub model: &'a M,
    pub subjects: usize,
    pub value: f64,
}

impl<M: Sdemem> LikelihoodBackend for FrozenBackend<'_, M> {
    type Model = M;

    fn model(&self) -> &M {
        self.model
    }

    fn num_subjects(&self) -> usize {
        self.subjects
    }

    fn subject_loglik(&self, _: &Theta, _: &[f64], _: usize, _: u64) -> Result<f64, Error> {
        Ok(self.value)
    }

    fn marginal_loglik(&self, _: &Theta, _: usize, _: u64) -> Result<f64, Error> {
        Ok(self.value)
    }

    fn path_loglik(&self, _: &Theta, _: &[f64], _: usize, _: &InvariantPath) -> f64 {
        0.0
    }

    fn refresh_path(
        &self,
        _: &Theta,
        _: &[f64],
        _: usize,
        _: Option<&InvariantPath>,
        _: &mut Stream,
    ) -> Result<InvariantPath, Error> {
        Ok(InvariantPath {
            states: vec![0.0],
            substeps: 1,
            lineage: vec![0],
        })
    }

    fn initial_eta(&self, theta: &Theta, _: usize) -> Vec<f64> {
        (0..self.model.re_dim())
            .map(|j| self.model.re_moments(&theta.phi_eta, j).0)
            .collect()
    }
}

/// Current position of a chain.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub theta: Theta,
    /// Random effects per subject (empty for IAPM).
    pub etas: Vec<Vec<f64>>,
    pub store: RngBlockStore,
    /// Per-subject log-likelihood estimates matching `store`.
    pub loglik: Vec<f64>,
    /// Latent paths (MPM only).
    pub paths: Vec<InvariantPath>,
}

/// Per-iteration chain output.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub method: Method,
    pub param_names: Vec<&'static str>,
    /// `iterations × p`, natural scale, layout order.
    pub theta: Vec<f64>,
    /// `iterations × (M · re_dim)`; empty for IAPM.
    pub etas: Vec<f64>,
    pub loglik: Vec<f64>,
    /// Log prior of θ on the natural scale.
    pub log_prior: Vec<f64>,
    pub block_names: Vec<&'static str>,
    /// `iterations × blocks`; the fraction of proposals accepted in each
    /// block update (the random-effect block counts subjects).
    pub accept: Vec<f64>,
    pub duration_secs: f64,
    pub final_seeds: Vec<u64>,
}

impl Trace {
    pub fn rows(&self) -> usize {
        self.loglik.len()
    }

    pub fn num_params(&self) -> usize {
        self.param_names.len()
    }

    pub fn theta_row(&self, i: usize) -> &[f64] {
        let p = self.num_params();
        &self.theta[i * p..(i + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.theta_row(i)[j]).collect()
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        let b = self.block_names.len();
        let n = self.rows().max(1) as f64;
        (0..b)
            .map(|k| (0..self.rows()).map(|i| self.accept[i * b + k]).sum::<f64>() / n)
            .collect()
    }
}

/// A running chain.
pub struct Sampler<'b, B: LikelihoodBackend> {
    backend: &'b B,
    cfg: MethodConfig,
    pub state: ChainState,
    rng: Stream,
    iteration: usize,
    all_idx: Vec<usize>,
    theta_x_idx: Vec<usize>,
    phi_x_idx: Vec<usize>,
    sigma_idx: Vec<usize>,
    chol_all: DMatrix<f64>,
    chol_theta_x: DMatrix<f64>,
    chol_phi_x: DMatrix<f64>,
    mala_chol: DMatrix<f64>,
    sigma_sd: f64,
}

impl<'b, B: LikelihoodBackend> Sampler<'b, B> {
    pub fn new(backend: &'b B, cfg: MethodConfig, init: Theta) -> Result<Self, Error> {
        let model = backend.model();
        cfg.validate(model)?;
        let layout = model.layout();
        let p = layout.len();
        let cov = DMatrix::from_row_slice(p, p, &cfg.rw_cov);
        let all_idx: Vec<usize> = (0..p).collect();
        let sigma_idx = block_indices(layout, Block::Sigma);
        let phi_x_idx = block_indices(layout, Block::PhiX);
        let mut theta_x_idx: Vec<usize> = sigma_idx.iter().chain(&phi_x_idx).copied().collect();
        theta_x_idx.sort_unstable();
        let k = phi_eta_defs(layout).len();
        let mala_chol = DMatrix::from_row_slice(k, k, &cfg.mala_precond)
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Config("mala_precond is not positive definite".into()))?;
        let m_subjects = backend.num_subjects();
        let store = RngBlockStore::new(cfg.seed, m_subjects);
        let rng = Stream::with_substream(derive_seed(cfg.seed, u64::MAX), 1);
        let etas: Vec<Vec<f64>> = if cfg.method == Method::Iapm {
            Vec::new()
        } else {
            (0..m_subjects).map(|m| backend.initial_eta(&init, m)).collect()
        };
        let mut sampler = Self {
            backend,
            state: ChainState {
                theta: init,
                etas,
                store,
                loglik: Vec::new(),
                paths: Vec::new(),
            },
            rng,
            iteration: 0,
            chol_all: sub_cholesky(&cov, &all_idx)?,
            chol_theta_x: sub_cholesky(&cov, &theta_x_idx)?,
            chol_phi_x: sub_cholesky(&cov, &phi_x_idx)?,
            sigma_sd: sigma_idx.first().map_or(0.1, |&i| cov[(i, i)].sqrt()),
            all_idx,
            theta_x_idx,
            phi_x_idx,
            sigma_idx,
            mala_chol,
            cfg,
        };
        let seeds = sampler.state.store.block_seeds().to_vec();
        let ll = sampler.evaluate(&sampler.state.theta.clone(), None, &seeds)?;
        if let Some(m) = ll.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "initial log-likelihood of subject {m} is not finite; choose another starting point"
            )));
        }
        sampler.state.loglik = ll;
        if sampler.cfg.method == Method::Mpm {
            let seeds: Vec<u64> = (0..m_subjects).map(|_| sampler.rng.next_u64()).collect();
            let theta = &sampler.state.theta;
            let etas = &sampler.state.etas;
            let paths: Vec<Result<InvariantPath, Error>> = map_subjects(m_subjects, |m| {
                backend.refresh_path(theta, &etas[m], m, None, &mut Stream::new(seeds[m]))
            });
            sampler.state.paths = paths.into_iter().collect::<Result<_, _>>()?;
        }
        Ok(sampler)
    }

    pub fn config(&self) -> &MethodConfig {
        &self.cfg
    }

    /// Per-subject log-likelihoods at `theta` with random effects `etas`
    /// (the chain's own when `None`) and block seeds `seeds`.
    fn evaluate(&self, theta: &Theta, etas: Option<&[Vec<f64>]>, seeds: &[u64]) -> Result<Vec<f64>, Error> {
        let backend = self.backend;
        let out: Vec<Result<f64, Error>> = if self.cfg.method == Method::Iapm {
            map_subjects(seeds.len(), |m| backend.marginal_loglik(theta, m, seeds[m]))
        } else {
            let etas = etas.unwrap_or(&self.state.etas);
            map_subjects(seeds.len(), |m| backend.subject_loglik(theta, &etas[m], m, seeds[m]))
        };
        out.into_iter().collect()
    }

    /// Seeds for a proposal: one cycled block refreshed when correlated,
    /// every block otherwise.
    fn proposed_store(&mut self) -> RngBlockStore {
        let mut store = self.state.store.clone();
        if self.cfg.correlated {
            let c = self.iteration % store.blocks();
            store.refresh_block(c, &mut self.rng);
        } else {
            store.refresh_all(&mut self.rng);
        }
        store
    }

    fn rw_step(&mut self, idx: &[usize], chol: &DMatrix<f64>) -> Theta {
        let layout = self.backend.model().layout();
        let u = DVector::from_vec(self.state.theta.unconstrained(layout, idx));
        let mut z = vec![0.0; idx.len()];
        self.rng.fill_normal(&mut z);
        let u_new = u + chol * DVector::from_vec(z);
        let mut theta = self.state.theta.clone();
        theta.set_unconstrained(layout, idx, u_new.as_slice());
        theta
    }

    /// Pseudo-marginal random-walk update of the static parameters at `idx`.
    fn pmmh_theta(&mut self, idx: &[usize], chol: &DMatrix<f64>) -> Result<f64, Error> {
        let layout = self.backend.model().layout();
        let proposal = self.rw_step(idx, chol);
        let store = self.proposed_store();
        let u = self.rng.uniform();
        let lp_new = log_prior_unconstrained(layout, &proposal, idx);
        if !lp_new.is_finite() || !proposal_is_finite(&proposal) {
            return Ok(0.0);
        }
        let ll_new = self.evaluate(&proposal, None, store.block_seeds())?;
        let new = ll_new.iter().sum::<f64>() + lp_new;
        let old = self.state.loglik.iter().sum::<f64>() + log_prior_unconstrained(layout, &self.state.theta, idx);
        if mh_accept(new, old, 0.0, 0.0, u) {
            self.state.theta = proposal;
            self.state.store = store;
            self.state.loglik = ll_new;
            Ok(1.0)
        } else {
            Ok(0.0)
        }
    }

    /// Random-walk update of every random effect, accepted per subject
    /// (or jointly). Returns the fraction of subjects accepted.
    fn update_etas(&mut self) -> Result<f64, Error> {
        let model = self.backend.model();
        let m_subjects = self.state.etas.len();
        let proposals: Vec<Vec<f64>> = (0..m_subjects)
            .map(|m| {
                self.state.etas[m]
                    .iter()
                    .zip(&self.cfg.re_rw_scales)
                    .map(|(e, s)| e + s * self.rng.normal())
                    .collect()
            })
            .collect();
        let store = self.proposed_store();
        let uniforms: Vec<f64> = (0..m_subjects).map(|_| self.rng.uniform()).collect();
        let ll_new = self.evaluate(&self.state.theta, Some(&proposals), store.block_seeds())?;
        let phi_eta = &self.state.theta.phi_eta;
        let new: Vec<f64> = (0..m_subjects)
            .map(|m| ll_new[m] + model.re_logprior(&proposals[m], phi_eta))
            .collect();
        let old: Vec<f64> = (0..m_subjects)
            .map(|m| self.state.loglik[m] + model.re_logprior(&self.state.etas[m], phi_eta))
            .collect();
        let accepted: Vec<bool> = if self.cfg.joint_eta {
            let all_finite = new.iter().all(|v| v.is_finite());
            let sum_new = if all_finite {
                new.iter().sum()
            } else {
                f64::NEG_INFINITY
            };
            let ok = mh_accept(sum_new, old.iter().sum(), 0.0, 0.0, uniforms[0]);
            vec![ok; m_subjects]
        } else {
            (0..m_subjects)
                .map(|m| mh_accept(new[m], old[m], 0.0, 0.0, uniforms[m]))
                .collect()
        };
        let mut seeds = self.state.store.block_seeds().to_vec();
        let mut count = 0;
        for (m, proposal) in proposals.into_iter().enumerate() {
            if accepted[m] {
                self.state.etas[m] = proposal;
                self.state.loglik[m] = ll_new[m];
                seeds[m] = store.block_seed(m);
                count += 1;
            }
        }
        self.state.store = RngBlockStore::from_seeds(self.state.store.master_seed(), seeds);
        Ok(count as f64 / m_subjects as f64)
    }

    /// MALA update of `φ_η` on its exact conditional.
    fn update_phi_eta(&mut self) -> f64 {
        let model = self.backend.model();
        let k = self.mala_chol.nrows();
        let mut z = vec![0.0; k];
        self.rng.fill_normal(&mut z);
        let u = self.rng.uniform();
        let etas = &self.state.etas;
        let phi = &self.state.theta.phi_eta;
        let Some((phi_new, lq_f, lq_b)) = mala_propose(model, etas, phi, &self.mala_chol, self.cfg.mala_step, &z)
        else {
            return 0.0;
        };
        let new = phi_eta_log_target(model, etas, &phi_new);
        let old = phi_eta_log_target(model, etas, phi);
        if mh_accept(new, old, lq_f, lq_b, u) {
            self.state.theta.phi_eta = phi_new;
            1.0
        } else {
            0.0
        }
    }

    /// `log π(log σ | paths)` for MPM.
    fn sigma_log_target(&self, log_sigma: f64) -> f64 {
        let backend = self.backend;
        let layout = backend.model().layout();
        let mut theta = self.state.theta.clone();
        theta.sigma = log_sigma.exp();
        if !(theta.sigma > 0.0) || !theta.sigma.is_finite() {
            return f64::NEG_INFINITY;
        }
        let obs: f64 = (0..self.state.paths.len())
            .map(|m| backend.path_loglik(&theta, &self.state.etas[m], m, &self.state.paths[m]))
            .sum();
        let v = obs + log_prior_unconstrained(layout, &theta, &self.sigma_idx);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// σ given the latent paths, then a same-store replay of the likelihood.
    fn update_sigma(&mut self) -> Result<f64, Error> {
        let x0 = self.state.theta.sigma.ln();
        let accepted = match self.cfg.sigma_update {
            SigmaUpdate::Slice => {
                let mut rng = self.rng.clone();
                let x1 = slice_sample(|x| self.sigma_log_target(x), x0, 1.0, 50, &mut rng);
                self.rng = rng;
                self.state.theta.sigma = x1.exp();
                1.0
            }
            SigmaUpdate::Mh => {
                let x1 = x0 + self.sigma_sd * self.rng.normal();
                let u = self.rng.uniform();
                if mh_accept(self.sigma_log_target(x1), self.sigma_log_target(x0), 0.0, 0.0, u) {
                    self.state.theta.sigma = x1.exp();
                    1.0
                } else {
                    0.0
                }
            }
        };
        self.state.loglik = self.evaluate(&self.state.theta, None, self.state.store.block_seeds())?;
        Ok(accepted)
    }

    fn refresh_paths(&mut self) -> Result<(), Error> {
        let m_subjects = self.state.etas.len();
        let seeds: Vec<u64> = (0..m_subjects).map(|_| self.rng.next_u64()).collect();
        let backend = self.backend;
        let state = &self.state;
        let paths: Vec<Result<InvariantPath, Error>> = map_subjects(m_subjects, |m| {
            backend.refresh_path(
                &state.theta,
                &state.etas[m],
                m,
                Some(&state.paths[m]),
                &mut Stream::new(seeds[m]),
            )
        });
        self.state.paths = paths.into_iter().collect::<Result<_, _>>()?;
        Ok(())
    }

    pub fn iapm_iteration(&mut self) -> Result<Vec<f64>, Error> {
        let (idx, chol) = (self.all_idx.clone(), self.chol_all.clone());
        Ok(vec![self.pmmh_theta(&idx, &chol)?])
    }

    pub fn cwpm_iteration(&mut self) -> Result<Vec<f64>, Error> {
        let a = self.update_etas()?;
        let (idx, chol) = (self.theta_x_idx.clone(), self.chol_theta_x.clone());
        let b = self.pmmh_theta(&idx, &chol)?;
        let c = self.update_phi_eta();
        Ok(vec![a, b, c])
    }

    pub fn mpm_iteration(&mut self) -> Result<Vec<f64>, Error> {
        let a = self.update_etas()?;
        let b = self.update_sigma()?;
        let (idx, chol) = (self.phi_x_idx.clone(), self.chol_phi_x.clone());
        let c = self.pmmh_theta(&idx, &chol)?;
        let d = self.update_phi_eta();
        self.refresh_paths()?;
        Ok(vec![a, b, c, d])
    }

    /// One iteration of the configured method; returns the acceptance
    /// record of each update block.
    pub fn step(&mut self) -> Result<Vec<f64>, Error> {
        let record = match self.cfg.method {
            Method::Iapm => self.iapm_iteration()?,
            Method::Cwpm => self.cwpm_iteration()?,
            Method::Mpm => self.mpm_iteration()?,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Runs the configured number of iterations.
    pub fn run(mut self, clock: &dyn Clock) -> Result<Trace, Error> {
        let model = self.backend.model();
        let layout = model.layout();
        let n = self.cfg.iterations;
        let p = layout.len();
        let blocks = self.cfg.method.blocks();
        let mut trace = Trace {
            method: self.cfg.method,
            param_names: layout.iter().map(|d| d.name).collect(),
            theta: Vec::with_capacity(n * p),
            etas: Vec::new(),
            loglik: Vec::with_capacity(n),
            log_prior: Vec::with_capacity(n),
            block_names: blocks.to_vec(),
            accept: Vec::with_capacity(n * blocks.len()),
            duration_secs: 0.0,
            final_seeds: Vec::new(),
        };
        let start = clock.seconds();
        for _ in 0..n {
            let record = self.step()?;
            let flat = self.state.theta.to_flat(layout);
            trace
                .log_prior
                .push(layout.iter().zip(&flat).map(|(d, &x)| d.prior.logpdf(x)).sum());
            trace.theta.extend_from_slice(&flat);
            for eta in &self.state.etas {
                trace.etas.extend_from_slice(eta);
            }
            trace.loglik.push(self.state.loglik.iter().sum());
            trace.accept.extend_from_slice(&record);
        }
        trace.duration_secs = clock.seconds() - start;
        trace.final_seeds = self.state.store.block_seeds().to_vec();
        Ok(trace)
    }
}

fn proposal_is_finite(theta: &Theta) -> bool {
    theta.sigma.is_finite() && theta.phi_x.iter().chain(&theta.phi_eta).all(|v| v.is_finite())
}

/// Builds a sampler for `cfg.method` and runs it.
pub fn run_chain<B: LikelihoodBackend>(
    backend: &B,
    cfg: &MethodConfig,
    init: &Theta,
    clock: &dyn Clock,
) -> Result<Trace, Error> {
    Sampler::new(backend, cfg.clone(), init.clone())?.run(clock)
}

/// IAPM chain on particle-filter likelihoods.
pub fn iapm_chain<M: Sdemem>(
    model: &M,
    dataset: &Dataset,
    cfg: &MethodConfig,
    init: &Theta,
    clock: &dyn Clock,
) -> Result<Trace, Error> {
    if cfg.method != Method::Iapm {
        return Err(Error::Config("iapm_chain needs method = iapm".into()));
    }
    run_chain(&ParticleBackend::new(model, dataset, cfg), cfg, init, clock)
}
