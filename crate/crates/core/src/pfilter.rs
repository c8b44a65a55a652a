//! Particle filters for a single subject and the block-structured total
//! likelihood over all subjects.
//!
//! All weight arithmetic is in log space. Each observation step consumes a
//! fixed slice of its stream (`N` resampling uniforms, then `N·D` normals),
//! whether or not the adaptive rule actually resamples, so replays under a
//! partially refreshed block store stay aligned.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::data::{Dataset, Subject};
use crate::math::{normal_logpdf, normalise_log_weights};
use crate::model::{solve_ode_local, Dynamics, Sdemem, Theta};
use crate::rng::{RngBlockStore, Stream};
use crate::sdesim::{evaluate_path, propagate_into, BridgeEnd, Kernel, Proposal, TimeGrid};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResampleScheme {
    Multinomial,
    Stratified,
}

impl ResampleScheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multinomial" => Some(ResampleScheme::Multinomial),
            "stratified" => Some(ResampleScheme::Stratified),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResampleScheme::Multinomial => "multinomial",
            ResampleScheme::Stratified => "stratified",
        }
    }
}

/// Settings shared by every particle filter run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    pub particles: usize,
    pub substeps: usize,
    pub proposal: Proposal,
    pub scheme: ResampleScheme,
    /// Resample when the effective sample size drops below this fraction of N.
    pub ess_fraction: f64,
}

impl FilterConfig {
    pub fn new(particles: usize, substeps: usize, proposal: Proposal) -> Self {
        Self {
            particles,
            substeps,
            proposal,
            scheme: ResampleScheme::Stratified,
            ess_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.particles == 0 {
            return Err(Error::Config("particle count must be at least 1".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("number of sub-steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Particle population after the last observation of a subject.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    /// States at the final observation time.
    pub states: Vec<f64>,
    /// Unnormalised log-weights at the final observation time.
    pub log_weights: Vec<f64>,
    pub norm_weights: Vec<f64>,
    /// Row-major `T × N`; row `t ≥ 1` holds the parent (at `t − 1`) of each
    /// particle at `t`. Row 0 is the identity.
    pub ancestry: Vec<u32>,
    pub particles: usize,
    /// Running log of `Π_t Σ_n w_t^{(n)}`.
    pub log_lik: f64,
    /// Whether the population was resampled before each step `t ≥ 1`.
    pub resampled: Vec<bool>,
}

impl ParticleCloud {
    pub fn parent(&self, t: usize, n: usize) -> usize {
        self.ancestry[t * self.particles + n] as usize
    }

    pub fn steps(&self) -> usize {
        self.ancestry.len() / self.particles
    }
}

/// Draws `parents.len()` parent indices from normalised `weights`.
///
/// Multinomial inverts the weight CDF at each uniform; stratified inverts it
/// at `(n + u_n)/N`.
pub fn resample(weights: &[f64], scheme: ResampleScheme, uniforms: &[f64], parents: &mut [usize]) -> Result<(), Error> {
    let n_out = parents.len();
    debug_assert_eq!(uniforms.len(), n_out);
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::WeightCollapse);
    }
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    match scheme {
        ResampleScheme::Stratified => {
            let mut cum = weights[0] / total;
            let mut i = 0;
            for (n, p) in parents.iter_mut().enumerate() {
                let target = (n as f64 + uniforms[n]) / n_out as f64;
                while cum < target && i < last_positive {
                    i += 1;
                    cum += weights[i] / total;
                }
                *p = i;
            }
        }
        ResampleScheme::Multinomial => {
            let mut cdf = Vec::with_capacity(weights.len());
            let mut acc = 0.0;
            for &w in weights {
                acc += w / total;
                cdf.push(acc);
            }
            for (p, &u) in parents.iter_mut().zip(uniforms) {
                let i = cdf.partition_point(|&c| c < u);
                *p = i.min(last_positive);
            }
        }
    }
    Ok(())
}

/// Proposal kernel for interval `t − 1 → t`, borrowing the RB ODE path.
fn kernel_for<'a>(proposal: Proposal, y: f64, sigma: f64, ode: &'a [f64], t: usize, d: usize) -> Kernel<'a> {
    let end = BridgeEnd { y, sigma };
    match proposal {
        Proposal::Emd => Kernel::Emd,
        Proposal::Mdb => Kernel::Mdb(end),
        Proposal::Rb => Kernel::Rb(end, &ode[(t - 1) * d..=t * d]),
    }
}

/// Drift-ODE path on every knot of the subject's sub-grid (RB only).
fn ode_on_knots<L: Dynamics>(local: &L, x0: f64, times: &[f64], d: usize) -> Result<Vec<f64>, Error> {
    let mut knots = Vec::with_capacity((times.len() - 1) * d + 1);
    knots.push(times[0]);
    for w in times.windows(2) {
        let g = TimeGrid::new(w[0], w[1], d)?;
        knots.extend((1..=d).map(|k| g.knot(k)));
    }
    solve_ode_local(local, x0, &knots, 1)
}

struct Prepared<L> {
    local: L,
    x0: f64,
    ode: Vec<f64>,
}

fn prepare<M: Sdemem + ?Sized>(
    model: &M,
    theta: &Theta,
    eta: &[f64],
    subject: &Subject,
    cfg: &FilterConfig,
) -> Result<Prepared<M::Local>, Error> {
    cfg.validate()?;
    let local = model.localize(&theta.phi_x, eta);
    let x0 = model.initial_state(&theta.phi_x, eta);
    let ode = if cfg.proposal == Proposal::Rb && subject.len() > 1 {
        match ode_on_knots(&local, x0, &subject.times, cfg.substeps) {
            Ok(path) => path,
            Err(Error::NonFinite { .. }) => Vec::new(),
            Err(e) => return Err(e),
        }
    } else {
        Vec::new()
    };
    Ok(Prepared { local, x0, ode })
}

/// Runs the particle filter for one subject and returns the log of the
/// unbiased likelihood estimate together with the final cloud.
///
/// A weight collapse yields `log_lik = -∞`, which is a valid estimate.
pub fn run_pf<M: Sdemem + ?Sized>(
    model: &M,
    theta: &Theta,
    eta: &[f64],
    subject: &Subject,
    cfg: &FilterConfig,
    stream: &mut Stream,
) -> Result<(f64, ParticleCloud), Error> {
    let prep = prepare(model, theta, eta, subject, cfg)?;
    let n = cfg.particles;
    let d = cfg.substeps;
    let t_len = subject.len();
    let sigma = theta.sigma;
    let log_n = (n as f64).ln();

    let mut states = vec![prep.x0; n];
    let mut log_w = vec![model.obs_logdensity(subject.obs[0], prep.x0, sigma) - log_n; n];
    let mut norm_w = vec![0.0; n];
    let mut ancestry: Vec<u32> = Vec::with_capacity(t_len * n);
    ancestry.extend(0..n as u32);
    let mut resampled = Vec::with_capacity(t_len.saturating_sub(1));
    let (mut log_lik, mut ess) = normalise_log_weights(&log_w, &mut norm_w);

    let rb_broken = cfg.proposal == Proposal::Rb && t_len > 1 && prep.ode.is_empty();
    let mut z = vec![0.0; n * d];
    let mut u = vec![0.0; n];
    let mut parents = vec![0usize; n];
    let mut prev_log_w = vec![0.0; n];
    let mut new_states = vec![0.0; n];
    let mut buf = vec![0.0; d];

    for t in 1..t_len {
        if !log_lik.is_finite() || rb_broken {
            log_lik = f64::NEG_INFINITY;
            break;
        }
        debug_assert!((norm_w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        stream.fill_uniform(&mut u);
        stream.fill_normal(&mut z);

        let do_resample = ess < cfg.ess_fraction * n as f64;
        if do_resample {
            resample(&norm_w, cfg.scheme, &u, &mut parents)?;
            prev_log_w.iter_mut().for_each(|w| *w = -log_n);
        } else {
            parents.iter_mut().enumerate().for_each(|(i, p)| *p = i);
            for (pw, &w) in prev_log_w.iter_mut().zip(&norm_w) {
                *pw = w.ln();
            }
        }
        resampled.push(do_resample);
        ancestry.extend(parents.iter().map(|&p| p as u32));

        let grid = TimeGrid::new(subject.times[t - 1], subject.times[t], d)?;
        let y = subject.obs[t];
        let kernel = kernel_for(cfg.proposal, y, sigma, &prep.ode, t, d);
        let bootstrap = cfg.proposal == Proposal::Emd;
        for i in 0..n {
            if prev_log_w[i] == f64::NEG_INFINITY {
                log_w[i] = f64::NEG_INFINITY;
                new_states[i] = states[parents[i]];
                continue;
            }
            let (lq, lf) = propagate_into(
                &prep.local,
                &kernel,
                states[parents[i]],
                &grid,
                &z[i * d..(i + 1) * d],
                &mut buf,
                !bootstrap,
            );
            let x = buf[d - 1];
            new_states[i] = x;
            log_w[i] = if lq == f64::NEG_INFINITY || !x.is_finite() {
                f64::NEG_INFINITY
            } else {
                prev_log_w[i] + model.obs_logdensity(y, x, sigma) + lf - lq
            };
        }
        core::mem::swap(&mut states, &mut new_states);
        let (lse, new_ess) = normalise_log_weights(&log_w, &mut norm_w);
        log_lik += lse;
        ess = new_ess;
    }

    let cloud = ParticleCloud {
        states,
        log_weights: log_w,
        norm_weights: norm_w,
        ancestry,
        particles: n,
        log_lik,
        resampled,
    };
    Ok((log_lik, cloud))
}

/// Log-likelihood estimate for one subject from its block stream.
pub fn subject_loglik<M: Sdemem + ?Sized>(
    model: &M,
    theta: &Theta,
    eta: &[f64],
    subject: &Subject,
    cfg: &FilterConfig,
    stream: &mut Stream,
) -> Result<f64, Error> {
    match run_pf(model, theta, eta, subject, cfg, stream) {
        Ok((ll, _)) => Ok(ll),
        Err(Error::Config(msg)) => Err(Error::Config(msg)),
        Err(_) => Ok(f64::NEG_INFINITY),
    }
}

/// Total log-likelihood estimate `Σ_m log P̂(y_m | η_m, σ, φ_X)`, each
/// subject filtered with sub-stream 0 of its own block.
pub fn total_loglik<M: Sdemem + ?Sized>(
    model: &M,
    theta: &Theta,
    etas: &[Vec<f64>],
    dataset: &Dataset,
    cfg: &FilterConfig,
    store: &RngBlockStore,
) -> Result<(f64, Vec<f64>), Error> {
    if store.blocks() != dataset.num_subjects() || etas.len() != dataset.num_subjects() {
        return Err(Error::Config(
            "block store, random effects and dataset disagree on subject count".into(),
        ));
    }
    let per: Vec<Result<f64, Error>> = crate::map_subjects(dataset.num_subjects(), |m| {
        let mut stream = store.stream(m, 0);
        subject_loglik(model, theta, &etas[m], &dataset.subjects[m], cfg, &mut stream)
    });
    let per = per.into_iter().collect::<Result<Vec<f64>, Error>>()?;
    Ok((per.iter().sum(), per))
}

/// A latent path held fixed by the conditional particle filter: the state
/// at the first observation followed by `D` sub-step states per interval.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantPath {
    pub states: Vec<f64>,
    pub substeps: usize,
    /// Particle index selected at each observation time.
    pub lineage: Vec<usize>,
}

impl InvariantPath {
    pub fn observations(&self) -> usize {
        if self.states.is_empty() {
            0
        } else {
            (self.states.len() - 1) / self.substeps + 1
        }
    }

    /// State at observation `t`.
    pub fn at_obs(&self, t: usize) -> f64 {
        self.states[t * self.substeps]
    }

    /// Sub-path `x_{τ_1}, …, x_{τ_D}` ending at observation `t ≥ 1`.
    pub fn segment(&self, t: usize) -> &[f64] {
        &self.states[(t - 1) * self.substeps + 1..=t * self.substeps]
    }
}

/// How the conditional filter picks its output path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathSelection {
    /// Backward simulation with weights `W_t^n f(x_{t+1} | x_t^n)`.
    Backward,
    /// Trace the ancestry of a particle drawn at the final time.
    Ancestral,
}

/// Forward pass of the conditional particle filter, kept for path selection.
#[derive(Clone, Debug)]
pub struct ConditionalCloud {
    pub particles: usize,
    pub substeps: usize,
    pub x0: f64,
    /// `[t][n][k]` flattened, for `t = 1..T`; sub-path of particle `n` ending at `t`.
    pub segments: Vec<f64>,
    /// Normalised weights `[t][n]` for `t = 0..T`.
    pub weights: Vec<f64>,
    /// `[t][n]`, parent at `t − 1` of particle `n` at `t`; row 0 is the identity.
    pub ancestry: Vec<u32>,
    pub times: Vec<f64>,
    pub log_lik: f64,
}

impl ConditionalCloud {
    pub fn steps(&self) -> usize {
        self.weights.len() / self.particles
    }

    pub fn weight(&self, t: usize, n: usize) -> f64 {
        self.weights[t * self.particles + n]
    }

    pub fn parent(&self, t: usize, n: usize) -> usize {
        self.ancestry[t * self.particles + n] as usize
    }

    pub fn segment(&self, t: usize, n: usize) -> &[f64] {
        let d = self.substeps;
        let start = ((t - 1) * self.particles + n) * d;
        &self.segments[start..start + d]
    }

    /// State of particle `n` at observation `t`.
    pub fn state(&self, t: usize, n: usize) -> f64 {
        if t == 0 {
            self.x0
        } else {
            self.segment(t, n)[self.substeps - 1]
        }
    }

    /// Assembles the path along `lineage`.
    pub fn path(&self, lineage: &[usize]) -> InvariantPath {
        let mut states = Vec::with_capacity(1 + (lineage.len() - 1) * self.substeps);
        states.push(self.x0);
        for (t, &b) in lineage.iter().enumerate().skip(1) {
            states.extend_from_slice(self.segment(t, b));
        }
        InvariantPath {
            states,
            substeps: self.substeps,
            lineage: lineage.to_vec(),
        }
    }
}

fn draw_index(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    for (i, &w) in weights.iter().enumerate().take(last) {
        acc += w;
        if acc > target {
            return i;
        }
    }
    last
}

/// Backward-simulation weights at time `t` given the chosen particle `next`
/// at `t + 1`: `W_t^n f(x_{t+1}^{next} | x_t^n)`, normalised. Only the first
/// sub-step of the EMD transition depends on `n`; the remaining factors are
/// common to every `n` and cancel.
pub fn backward_weights<L: Dynamics>(cloud: &ConditionalCloud, local: &L, t: usize, next: usize) -> Vec<f64> {
    let n = cloud.particles;
    let seg = cloud.segment(t + 1, next);
    let dt = (cloud.times[t + 1] - cloud.times[t]) / cloud.substeps as f64;
    let mut log_bw = vec![f64::NEG_INFINITY; n];
    for (i, lb) in log_bw.iter_mut().enumerate() {
        let w = cloud.weight(t, i);
        if w <= 0.0 {
            continue;
        }
        let x = cloud.state(t, i);
        let (mu, v) = local.coefficients(x);
        let lf = normal_logpdf(seg[0], x + mu * dt, v * dt);
        if lf.is_finite() {
            *lb = w.ln() + lf;
        }
    }
    let mut out = vec![0.0; n];
    normalise_log_weights(&log_bw, &mut out);
    out
}

/// Draws a lineage by backward simulation.
pub fn backward_sample<L: Dynamics>(cloud: &ConditionalCloud, local: &L, stream: &mut Stream) -> Vec<usize> {
    let t_len = cloud.steps();
    let n = cloud.particles;
    let mut lineage = vec![0usize; t_len];
    let last = &cloud.weights[(t_len - 1) * n..t_len * n];
    lineage[t_len - 1] = draw_index(last, stream.uniform());
    for t in (0..t_len - 1).rev() {
        let bw = backward_weights(cloud, local, t, lineage[t + 1]);
        let u = stream.uniform();
        lineage[t] = if bw.iter().all(|&w| w == 0.0) {
            cloud.parent(t + 1, lineage[t + 1])
        } else {
            draw_index(&bw, u)
        };
    }
    lineage
}

/// Draws a lineage by tracing ancestors from a final-time draw.
pub fn ancestral_sample(cloud: &ConditionalCloud, stream: &mut Stream) -> Vec<usize> {
    let t_len = cloud.steps();
    let n = cloud.particles;
    let mut lineage = vec![0usize; t_len];
    lineage[t_len - 1] = draw_index(&cloud.weights[(t_len - 1) * n..], stream.uniform());
    for t in (1..t_len).rev() {
        lineage[t - 1] = cloud.parent(t, lineage[t]);
    }
    lineage
}

/// Particle count used by the conditional filter: one extra slot when the
/// tuned count leaves no room beside the invariant path.
pub fn conditional_particles(tuned: usize, has_invariant: bool) -> usize {
    if has_invariant && tuned < 2 {
        tuned + 1
    } else {
        tuned.max(1)
    }
}

/// Conditional particle filter forward pass. Slot 0 carries `invariant`
/// (if given) at every time; the other slots are resampled at every step.
pub fn run_cpf_forward<M: Sdemem + ?Sized>(
    model: &M,
    theta: &Theta,
    eta: &[f64],
    subject: &Subject,
    cfg: &FilterConfig,
    invariant: Option<&InvariantPath>,
    stream: &mut Stream,
) -> Result<ConditionalCloud, Error> {
    let prep = prepare(model, theta, eta, subject, cfg)?;
    let t_len = subject.len();
    if let Some(path) = invariant {
        if path.substeps != cfg.substeps || path.observations() != t_len {
            return Err(Error::Config("invariant path does not match the subject grid".into()));
        }
        if path.states.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                what: "invariant path",
                time: subject.times[0],
            });
        }
    }
    let n = conditional_particles(cfg.particles, invariant.is_some());
    let d = cfg.substeps;
    let sigma = theta.sigma;

    let mut weights = Vec::with_capacity(t_len * n);
    weights.extend(core::iter::repeat_n(1.0 / n as f64, n));
    let mut ancestry: Vec<u32> = Vec::with_capacity(t_len * n);
    ancestry.extend(0..n as u32);
    let mut segments = vec![0.0; t_len.saturating_sub(1) * n * d];
    let mut log_lik = model.obs_logdensity(subject.obs[0], prep.x0, sigma);

    let mut states = vec![prep.x0; n];
    let mut new_states = vec![0.0; n];
    let mut z = vec![0.0; n * d];
    let mut u = vec![0.0; n];
    let mut parents = vec![0usize; n];
    let mut log_w = vec![0.0; n];
    let mut norm_w = vec![0.0; n];
    let rb_broken = cfg.proposal == Proposal::Rb && t_len > 1 && prep.ode.is_empty();
    if rb_broken {
        return Err(Error::NonFinite {
            what: "drift ODE",
            time: subject.times[0],
        });
    }

    for t in 1..t_len {
        stream.fill_uniform(&mut u);
        stream.fill_normal(&mut z);
        let prev = &weights[(t - 1) * n..t * n];
        resample(prev, cfg.scheme, &u, &mut parents)?;
        if invariant.is_some() {
            parents[0] = 0;
        }
        ancestry.extend(parents.iter().map(|&p| p as u32));

        let grid = TimeGrid::new(subject.times[t - 1], subject.times[t], d)?;
        let y = subject.obs[t];
        let kernel = kernel_for(cfg.proposal, y, sigma, &prep.ode, t, d);
        let row = &mut segments[(t - 1) * n * d..t * n * d];
        for i in 0..n {
            let start = states[parents[i]];
            let seg = &mut row[i * d..(i + 1) * d];
            let (lq, lf) = match invariant {
                Some(path) if i == 0 => {
                    seg.copy_from_slice(path.segment(t));
                    evaluate_path(&prep.local, &kernel, start, &grid, seg)
                }
                _ => propagate_into(&prep.local, &kernel, start, &grid, &z[i * d..(i + 1) * d], seg, true),
            };
            let x = seg[d - 1];
            new_states[i] = x;
            log_w[i] = if lq == f64::NEG_INFINITY || !x.is_finite() {
                f64::NEG_INFINITY
            } else {
                model.obs_logdensity(y, x, sigma) + lf - lq
            };
        }
        core::mem::swap(&mut states, &mut new_states);
        let (lse, _) = normalise_log_weights(&log_w, &mut norm_w);
        if !lse.is_finite() {
            if invariant.is_none() {
                return Err(Error::WeightCollapse);
            }
            // keep the reference path alive
            norm_w.iter_mut().for_each(|w| *w = 0.0);
            norm_w[0] = 1.0;
        }
        log_lik += lse - (n as f64).ln();
        weights.extend_from_slice(&norm_w);
    }

    Ok(ConditionalCloud {
        particles: n,
        substeps: d,
        x0: prep.x0,
        segments,
        weights,
        ancestry,
        times: subject.times.clone(),
        log_lik,
    })
}

/// Conditional particle filter followed by path selection; returns the new
/// invariant path. Without `invariant` this is a plain filter that
/// resamples every step, used to initialise a path.
#[allow(clippy::too_many_arguments)]
pub fn run_cpf<M: Sdemem + ?Sized>(
    model: &M,
    theta: &Theta,
    eta: &[f64],
    subject: &Subject,
    cfg: &FilterConfig,
    invariant: Option<&InvariantPath>,
    selection: PathSelection,
    stream: &mut Stream,
) -> Result<InvariantPath, Error> {
    let cloud = run_cpf_forward(model, theta, eta, subject, cfg, invariant, stream)?;
    let lineage = match selection {
        PathSelection::Backward => backward_sample(&cloud, &model.localize(&theta.phi_x, eta), stream),
        PathSelection::Ancestral => ancestral_sample(&cloud, stream),
    };
    Ok(cloud.path(&lineage))
}
