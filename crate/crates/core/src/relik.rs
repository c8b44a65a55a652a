//! Importance-sampling likelihood over the random effects: each subject's
//! random effects are integrated out by averaging particle-filter estimates
//! at draws from an importance density.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::data::{Dataset, Subject};
use crate::math::{log_sum_exp, probit, LN_2PI};
use crate::model::{solve_ode_local, Dynamics, Sdemem, Theta};
use crate::pfilter::{subject_loglik, FilterConfig};
use crate::rng::{RngBlockStore, Stream};
use crate::sdesim::mdb_moments;
use crate::Error;

/// Maximum quasi-Newton iterations before falling back to the prior.
pub const MAX_OPTIM_ITERATIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImportanceKind {
    Prior,
    /// Laplace mode under the drift-ODE path, covariance `0.5 · diag(prior variances)`.
    LOde,
    /// Laplace approximation under the MDB mean path.
    LaplaceMdb,
}

impl ImportanceKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prior" => Some(ImportanceKind::Prior),
            "l_ode" | "lode" => Some(ImportanceKind::LOde),
            "laplace_mdb" => Some(ImportanceKind::LaplaceMdb),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceKind::Prior => "prior",
            ImportanceKind::LOde => "l_ode",
            ImportanceKind::LaplaceMdb => "laplace_mdb",
        }
    }
}

/// Gaussian importance density over one subject's random effects.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceDensity {
    /// Kind actually in use; `Prior` after a fallback.
    pub kind: ImportanceKind,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    chol: DMatrix<f64>,
    log_det: f64,
    /// Set when a Laplace fit failed and the prior is used instead.
    pub fallback: bool,
    prior_phi_eta: Vec<f64>,
}

impl ImportanceDensity {
    /// The random-effect prior itself.
    pub fn prior<M: Sdemem + ?Sized>(model: &M, phi_eta: &[f64]) -> Self {
        let p = model.re_dim();
        let mut mean = vec![0.0; p];
        let mut var = vec![0.0; p];
        for j in 0..p {
            let (mu, sd) = model.re_moments(phi_eta, j);
            mean[j] = mu;
            var[j] = sd * sd;
        }
        let mut d = Self::gaussian(
            ImportanceKind::Prior,
            mean,
            DMatrix::from_diagonal(&DVector::from_vec(var)),
        )
        .unwrap_or_else(|| Self::degenerate(p));
        d.prior_phi_eta = phi_eta.to_vec();
        d
    }

    fn degenerate(p: usize) -> Self {
        Self {
            kind: ImportanceKind::Prior,
            mean: vec![f64::NAN; p],
            cov: DMatrix::zeros(p, p),
            chol: DMatrix::zeros(p, p),
            log_det: f64::NAN,
            fallback: false,
            prior_phi_eta: Vec::new(),
        }
    }

    fn gaussian(kind: ImportanceKind, mean: Vec<f64>, cov: DMatrix<f64>) -> Option<Self> {
        let chol = cov.clone().cholesky()?.l();
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() || mean.iter().any(|m| !m.is_finite()) {
            return None;
        }
        Some(Self {
            kind,
            mean,
            cov,
            chol,
            log_det,
            fallback: false,
            prior_phi_eta: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density at `eta`. For the prior kind this is the model's own
    /// random-effect log-prior.
    pub fn logpdf<M: Sdemem + ?Sized>(&self, model: &M, eta: &[f64]) -> f64 {
        if self.kind == ImportanceKind::Prior && !self.prior_phi_eta.is_empty() {
            return model.re_logprior(eta, &self.prior_phi_eta);
        }
        let p = self.dim();
        let r = DVector::from_iterator(p, eta.iter().zip(&self.mean).map(|(e, m)| e - m));
        match self.chol.solve_lower_triangular(&r) {
            Some(w) => -0.5 * (p as f64 * LN_2PI + self.log_det + w.norm_squared()),
            None => f64::NEG_INFINITY,
        }
    }

    /// `mean + L z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let p = self.dim();
        (0..p)
            .map(|i| self.mean[i] + (0..=i).map(|j| self.chol[(i, j)] * z[j]).sum::<f64>())
            .collect()
    }
}

/// Approximate latent states at the observation times.
fn approx_states<M: Sdemem + ?Sized>(
    kind: ImportanceKind,
    model: &M,
    theta: &Theta,
    subject: &Subject,
    substeps: usize,
    eta: &[f64],
) -> Option<Vec<f64>> {
    let local = model.localize(&theta.phi_x, eta);
    let x0 = model.initial_state(&theta.phi_x, eta);
    match kind {
        ImportanceKind::LOde => solve_ode_local(&local, x0, &subject.times, substeps).ok(),
        _ => {
            let mut xs = Vec::with_capacity(subject.len());
            let mut x = x0;
            xs.push(x);
            for t in 1..subject.len() {
                let dt = subject.times[t] - subject.times[t - 1];
                let (mu, v) = local.coefficients(x);
                let (drift, _) = mdb_moments(mu, v, theta.sigma, subject.obs[t], x, dt, dt);
                x += drift * dt;
                if !x.is_finite() {
                    return None;
                }
                xs.push(x);
            }
            Some(xs)
        }
    }
}

/// `log P(y | x̂(η), θ) + log P(η | φ_η)`, the function whose mode centres a
/// Laplace importance density.
pub fn laplace_objective<M: Sdemem + ?Sized>(
    kind: ImportanceKind,
    model: &M,
    theta: &Theta,
    subject: &Subject,
    substeps: usize,
    eta: &[f64],
) -> f64 {
    let Some(xs) = approx_states(kind, model, theta, subject, substeps, eta) else {
        return f64::NEG_INFINITY;
    };
    let ll: f64 = xs
        .iter()
        .zip(&subject.obs)
        .map(|(&x, &y)| model.obs_logdensity(y, x, theta.sigma))
        .sum();
    let v = ll + model.re_logprior(eta, &theta.phi_eta);
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

fn fd_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], out: &mut [f64]) -> bool {
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = 1e-5 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        out[j] = (fp - fm) / (2.0 * h);
        if !out[j].is_finite() {
            return false;
        }
    }
    true
}

/// Maximises `f` by BFGS with finite-difference gradients and a
/// backtracking line search. `scale` sets the initial inverse Hessian
/// (`diag(scale²)`) and the convergence norm. Returns `None` when the
/// iteration budget runs out or the objective is not finite.
pub fn maximise<F: Fn(&[f64]) -> f64>(f: F, start: &[f64], scale: &[f64], max_iter: usize) -> Option<Vec<f64>> {
    let p = start.len();
    let neg = |x: &[f64]| -f(x);
    let mut x = DVector::from_column_slice(start);
    let mut fx = neg(x.as_slice());
    if !fx.is_finite() {
        return None;
    }
    let mut g = DVector::zeros(p);
    if !fd_gradient(&neg, x.as_slice(), g.as_mut_slice()) {
        return None;
    }
    let h0 = DMatrix::from_diagonal(&DVector::from_iterator(p, scale.iter().map(|s| s * s)));
    let mut h = h0.clone();
    let converged = |g: &DVector<f64>| g.iter().zip(scale).all(|(gi, s)| (gi * s).abs() < 1e-7);
    for _ in 0..max_iter {
        if converged(&g) {
            return Some(x.as_slice().to_vec());
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            h = h0.clone();
            dir = -(&h * &g);
            slope = g.dot(&dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + step * &dir;
            let fn_ = neg(xn.as_slice());
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            // no further decrease at working precision
            let loose = g.iter().zip(scale).all(|(gi, s)| (gi * s).abs() < 1e-3);
            return loose.then(|| x.as_slice().to_vec());
        };
        let mut gn = DVector::zeros(p);
        if !fd_gradient(&neg, xn.as_slice(), gn.as_mut_slice()) {
            return None;
        }
        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(p, p);
            let a = &eye - rho * &s * yv.transpose();
            let b = &eye - rho * &yv * s.transpose();
            h = &a * &h * &b + rho * &s * s.transpose();
        }
        let small_change = (fx - fn_).abs() <= 1e-15 * (1.0 + fx.abs());
        x = xn;
        fx = fn_;
        g = gn;
        if small_change && g.iter().zip(scale).all(|(gi, s)| (gi * s).abs() < 1e-3) {
            return Some(x.as_slice().to_vec());
        }
    }
    converged(&g).then(|| x.as_slice().to_vec())
}

/// Central-difference Hessian with steps `1e-4 · (1 + |x_j|)`, symmetrised.
pub fn fd_hessian<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> DMatrix<f64> {
    let p = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(p, p);
    let mut xp = x.to_vec();
    for i in 0..p {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Fits the importance density for one subject at `theta`.
pub fn fit_importance<M: Sdemem + ?Sized>(
    kind: ImportanceKind,
    model: &M,
    theta: &Theta,
    subject: &Subject,
    substeps: usize,
) -> ImportanceDensity {
    let prior = ImportanceDensity::prior(model, &theta.phi_eta);
    if kind == ImportanceKind::Prior {
        return prior;
    }
    let fallback = || {
        let mut d = prior.clone();
        d.fallback = true;
        d
    };
    let scale: Vec<f64> = (0..model.re_dim())
        .map(|j| model.re_moments(&theta.phi_eta, j).1)
        .collect();
    if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return fallback();
    }
    let objective = |eta: &[f64]| laplace_objective(kind, model, theta, subject, substeps, eta);
    let Some(mode) = maximise(objective, &prior.mean, &scale, MAX_OPTIM_ITERATIONS) else {
        return fallback();
    };
    let cov = match kind {
        ImportanceKind::LOde => {
            DMatrix::from_diagonal(&DVector::from_iterator(scale.len(), scale.iter().map(|s| 0.5 * s * s)))
        }
        _ => {
            let neg_hess = -fd_hessian(objective, &mode);
            let Some(c) = neg_hess.cholesky() else {
                return fallback();
            };
            let inv = c.inverse();
            (&inv + inv.transpose()) * 0.5
        }
    };
    ImportanceDensity::gaussian(kind, mode, cov).unwrap_or_else(fallback)
}

/// Radical inverse of `i` in base `b` with a digit-wise random shift
/// `shift` (one digit per position), plus half the resolution of the last
/// digit so the result lies strictly inside (0, 1).
pub fn shifted_radical_inverse(mut i: u64, b: u64, shift: &[u64]) -> f64 {
    let inv_b = 1.0 / b as f64;
    let mut scale = inv_b;
    let mut u = 0.0;
    for &s in shift {
        let digit = i % b;
        i /= b;
        u += ((digit + s) % b) as f64 * scale;
        scale *= inv_b;
    }
    u + 0.5 * scale * b as f64
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Number of base-`b` digits needed to resolve a double.
fn digits_for_base(b: u64) -> usize {
    (53.0 * core::f64::consts::LN_2 / (b as f64).ln()).ceil() as usize
}

/// `count × dim` uniforms (row-major) from a Halton point set with a
/// random digital shift drawn from `stream`. Dimension `j` uses the
/// `j`-th prime; in one dimension this is the base-2 van der Corput set.
pub fn rqmc_uniforms(count: usize, dim: usize, stream: &mut Stream) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "RQMC supports at most {} dimensions", PRIMES.len());
    let shifts: Vec<Vec<u64>> = PRIMES[..dim]
        .iter()
        .map(|&b| {
            (0..digits_for_base(b))
                .map(|_| ((stream.uniform() * b as f64) as u64).min(b - 1))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(count * dim);
    for l in 0..count as u64 {
        for (j, &b) in PRIMES[..dim].iter().enumerate() {
            out.push(shifted_radical_inverse(l, b, &shifts[j]));
        }
    }
    out
}

/// Importance-sampling settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IapmConfig {
    pub draws: usize,
    pub filter: FilterConfig,
    pub kind: ImportanceKind,
    pub qmc: bool,
}

/// Estimate for one subject from its block seed: random-effect draws come
/// from sub-stream 0, the filter of draw `l` from sub-stream `1 + l`.
pub fn iapm_subject_loglik<M: Sdemem + ?Sized>(
    model: &M,
    theta: &Theta,
    subject: &Subject,
    cfg: &IapmConfig,
    density: &ImportanceDensity,
    block_seed: u64,
) -> Result<f64, Error> {
    if cfg.draws == 0 {
        return Err(Error::Config("number of random-effect draws must be at least 1".into()));
    }
    let p = density.dim();
    let mut re_stream = Stream::with_substream(block_seed, 0);
    let z: Vec<f64> = if cfg.qmc {
        rqmc_uniforms(cfg.draws, p, &mut re_stream)
            .into_iter()
            .map(probit)
            .collect()
    } else {
        let mut z = vec![0.0; cfg.draws * p];
        re_stream.fill_normal(&mut z);
        z
    };
    let mut terms = Vec::with_capacity(cfg.draws);
    for l in 0..cfg.draws {
        let eta = density.transform(&z[l * p..(l + 1) * p]);
        let log_g = density.logpdf(model, &eta);
        let log_prior = model.re_logprior(&eta, &theta.phi_eta);
        if !log_g.is_finite() || !log_prior.is_finite() {
            terms.push(f64::NEG_INFINITY);
            continue;
        }
        let mut stream = Stream::with_substream(block_seed, 1 + l as u64);
        let ll = subject_loglik(model, theta, &eta, subject, &cfg.filter, &mut stream)?;
        terms.push(ll + log_prior - log_g);
    }
    Ok(log_sum_exp(&terms) - (cfg.draws as f64).ln())
}

/// Total IAPM log-likelihood estimate and its per-subject components.
pub fn iapm_total_loglik<M: Sdemem + ?Sized>(
    model: &M,
    theta: &Theta,
    dataset: &Dataset,
    cfg: &IapmConfig,
    store: &RngBlockStore,
) -> Result<(f64, Vec<f64>), Error> {
    if store.blocks() != dataset.num_subjects() {
        return Err(Error::Config(
            "block store and dataset disagree on subject count".into(),
        ));
    }
    let per: Vec<Result<f64, Error>> = crate::map_subjects(dataset.num_subjects(), |m| {
        let subject = &dataset.subjects[m];
        let density = fit_importance(cfg.kind, model, theta, subject, cfg.filter.substeps);
        iapm_subject_loglik(model, theta, subject, cfg, &density, store.block_seed(m))
    });
    let per = per.into_iter().collect::<Result<Vec<f64>, Error>>()?;
    Ok((per.iter().sum(), per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::sdesim::Proposal;

    fn theta(sigma: f64, sd_beta: f64) -> Theta {
        Theta {
            sigma,
            phi_x: vec![0.5, 0.0],
            phi_eta: vec![0.2, sd_beta],
        }
    }

    fn subject() -> Subject {
        Subject::new("a", vec![0.0, 0.5, 1.0], vec![0.1, 0.9, 1.6])
    }

    #[test]
    fn prior_density_matches_re_prior() {
        let th = theta(0.3, 0.7);
        let d = fit_importance(ImportanceKind::Prior, &ModelSpec::Constant, &th, &subject(), 10);
        for e in [-2.0, 0.0, 0.4, 3.1] {
            assert_eq!(
                d.logpdf(&ModelSpec::Constant, &[e]),
                ModelSpec::Constant.re_logprior(&[e], &th.phi_eta)
            );
        }
    }

    #[test]
    fn tight_prior_pins_mode() {
        let th = theta(0.3, 1e-4);
        let d = fit_importance(ImportanceKind::LaplaceMdb, &ModelSpec::Constant, &th, &subject(), 10);
        assert!(!d.fallback);
        assert!((d.mean[0] - 0.2).abs() < 1e-5, "{}", d.mean[0]);
    }

    #[test]
    fn laplace_mode_matches_grid_search() {
        let th = theta(0.3, 1.0);
        let s = subject();
        for kind in [ImportanceKind::LaplaceMdb, ImportanceKind::LOde] {
            let d = fit_importance(kind, &ModelSpec::Constant, &th, &s, 10);
            assert!(!d.fallback);
            let spacing = 8.0 / 1e4;
            let best = (0..=10_000)
                .map(|i| -4.0 + i as f64 * spacing)
                .map(|e| (e, laplace_objective(kind, &ModelSpec::Constant, &th, &s, 10, &[e])))
                .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            assert!(
                (d.mean[0] - best.0).abs() <= spacing,
                "{kind:?}: {} vs {}",
                d.mean[0],
                best.0
            );
        }
    }

    #[test]
    fn lode_covariance_is_half_prior() {
        let th = theta(0.3, 0.8);
        let d = fit_importance(ImportanceKind::LOde, &ModelSpec::Constant, &th, &subject(), 10);
        assert!((d.cov[(0, 0)] - 0.32).abs() < 1e-15);
    }

    #[test]
    fn radical_inverse_without_shift() {
        let zero = [0u64; 4];
        let r: Vec<f64> = (0..4).map(|i| shifted_radical_inverse(i, 2, &zero)).collect();
        let half = 0.5 / 16.0;
        assert_eq!(r, [half, 0.5 + half, 0.25 + half, 0.75 + half]);
    }

    #[test]
    fn rqmc_points_stay_inside() {
        let u = rqmc_uniforms(1000, 2, &mut Stream::new(5));
        assert!(u.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_prior_draw_is_unit_ratio() {
        let th = theta(0.3, 0.7);
        let s = subject();
        let cfg = IapmConfig {
            draws: 1,
            filter: FilterConfig::new(16, 5, Proposal::Mdb),
            kind: ImportanceKind::Prior,
            qmc: false,
        };
        let d = fit_importance(cfg.kind, &ModelSpec::Constant, &th, &s, 5);
        let a = iapm_subject_loglik(&ModelSpec::Constant, &th, &s, &cfg, &d, 77).unwrap();
        let eta = ModelSpec::Constant.re_sample(&th.phi_eta, &mut Stream::with_substream(77, 0));
        let b = subject_loglik(
            &ModelSpec::Constant,
            &th,
            &eta,
            &s,
            &cfg.filter,
            &mut Stream::with_substream(77, 1),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
