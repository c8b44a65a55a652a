//! Particle-count tuning by the spread of successive log-likelihood
//! differences, and run diagnostics based on the multivariate effective
//! sample size.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;

use crate::model::{block_indices, Block, Sdemem};
use crate::rng::{derive_seed, RngBlockStore, Stream};
use crate::samplers::Trace;
use crate::{Clock, Error};

/// Default target for `σ_Δ`.
pub const SIGMA_DELTA_TARGET: f64 = 1.05;
/// Default number of estimates per candidate.
pub const DEFAULT_REPLICATES: usize = 1000;
/// Default cap on seconds per single estimate.
pub const DEFAULT_TIME_CAP_SECS: f64 = 15.0 * 60.0;
/// Default ceiling on the particle count.
pub const DEFAULT_MAX_PARTICLES: usize = 1_000_000;

/// How the auxiliary random numbers change between successive estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefreshRule {
    /// Every block refreshed.
    Independent,
    /// One block refreshed, cycling through the subjects.
    Block,
}

/// Spread of successive log-likelihood differences at fixed parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaDelta {
    /// Sample standard deviation of `|ℓ_{i+1} − ℓ_i|`.
    pub sigma_delta: f64,
    /// Sample standard deviation of `ℓ_{i+1} − ℓ_i`.
    pub sd_r: f64,
    pub mean_seconds: f64,
    pub reps: usize,
    /// Estimates equal to `-∞`, left out of every difference.
    pub excluded: usize,
    /// Lag-1 autocorrelation of the finite estimates.
    pub lag1: f64,
}

fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Lag-1 sample autocorrelation.
pub fn lag1_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 3 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let cov: f64 = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    cov / var
}

/// `σ_Δ` from a sequence of log-likelihood estimates. `-∞` estimates are
/// dropped from every pair they belong to; more than 10% of them is a
/// tuning failure.
pub fn sigma_delta_from(estimates: &[f64], mean_seconds: f64) -> Result<SigmaDelta, Error> {
    let excluded = estimates.iter().filter(|v| !v.is_finite()).count();
    if excluded as f64 > 0.1 * estimates.len() as f64 {
        return Err(Error::Tuning(format!(
            "{excluded} of {} log-likelihood estimates were not finite",
            estimates.len()
        )));
    }
    let r: Vec<f64> = estimates
        .windows(2)
        .filter(|w| w[0].is_finite() && w[1].is_finite())
        .map(|w| w[1] - w[0])
        .collect();
    let abs_r: Vec<f64> = r.iter().map(|v| v.abs()).collect();
    let finite: Vec<f64> = estimates.iter().copied().filter(|v| v.is_finite()).collect();
    Ok(SigmaDelta {
        sigma_delta: sample_sd(&abs_r),
        sd_r: sample_sd(&r),
        mean_seconds,
        reps: estimates.len(),
        excluded,
        lag1: lag1_autocorrelation(&finite),
    })
}

/// Produces `reps` estimates from `estimate`, refreshing a block store
/// between calls per `rule`, and summarises them. Returns a tuning error
/// when a single estimate exceeds `time_cap` seconds.
pub fn sigma_delta<F>(
    mut estimate: F,
    blocks: usize,
    rule: RefreshRule,
    reps: usize,
    seed: u64,
    clock: &dyn Clock,
    time_cap: f64,
) -> Result<SigmaDelta, Error>
where
    F: FnMut(&RngBlockStore) -> Result<f64, Error>,
{
    if reps < 2 || blocks == 0 {
        return Err(Error::Config("σ_Δ needs at least 2 replicates and 1 block".into()));
    }
    let mut store = RngBlockStore::new(seed, blocks);
    let mut rng = Stream::with_substream(derive_seed(seed, u64::MAX - 1), 2);
    let mut values = Vec::with_capacity(reps);
    let start = clock.seconds();
    for i in 0..reps {
        let t0 = clock.seconds();
        values.push(estimate(&store)?);
        if clock.seconds() - t0 > time_cap {
            return Err(Error::Tuning(format!("one estimate took longer than {time_cap} s")));
        }
        match rule {
            RefreshRule::Independent => store.refresh_all(&mut rng),
            RefreshRule::Block => store.refresh_block(i % blocks, &mut rng),
        }
    }
    let mean_seconds = (clock.seconds() - start) / reps as f64;
    sigma_delta_from(&values, mean_seconds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub particles: usize,
    /// `None` when the candidate failed (time cap or too many `-∞`).
    pub result: Option<SigmaDelta>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuningReport {
    pub target: f64,
    pub candidates: Vec<Candidate>,
    /// Smallest particle count found meeting the target.
    pub selected: Option<usize>,
}

impl TuningReport {
    pub fn attained(&self) -> bool {
        self.selected.is_some()
    }
}

/// Doubling search from one particle for the first count with
/// `σ_Δ ≤ target`, then bisection between the bracketing pair.
/// A failing candidate (error) or reaching `max_particles` stops the
/// search unattained.
pub fn tune_particles<F>(mut family: F, target: f64, max_particles: usize) -> TuningReport
where
    F: FnMut(usize) -> Result<SigmaDelta, Error>,
{
    let mut report = TuningReport {
        target,
        candidates: Vec::new(),
        selected: None,
    };
    let mut eval = |n: usize, report: &mut TuningReport| -> Option<bool> {
        match family(n) {
            Ok(sd) => {
                let ok = sd.sigma_delta <= target;
                report.candidates.push(Candidate {
                    particles: n,
                    result: Some(sd),
                    failure: None,
                });
                Some(ok)
            }
            Err(e) => {
                report.candidates.push(Candidate {
                    particles: n,
                    result: None,
                    failure: Some(format!("{e}")),
                });
                None
            }
        }
    };
    let mut n = 1;
    let mut last_fail = 0;
    loop {
        if n > max_particles {
            return report;
        }
        match eval(n, &mut report) {
            Some(true) => break,
            Some(false) => {
                last_fail = n;
                n *= 2;
            }
            None => return report,
        }
    }
    let (mut lo, mut hi) = (last_fail, n);
    while hi - lo > 1 && lo > 0 {
        let mid = lo + (hi - lo) / 2;
        match eval(mid, &mut report) {
            Some(true) => hi = mid,
            Some(false) | None => lo = mid,
        }
    }
    report.selected = Some(hi);
    report
}

/// Row-major `n × p` samples.
fn column_variance(samples: &[f64], n: usize, p: usize, j: usize) -> f64 {
    let mean = (0..n).map(|i| samples[i * p + j]).sum::<f64>() / n as f64;
    (0..n).map(|i| (samples[i * p + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let c = m.clone().cholesky()?;
    let ld = 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    ld.is_finite().then_some(ld)
}

/// First column at which the leading sub-matrix of `m` stops being
/// positive definite.
fn degenerate_column(m: &DMatrix<f64>) -> usize {
    let p = m.nrows();
    (1..=p)
        .find(|&k| log_det_spd(&m.view((0, 0), (k, k)).into_owned()).is_none())
        .map_or(p - 1, |k| k - 1)
}

/// Multivariate effective sample size `n (det Λ / det Σ)^{1/p}` with
/// batch size `⌊√n⌋`. `names` labels the columns in errors.
pub fn multiess_named(samples: &[f64], p: usize, names: &[&str]) -> Result<f64, Error> {
    if p == 0 || !samples.len().is_multiple_of(p) {
        return Err(Error::Config("sample matrix shape is inconsistent".into()));
    }
    let n = samples.len() / p;
    let b = libm::floor(libm::sqrt(n as f64)) as usize;
    if b == 0 || n < 4 * b {
        return Err(Error::Config(format!("multiESS needs more samples (n = {n})")));
    }
    let name = |j: usize| names.get(j).map_or_else(|| format!("{j}"), |s| String::from(*s));
    for j in 0..p {
        let v = column_variance(samples, n, p, j);
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Degenerate { column: name(j) });
        }
    }
    let mean: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| samples[i * p + j]).sum::<f64>() / n as f64)
        .collect();
    let mut lambda = DMatrix::zeros(p, p);
    for i in 0..n {
        for j in 0..p {
            let dj = samples[i * p + j] - mean[j];
            for k in 0..=j {
                lambda[(j, k)] += dj * (samples[i * p + k] - mean[k]);
            }
        }
    }
    let a = n / b;
    let mut sigma = DMatrix::zeros(p, p);
    let mut batch = vec![0.0; p];
    for k in 0..a {
        batch.iter_mut().for_each(|v| *v = 0.0);
        for i in k * b..(k + 1) * b {
            for j in 0..p {
                batch[j] += samples[i * p + j];
            }
        }
        for j in 0..p {
            let dj = batch[j] / b as f64 - mean[j];
            for l in 0..=j {
                sigma[(j, l)] += dj * (batch[l] / b as f64 - mean[l]);
            }
        }
    }
    for j in 0..p {
        for k in 0..=j {
            lambda[(j, k)] /= (n - 1) as f64;
            lambda[(k, j)] = lambda[(j, k)];
            sigma[(j, k)] *= b as f64 / (a - 1) as f64;
            sigma[(k, j)] = sigma[(j, k)];
        }
    }
    let ld_lambda = log_det_spd(&lambda).ok_or_else(|| Error::Degenerate {
        column: name(degenerate_column(&lambda)),
    })?;
    let ld_sigma = log_det_spd(&sigma).ok_or_else(|| Error::Degenerate {
        column: name(degenerate_column(&sigma)),
    })?;
    Ok(n as f64 * libm::exp((ld_lambda - ld_sigma) / p as f64))
}

pub fn multiess(samples: &[f64], p: usize) -> Result<f64, Error> {
    multiess_named(samples, p, &[])
}

/// Named groups of parameter columns reported separately: the observation
/// and SDE parameters together, then the hyperparameters of each random
/// effect.
pub fn default_groups<M: Sdemem + ?Sized>(model: &M) -> Vec<(String, Vec<usize>)> {
    let layout = model.layout();
    let mut groups = Vec::new();
    let mut x_idx = block_indices(layout, Block::Sigma);
    x_idx.extend(block_indices(layout, Block::PhiX));
    x_idx.sort_unstable();
    let names: Vec<&str> = x_idx.iter().map(|&i| layout[i].name).collect();
    groups.push((names.join(","), x_idx));
    for &(a, b) in model.re_hyper() {
        let find = |k: usize| {
            layout
                .iter()
                .position(|d| d.block == Block::PhiEta && d.index == k)
                .expect("hyperparameter missing from layout")
        };
        let idx = vec![find(a), find(b)];
        groups.push((format!("{},{}", layout[idx[0]].name, layout[idx[1]].name), idx));
    }
    groups
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub method: String,
    pub iterations: usize,
    pub duration_secs: f64,
    /// multiESS over every parameter; `None` if it could not be computed.
    pub multiess: Option<f64>,
    pub group_multiess: Vec<(String, Option<f64>)>,
    pub acceptance: Vec<(String, f64)>,
    /// multiESS per minute.
    pub score: Option<f64>,
    /// Set when a multiESS could not be computed.
    pub issues: Vec<String>,
}

fn select_columns(trace: &Trace, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.rows() * idx.len());
    for i in 0..trace.rows() {
        let row = trace.theta_row(i);
        out.extend(idx.iter().map(|&j| row[j]));
    }
    out
}

/// Summarises a trace: multiESS overall and per group, acceptance rate per
/// update block, and multiESS per minute.
pub fn run_report(trace: &Trace, groups: &[(String, Vec<usize>)]) -> RunReport {
    let p = trace.num_params();
    let mut issues = Vec::new();
    let mut ess = |idx: &[usize]| -> Option<f64> {
        let names: Vec<&str> = idx.iter().map(|&j| trace.param_names[j]).collect();
        match multiess_named(&select_columns(trace, idx), idx.len(), &names) {
            Ok(v) => Some(v),
            Err(e) => {
                issues.push(format!("{e}"));
                None
            }
        }
    };
    let all: Vec<usize> = (0..p).collect();
    let total = ess(&all);
    let group_multiess = groups.iter().map(|(name, idx)| (name.clone(), ess(idx))).collect();
    let acceptance = trace
        .block_names
        .iter()
        .zip(trace.acceptance_rates())
        .map(|(n, r)| (String::from(*n), r))
        .collect();
    let minutes = trace.duration_secs / 60.0;
    RunReport {
        method: String::from(trace.method.as_str()),
        iterations: trace.rows(),
        duration_secs: trace.duration_secs,
        multiess: total,
        group_multiess,
        acceptance,
        score: total.filter(|_| minutes > 0.0).map(|e| e / minutes),
        issues,
    }
}
