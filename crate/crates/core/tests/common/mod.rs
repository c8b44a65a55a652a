#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use sdemem_core::model::ModelSpec;
use sdemem_core::sdesim::simulate_latent;
use sdemem_core::{Dataset, Stream, Subject, Theta};

/// Exact log-likelihood of `y_t = x_t + N(0, σ²)` with
/// `x_{t+1} = x_t + βΔ + N(0, γ²Δ)` and a known `x_0`.
pub fn kalman_loglik(times: &[f64], obs: &[f64], x0: f64, beta: f64, gamma: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let (mut m, mut p) = (x0, 0.0);
    let mut ll = 0.0;
    for t in 0..obs.len() {
        if t > 0 {
            let dt = times[t] - times[t - 1];
            m += beta * dt;
            p += gamma * gamma * dt;
        }
        let s = p + s2;
        let r = obs[t] - m;
        ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + r * r / s);
        let k = p / s;
        m += k * r;
        p *= 1.0 - k;
    }
    ll
}

/// Kalman log-likelihood of one subject of the constant model at `η = log β`.
pub fn constant_kalman(subject: &Subject, theta: &Theta, eta: f64) -> f64 {
    kalman_loglik(
        &subject.times,
        &subject.obs,
        theta.phi_x[1],
        eta.exp(),
        theta.phi_x[0],
        theta.sigma,
    )
}

/// Nodes and weights of `n`-point Gauss-Hermite quadrature for `∫ f(x) e^{-x²} dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            (
                eig.eigenvalues[i],
                std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2),
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// `log ∫ exp(f(η)) N(η; μ, s²) dη` by Gauss-Hermite quadrature.
pub fn gh_log_expectation(n: usize, mu: f64, s: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_hermite(n);
    let terms: Vec<f64> = x
        .iter()
        .zip(&w)
        .filter(|(_, &wi)| wi > 0.0)
        .map(|(&xi, &wi)| wi.ln() - 0.5 * std::f64::consts::PI.ln() + f(mu + std::f64::consts::SQRT_2 * s * xi))
        .collect();
    sdemem_core::math::log_sum_exp(&terms)
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo standard error of a chain mean by batch means.
pub fn mcse(xs: &[f64]) -> f64 {
    mcse_batched(xs, (xs.len() as f64).sqrt() as usize)
}

/// Batch-means standard error with `a` equal batches; fewer, longer batches
/// for chains whose autocorrelation outlasts √n draws.
pub fn mcse_batched(xs: &[f64], a: usize) -> f64 {
    let n = xs.len();
    let b = n / a;
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var_b: f64 = (0..a)
        .map(|k| {
            let m = xs[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64;
            (m - mean).powi(2)
        })
        .sum::<f64>()
        * b as f64
        / (a - 1) as f64;
    (var_b / (a * b) as f64).sqrt()
}

pub fn constant_theta() -> Theta {
    Theta {
        sigma: 0.3,
        phi_x: vec![0.5, 1.0],
        phi_eta: vec![0.0, 0.5],
    }
}

/// Constant-model subjects observed at `T` equally spaced times on `[0, 1]`,
/// with their random effects.
pub fn constant_dataset(seed: u64, subjects: usize, t: usize, theta: &Theta) -> (Dataset, Vec<f64>) {
    let model = ModelSpec::Constant;
    let mut stream = Stream::new(seed);
    let times: Vec<f64> = (0..t).map(|i| i as f64 / (t - 1).max(1) as f64).collect();
    let mut out = Vec::new();
    let mut etas = Vec::new();
    for m in 0..subjects {
        let eta = theta.phi_eta[0] + theta.phi_eta[1] * stream.normal();
        let x = simulate_latent(&model, &theta.phi_x, &[eta], &times, 10, &mut stream).unwrap();
        let y: Vec<f64> = x.iter().map(|xi| xi + theta.sigma * stream.normal()).collect();
        out.push(Subject::new(format!("s{m}"), times.clone(), y));
        etas.push(eta);
    }
    (Dataset::new(out).unwrap(), etas)
}
