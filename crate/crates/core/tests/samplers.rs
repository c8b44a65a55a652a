mod common;

use common::*;
use nalgebra::DMatrix;
use sdemem_core::model::{ModelSpec, Prior};
use sdemem_core::pfilter::total_loglik;
use sdemem_core::samplers::{
    mala_propose, mh_accept, phi_eta_gradient, phi_eta_log_target, run_chain, slice_sample, FrozenBackend,
    LikelihoodBackend, Method, MethodConfig, ParticleBackend, Sampler,
};
use sdemem_core::{NoClock, Sdemem, Stream, Theta};

#[test]
fn random_walk_recovers_gaussian_moments() {
    let (mu, sd) = (1.5, 2.0);
    let logp = |x: f64| -0.5 * ((x - mu) / sd).powi(2);
    let mut s = Stream::new(5);
    let mut x = 0.0;
    let n = 100_000;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let prop = x + 4.0 * s.normal();
        if mh_accept(logp(prop), logp(x), 0.0, 0.0, s.uniform()) {
            x = prop;
        }
        xs.push(x);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    assert!((mean - mu).abs() < 3.0 * mcse(&xs), "mean {mean}");
    let sq: Vec<f64> = xs.iter().map(|v| (v - mu).powi(2)).collect();
    let var = sq.iter().sum::<f64>() / n as f64;
    assert!((var - sd * sd).abs() < 3.0 * mcse(&sq), "var {var}");
}

fn random_etas(model: &ModelSpec, m: usize, stream: &mut Stream) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..model.re_dim()).map(|_| 2.0 * stream.normal()).collect())
        .collect()
}

#[test]
fn mala_gradient_matches_finite_differences() {
    let mut stream = Stream::new(77);
    for model in [ModelSpec::Constant, ModelSpec::Tumour] {
        let k = model
            .layout()
            .iter()
            .filter(|d| d.block == sdemem_core::model::Block::PhiEta)
            .count();
        let mut defs: Vec<_> = model
            .layout()
            .iter()
            .filter(|d| d.block == sdemem_core::model::Block::PhiEta)
            .copied()
            .collect();
        defs.sort_by_key(|d| d.index);
        for _ in 0..20 {
            let etas = random_etas(&model, 5, &mut stream);
            let u: Vec<f64> = (0..k).map(|_| stream.normal()).collect();
            let phi: Vec<f64> = defs.iter().zip(&u).map(|(d, &ui)| d.transform.to_natural(ui)).collect();
            let g = phi_eta_gradient(&model, &etas, &phi);
            for j in 0..k {
                let h = 1e-5 * (1.0 + u[j].abs());
                let at = |delta: f64| {
                    let mut uu = u.clone();
                    uu[j] += delta;
                    let p: Vec<f64> = defs
                        .iter()
                        .zip(&uu)
                        .map(|(d, &ui)| d.transform.to_natural(ui))
                        .collect();
                    phi_eta_log_target(&model, &etas, &p)
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let rel = (g[j] - fd).abs() / g[j].abs().max(1.0);
                assert!(rel < 1e-5, "component {j}: analytic {} fd {fd}", g[j]);
            }
        }
    }
}

#[test]
fn mala_small_step_always_accepts() {
    let model = ModelSpec::Tumour;
    let mut stream = Stream::new(3);
    let etas = random_etas(&model, 6, &mut stream);
    let phi = vec![1.0, 2.0, -0.5, 1.5];
    let chol = DMatrix::identity(4, 4);
    for _ in 0..200 {
        let z: Vec<f64> = (0..4).map(|_| stream.normal()).collect();
        let (p, lf, lb) = mala_propose(&model, &etas, &phi, &chol, 1e-6, &z).unwrap();
        let r = phi_eta_log_target(&model, &etas, &p) - phi_eta_log_target(&model, &etas, &phi) + lb - lf;
        assert!(r > -1e-5, "{r}");
    }
}

#[test]
fn mala_conditional_matches_conjugate_normal() {
    // σ_β held still by a vanishing preconditioner entry; μ_β | η is normal
    let model = ModelSpec::Constant;
    let etas: Vec<Vec<f64>> = [0.3, -0.4, 1.1, 0.8, 0.2, -0.1].iter().map(|&e| vec![e]).collect();
    let sd = 0.7;
    let m = etas.len() as f64;
    let Prior::Normal { mean: m0, sd: s0 } = model.layout()[3].prior else {
        panic!()
    };
    let prec = m / (sd * sd) + 1.0 / (s0 * s0);
    let post_mean = (etas.iter().map(|e| e[0]).sum::<f64>() / (sd * sd) + m0 / (s0 * s0)) / prec;
    let post_sd = prec.recip().sqrt();
    let chol = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
    let mut phi = vec![0.0, sd];
    let mut stream = Stream::new(12);
    let n = 100_000;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let z = [stream.normal(), stream.normal()];
        let u = stream.uniform();
        if let Some((p, lf, lb)) = mala_propose(&model, &etas, &phi, &chol, 0.5, &z) {
            if mh_accept(
                phi_eta_log_target(&model, &etas, &p),
                phi_eta_log_target(&model, &etas, &phi),
                lf,
                lb,
                u,
            ) {
                phi = p;
            }
        }
        xs.push(phi[0]);
    }
    assert!((phi[1] - sd).abs() < 1e-6);
    let mean = xs.iter().sum::<f64>() / n as f64;
    assert!((mean - post_mean).abs() < 3.0 * mcse(&xs), "{mean} vs {post_mean}");
    let sq: Vec<f64> = xs.iter().map(|x| (x - post_mean).powi(2)).collect();
    let var = sq.iter().sum::<f64>() / n as f64;
    assert!(
        (var - post_sd * post_sd).abs() < 3.0 * mcse(&sq),
        "{var} vs {}",
        post_sd * post_sd
    );
}

#[test]
fn slice_sampler_matches_inverse_gamma_sigma() {
    // flat prior on σ given known states: σ² ~ InvGamma((n − 1)/2, S/2)
    let mut stream = Stream::new(40);
    let resid: Vec<f64> = (0..25).map(|_| 0.4 * stream.normal()).collect();
    let s: f64 = resid.iter().map(|r| r * r).sum();
    let n = resid.len() as f64;
    let target = |ls: f64| -n * ls - s / (2.0 * (2.0 * ls).exp()) + ls;
    let mut x = 0.0;
    let draws = 100_000;
    let mut v = Vec::with_capacity(draws);
    for _ in 0..draws {
        x = slice_sample(target, x, 1.0, 50, &mut stream);
        v.push((2.0 * x).exp());
    }
    let mean = v.iter().sum::<f64>() / draws as f64;
    let exact = s / (n - 3.0);
    assert!((mean - exact).abs() < 3.0 * mcse(&v), "{mean} vs {exact}");
}

#[test]
fn mpm_likelihood_matches_replayed_store() {
    let theta = constant_theta();
    let (ds, _) = constant_dataset(2, 3, 6, &theta);
    let model = ModelSpec::Constant;
    let mut cfg = MethodConfig::new(&model, Method::Mpm);
    cfg.particles = 6;
    cfg.substeps = 4;
    cfg.correlated = true;
    let backend = ParticleBackend::new(&model, &ds, &cfg);
    let mut sampler = Sampler::new(&backend, cfg.clone(), theta.clone()).unwrap();
    for _ in 0..30 {
        sampler.step().unwrap();
        let st = &sampler.state;
        let (_, per) = total_loglik(&model, &st.theta, &st.etas, &ds, &cfg.filter(), &st.store).unwrap();
        for (a, b) in per.iter().zip(&st.loglik) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn mpm_tuned_to_one_particle_runs_two() {
    let theta = constant_theta();
    let (ds, _) = constant_dataset(2, 2, 5, &theta);
    let model = ModelSpec::Constant;
    let mut cfg = MethodConfig::new(&model, Method::Mpm);
    cfg.particles = 1;
    cfg.iterations = 20;
    let backend = ParticleBackend::new(&model, &ds, &cfg);
    let mut path = backend
        .refresh_path(&theta, &[0.0], 0, None, &mut Stream::new(1))
        .unwrap();
    let mut moved = false;
    for i in 0..50 {
        let next = backend
            .refresh_path(&theta, &[0.0], 0, Some(&path), &mut Stream::new(i))
            .unwrap();
        moved |= next.states != path.states;
        path = next;
    }
    assert!(moved, "with a single slot the reference path could never change");
    assert_eq!(run_chain(&backend, &cfg, &theta, &NoClock).unwrap().rows(), 20);
}

fn prior_mean(p: &Prior) -> f64 {
    match *p {
        Prior::Normal { mean, .. } => mean,
        Prior::HalfNormal { scale } => scale * (2.0 / std::f64::consts::PI).sqrt(),
    }
}

#[test]
fn frozen_likelihood_leaves_prior_invariant() {
    let model = ModelSpec::Constant;
    let backend = FrozenBackend {
        model: &model,
        subjects: 3,
        value: -7.0,
    };
    let init = Theta {
        sigma: 3.0,
        phi_x: vec![3.0, 0.0],
        phi_eta: vec![0.0, 3.0],
    };
    for method in [Method::Iapm, Method::Cwpm, Method::Mpm] {
        let mut cfg = MethodConfig::new(&model, method);
        cfg.iterations = 200_000;
        cfg.seed = 31;
        cfg.rw_cov = vec![
            1.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 100.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 16.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 1.0,
        ];
        cfg.re_rw_scales = vec![3.0];
        cfg.mala_step = 0.8;
        let trace = run_chain(&backend, &cfg, &init, &NoClock).unwrap();
        for (j, def) in model.layout().iter().enumerate() {
            let col = trace.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let target = prior_mean(&def.prior);
            let se = mcse_batched(&col, 30);
            assert!(
                (mean - target).abs() < 3.0 * se,
                "{method:?} {}: mean {mean} prior {target} mcse {se}",
                def.name
            );
        }
    }
}

fn desk() -> (sdemem_core::Dataset, Theta) {
    let theta = constant_theta();
    let (ds, _) = constant_dataset(8, 3, 5, &theta);
    (ds, theta)
}

/// Random-walk covariance scaled from a short pilot chain's unconstrained draws.
fn pilot_cov(ds: &sdemem_core::Dataset, theta: &Theta, method: Method) -> Vec<f64> {
    let model = ModelSpec::Constant;
    let layout = model.layout();
    let p = layout.len();
    let mut cfg = MethodConfig::new(&model, method);
    cfg.iterations = 5_000;
    cfg.seed = 1000;
    for i in 0..p {
        cfg.rw_cov[i * p + i] = 0.02;
    }
    let backend = ParticleBackend::new(&model, ds, &cfg);
    let trace = run_chain(&backend, &cfg, theta, &NoClock).unwrap();
    let u: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            trace
                .column(j)
                .iter()
                .map(|&x| layout[j].transform.to_unconstrained(x))
                .collect()
        })
        .collect();
    let n = trace.rows() as f64;
    let means: Vec<f64> = u.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let scale = 2.38 * 2.38 / p as f64;
    let mut cov = vec![0.0; p * p];
    for a in 0..p {
        for b in 0..p {
            let c = u[a]
                .iter()
                .zip(&u[b])
                .map(|(x, y)| (x - means[a]) * (y - means[b]))
                .sum::<f64>()
                / (n - 1.0);
            cov[a * p + b] = scale * c + if a == b { 1e-6 } else { 0.0 };
        }
    }
    cov
}

fn interval(xs: &[f64]) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    (q(0.025), q(0.975))
}

#[test]
fn correlated_and_uncorrelated_variants_agree() {
    let (ds, theta) = desk();
    let model = ModelSpec::Constant;
    for method in [Method::Iapm, Method::Cwpm, Method::Mpm] {
        let cov = pilot_cov(&ds, &theta, method);
        let run = |correlated: bool| {
            let mut cfg = MethodConfig::new(&model, method);
            cfg.iterations = 50_000;
            cfg.correlated = correlated;
            cfg.seed = 2 + correlated as u64;
            cfg.rw_cov = cov.clone();
            let backend = ParticleBackend::new(&model, &ds, &cfg);
            run_chain(&backend, &cfg, &theta, &NoClock).unwrap()
        };
        let (a, b) = (run(false), run(true));
        for (j, def) in model.layout().iter().enumerate() {
            let (ia, ib) = (interval(&a.column(j)), interval(&b.column(j)));
            assert!(
                ia.0 <= ib.1 && ib.0 <= ia.1,
                "{method:?} {}: {ia:?} vs {ib:?}",
                def.name
            );
        }
    }
}

#[test]
fn iapm_gamma_mean_is_seed_consistent() {
    let (ds, theta) = desk();
    let model = ModelSpec::Constant;
    let cov = pilot_cov(&ds, &theta, Method::Iapm);
    let run = |seed: u64, iterations: usize| {
        let mut cfg = MethodConfig::new(&model, Method::Iapm);
        cfg.iterations = iterations;
        cfg.seed = seed;
        cfg.rw_cov = cov.clone();
        let backend = ParticleBackend::new(&model, &ds, &cfg);
        run_chain(&backend, &cfg, &theta, &NoClock).unwrap().column(1)
    };
    let (short, long) = (run(11, 20_000), run(12, 40_000));
    let (ms, ml) = (
        short.iter().sum::<f64>() / short.len() as f64,
        long.iter().sum::<f64>() / long.len() as f64,
    );
    let se = (mcse_batched(&short, 30).powi(2) + mcse_batched(&long, 30).powi(2)).sqrt();
    assert!((ms - ml).abs() < 3.0 * se, "{ms} vs {ml} (se {se})");
}
