mod common;

use common::*;
use nalgebra::DMatrix;
use sdemem_core::model::ModelSpec;
use sdemem_core::pfilter::total_loglik;
use sdemem_core::relik::{iapm_total_loglik, IapmConfig, ImportanceKind};
use sdemem_core::samplers::{run_chain, FrozenBackend, Method, MethodConfig, Trace};
use sdemem_core::tunediag::*;
use sdemem_core::{FilterConfig, NoClock, Proposal, Stream, Theta};

fn gaussian_rows(n: usize, p: usize, seed: u64) -> Vec<f64> {
    let mut s = Stream::new(seed);
    (0..n * p).map(|_| s.normal()).collect()
}

fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
    let mut s = Stream::new(seed);
    let mut x = s.normal();
    let innov = (1.0 - rho * rho).sqrt();
    (0..n)
        .map(|_| {
            x = rho * x + innov * s.normal();
            x
        })
        .collect()
}

#[test]
fn iid_draws_have_full_multiess() {
    // a single 10⁴ draw lands outside ±15% for about one seed in seven
    let n = 10_000;
    let ratios: Vec<f64> = (0..50)
        .map(|seed| multiess(&gaussian_rows(n, 3, seed), 3).unwrap() / n as f64)
        .collect();
    let (mean, _) = mean_and_se(&ratios);
    assert!((mean - 1.0).abs() < 0.15, "{mean}");
    let inside = ratios.iter().filter(|r| (*r - 1.0).abs() < 0.15).count();
    assert!(inside >= 35, "{inside}/50");
}

#[test]
fn persistent_chain_has_small_multiess() {
    let n = 10_000;
    let ess = multiess(&ar1(n, 0.99, 2), 1).unwrap();
    assert!(ess < 0.05 * n as f64, "{ess}");
}

#[test]
fn univariate_multiess_matches_batch_means() {
    let xs = ar1(10_000, 0.7, 4);
    let n = xs.len();
    let b = (n as f64).sqrt() as usize;
    let a = n / b;
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let bm: Vec<f64> = (0..a)
        .map(|k| xs[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let bmean = bm.iter().sum::<f64>() / a as f64;
    let sigma = b as f64 * bm.iter().map(|m| (m - bmean).powi(2)).sum::<f64>() / (a - 1) as f64;
    let direct = n as f64 * var / sigma;
    let ess = multiess(&xs, 1).unwrap();
    assert!((ess - direct).abs() / direct < 1e-10, "{ess} vs {direct}");
}

#[test]
fn multiess_is_affine_invariant() {
    let (n, p) = (5_000, 4);
    let mut rows = Vec::with_capacity(n * p);
    let chains: Vec<Vec<f64>> = (0..p).map(|j| ar1(n, 0.3 + 0.15 * j as f64, 10 + j as u64)).collect();
    for i in 0..n {
        rows.extend(chains.iter().map(|c| c[i]));
    }
    let mut s = Stream::new(99);
    let a = DMatrix::from_fn(p, p, |i, j| s.normal() + if i == j { 3.0 } else { 0.0 });
    assert!(a.determinant().abs() > 1e-3);
    let shift: Vec<f64> = (0..p).map(|_| 5.0 * s.normal()).collect();
    let mut mapped = Vec::with_capacity(n * p);
    for r in rows.chunks(p) {
        for i in 0..p {
            mapped.push(shift[i] + (0..p).map(|j| a[(i, j)] * r[j]).sum::<f64>());
        }
    }
    let e0 = multiess(&rows, p).unwrap();
    let e1 = multiess(&mapped, p).unwrap();
    assert!((e0 - e1).abs() / e0 < 1e-8, "{e0} vs {e1}");
}

#[test]
fn sigma_delta_of_iid_normals_matches_folded_normal() {
    let s = 0.8;
    let mut src = Stream::new(6);
    let reps = 100_000;
    let got = sigma_delta(
        |_| Ok(-40.0 + s * src.normal()),
        4,
        RefreshRule::Independent,
        reps,
        1,
        &NoClock,
        1.0,
    )
    .unwrap();
    // folded-normal oracle by direct simulation
    let mut o = Stream::new(7);
    let folded: Vec<f64> = (0..1_000_000).map(|_| (s * 2f64.sqrt() * o.normal()).abs()).collect();
    let (m, _) = mean_and_se(&folded);
    let sd = (folded.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (folded.len() - 1) as f64).sqrt();
    let closed = s * 2f64.sqrt() * (1.0 - 2.0 / std::f64::consts::PI).sqrt();
    assert!((sd - closed).abs() / closed < 0.005);
    assert!((got.sigma_delta - sd).abs() / sd < 0.02, "{} vs {sd}", got.sigma_delta);
    assert!((got.sd_r - s * 2f64.sqrt()).abs() / (s * 2f64.sqrt()) < 0.02);
}

fn desk_case() -> (sdemem_core::Dataset, Vec<Vec<f64>>, Theta) {
    let theta = constant_theta();
    let (ds, etas) = constant_dataset(21, 10, 10, &theta);
    (ds, etas.into_iter().map(|e| vec![e]).collect(), theta)
}

#[test]
fn block_refresh_beats_independent_refresh() {
    let (ds, etas, theta) = desk_case();
    let model = ModelSpec::Constant;
    let cfg = FilterConfig::new(10, 10, Proposal::Mdb);
    let run = |rule| {
        sigma_delta(
            |store| Ok(total_loglik(&model, &theta, &etas, &ds, &cfg, store)?.0),
            10,
            rule,
            1000,
            5,
            &NoClock,
            60.0,
        )
        .unwrap()
    };
    let ind = run(RefreshRule::Independent);
    let blk = run(RefreshRule::Block);
    assert!(
        blk.sigma_delta < ind.sigma_delta,
        "{} vs {}",
        blk.sigma_delta,
        ind.sigma_delta
    );
    assert!((0.8..=0.98).contains(&blk.lag1), "lag-1 {}", blk.lag1);
}

#[test]
fn correlated_iapm_totals_have_target_lag1() {
    let (ds, _, theta) = desk_case();
    let model = ModelSpec::Constant;
    let cfg = IapmConfig {
        draws: 4,
        filter: FilterConfig::new(8, 10, Proposal::Mdb),
        kind: ImportanceKind::LaplaceMdb,
        qmc: false,
    };
    let sd = sigma_delta(
        |store| Ok(iapm_total_loglik(&model, &theta, &ds, &cfg, store)?.0),
        10,
        RefreshRule::Block,
        1000,
        9,
        &NoClock,
        60.0,
    )
    .unwrap();
    assert!((0.8..=0.98).contains(&sd.lag1), "lag-1 {}", sd.lag1);
}

#[test]
fn tuning_is_deterministic_given_seed() {
    let (ds, etas, theta) = desk_case();
    let model = ModelSpec::Constant;
    let tune = || {
        tune_particles(
            |n| {
                let cfg = FilterConfig::new(n, 10, Proposal::Emd);
                sigma_delta(
                    |store| Ok(total_loglik(&model, &theta, &etas, &ds, &cfg, store)?.0),
                    10,
                    RefreshRule::Block,
                    1000,
                    3,
                    &NoClock,
                    60.0,
                )
            },
            SIGMA_DELTA_TARGET,
            1024,
        )
    };
    let a = tune();
    assert!(a.attained());
    assert_eq!(a, tune());
}

#[test]
fn identical_traces_give_identical_reports() {
    let (ds, _, theta) = desk_case();
    let model = ModelSpec::Constant;
    let _ = ds;
    let backend = FrozenBackend {
        model: &model,
        subjects: 10,
        value: -3.0,
    };
    let mut cfg = MethodConfig::new(&model, Method::Cwpm);
    cfg.iterations = 2_000;
    let a = run_chain(&backend, &cfg, &theta, &NoClock).unwrap();
    let b = run_chain(&backend, &cfg, &theta, &NoClock).unwrap();
    let groups = default_groups(&model);
    let (ra, rb) = (run_report(&a, &groups), run_report(&b, &groups));
    assert_eq!(format!("{ra:?}"), format!("{rb:?}"));
    for ((_, r), k) in ra.acceptance.iter().zip(0..) {
        let nb = a.block_names.len();
        let direct = (0..a.rows()).map(|i| a.accept[i * nb + k]).sum::<f64>() / a.rows() as f64;
        assert_eq!(*r, direct);
    }
}

#[test]
fn iid_prior_trace_has_full_block_multiess() {
    let model = ModelSpec::Tumour;
    use sdemem_core::Sdemem;
    let layout = model.layout();
    let n = 10_000;
    let mut s = Stream::new(17);
    let mut theta = Vec::with_capacity(n * layout.len());
    for _ in 0..n {
        theta.extend(layout.iter().map(|d| d.prior.sample(&mut s)));
    }
    let trace = Trace {
        method: Method::Iapm,
        param_names: layout.iter().map(|d| d.name).collect(),
        theta,
        etas: Vec::new(),
        loglik: vec![0.0; n],
        log_prior: vec![0.0; n],
        block_names: vec!["theta"],
        accept: vec![1.0; n],
        duration_secs: 60.0,
        final_seeds: Vec::new(),
    };
    let report = run_report(&trace, &default_groups(&model));
    assert_eq!(report.group_multiess.len(), 3);
    for (name, ess) in report
        .group_multiess
        .iter()
        .chain([(String::from("all"), report.multiess)].iter())
    {
        let e = ess.unwrap();
        assert!((e / n as f64 - 1.0).abs() < 0.15, "{name}: {e}");
    }
    assert_eq!(report.score, report.multiess);
}
