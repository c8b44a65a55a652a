use std::path::Path;
use std::process::Command;

use sdemem::commands::{cmd_diagnose, cmd_run, cmd_simulate, load_source, StdClock};
use sdemem::config::{parse_pairs, RunConfig};
use sdemem::dataset::{load_dataset, read_dataset, simulate, write_dataset, SimSpec};
use sdemem::trace_io::{read_trace, write_trace};
use sdemem_core::samplers::{Method, Trace};
use sdemem_core::{ModelSpec, Sdemem, Stream, Theta};

const TRUTH: &str = "3,1,-1,1,1,0.5,1";

fn config(text: &str, out: &Path) -> RunConfig {
    let mut pairs = parse_pairs(text).unwrap();
    pairs.push(("out".into(), out.display().to_string()));
    RunConfig::from_pairs(&pairs).unwrap()
}

fn truth() -> Theta {
    Theta::from_flat(ModelSpec::Tumour.layout(), &[3.0, 1.0, -1.0, 1.0, 1.0, 0.5, 1.0])
}

fn sim_spec(subjects: usize, hours: f64) -> SimSpec {
    SimSpec {
        subjects,
        hours,
        days: 19.0,
    }
}

#[test]
fn simulate_writes_expected_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        &format!("sim_subjects = 10\nsim_hours = 24\nsim_days = 19\nsim_theta = {TRUTH}\nseed = 5"),
        dir.path(),
    );
    let path = cmd_simulate(&cfg).unwrap();
    let first = std::fs::read(&path).unwrap();
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 1 + 200);
    cmd_simulate(&cfg).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
    let ds = load_dataset(&path).unwrap();
    assert_eq!(ds.num_subjects(), 10);
    assert!(ds.subjects.iter().all(|s| s.len() == 20));
    let mut again = Vec::new();
    write_dataset(&ds, &mut again).unwrap();
    assert_eq!(first, again);
}

#[test]
fn noiseless_simulation_equals_latent_states() {
    let model = ModelSpec::Tumour;
    let mut theta = truth();
    theta.sigma = 0.0;
    let ds = simulate(&model, &theta, &sim_spec(3, 24.0), 9).unwrap();
    let mut stream = Stream::new(9);
    for s in &ds.subjects {
        let eta = model.re_sample(&theta.phi_eta, &mut stream);
        let x = sdemem_core::sdesim::simulate_latent(&model, &theta.phi_x, &eta, &s.times, 10, &mut stream).unwrap();
        for _ in 0..x.len() {
            stream.normal();
        }
        assert_eq!(s.obs, x);
    }
    theta.sigma = -0.1;
    assert!(simulate(&model, &theta, &sim_spec(3, 24.0), 9).is_err());
    let mut theta = truth();
    theta.phi_x[0] = 0.0;
    assert!(simulate(&model, &theta, &sim_spec(3, 24.0), 9).is_err());
}

#[test]
fn small_real_shaped_file_parses() {
    let counts = [2, 4, 6, 14, 3, 2, 3];
    assert_eq!(counts.iter().sum::<usize>(), 34);
    let mut text = String::from("subject,time,y\n");
    for (m, &c) in counts.iter().enumerate() {
        for k in 0..c {
            text.push_str(&format!("mouse{m},{},{}\n", 2 * k + m, 4.0 + 0.1 * k as f64));
        }
    }
    let ds = read_dataset(text.as_bytes()).unwrap();
    assert_eq!(ds.num_subjects(), 7);
    assert_eq!(ds.num_observations(), 34);
    assert_eq!(ds.max_time(), 29.0);
}

#[test]
fn run_writes_one_row_per_iteration_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "sim_subjects = 4\nsim_hours = 24\nsim_days = 5\nsim_theta = {TRUTH}\nmethod = mpm\niterations = 10\nparticles = 5\nseed = 3"
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = cmd_run(&config(&text, &a), &StdClock::new()).unwrap();
    cmd_run(&config(&text, &b), &StdClock::new()).unwrap();
    let ta = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(ta.lines().count(), 11);
    assert_eq!(out.trace.rows(), 10);
    assert_eq!(ta, std::fs::read_to_string(b.join("trace.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("etas.csv")).unwrap(),
        std::fs::read(b.join("etas.csv")).unwrap()
    );
    assert!(a.join("report.txt").exists() && a.join("data.csv").exists());
}

#[test]
fn naive_method_runs_on_desk_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "sim_subjects = 10\nsim_hours = 24\nsim_days = 19\nsim_theta = {TRUTH}\nmethod = iapm\nimportance = prior\nproposal = emd\ncorrelated = false\niterations = 20"
    );
    let cfg = config(&text, dir.path());
    assert_eq!(load_source(&cfg).unwrap().num_observations(), 200);
    let out = cmd_run(&cfg, &StdClock::new()).unwrap();
    assert_eq!(out.trace.rows(), 20);
    assert!(out.trace.loglik.iter().all(|l| l.is_finite()));
}

fn iid_trace(n: usize, seed: u64) -> Trace {
    let layout = ModelSpec::Tumour.layout();
    let mut s = Stream::new(seed);
    let mut theta = Vec::new();
    for _ in 0..n {
        theta.extend(
            layout
                .iter()
                .map(|d| d.prior.sample(&mut s) * 1.000_000_000_000_1 + 1e-300),
        );
    }
    Trace {
        method: Method::Iapm,
        param_names: layout.iter().map(|d| d.name).collect(),
        theta,
        etas: Vec::new(),
        loglik: (0..n).map(|i| -100.0 - i as f64 / 3.0).collect(),
        log_prior: vec![-1.0 / 7.0; n],
        block_names: vec!["theta"],
        accept: (0..n).map(|i| (i % 2) as f64).collect(),
        duration_secs: 0.0,
        final_seeds: Vec::new(),
    }
}

#[test]
fn trace_csv_round_trips_exactly() {
    let trace = iid_trace(500, 2);
    let mut buf = Vec::new();
    write_trace(&trace, &mut buf).unwrap();
    let (model, back) = read_trace(buf.as_slice()).unwrap();
    assert_eq!(model, ModelSpec::Tumour);
    assert_eq!(back.method, Method::Iapm);
    for (a, b) in trace
        .theta
        .iter()
        .zip(&back.theta)
        .chain(trace.loglik.iter().zip(&back.loglik))
    {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(trace.accept, back.accept);
    assert_eq!(trace.log_prior, back.log_prior);
}

#[test]
fn diagnose_iid_trace_reports_full_multiess() {
    let dir = tempfile::tempdir().unwrap();
    let n = 10_000;
    let path = dir.path().join("trace.csv");
    write_trace(&iid_trace(n, 1), std::fs::File::create(&path).unwrap()).unwrap();
    let report = cmd_diagnose(&path, dir.path()).unwrap();
    let ess = report.multiess.unwrap();
    assert!((ess / n as f64 - 1.0).abs() < 0.15, "{ess}");
    assert_eq!(report.acceptance, [("theta".to_string(), 0.5)]);
    let density = std::fs::read_to_string(dir.path().join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 1 + 7 * 512);
    assert!(dir.path().join("diagnose.txt").exists());
}

fn sdemem(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sdemem")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_errors_are_single_prefixed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    let bad_csv = dir.path().join("bad.csv");
    std::fs::write(&bad_csv, "subject,time,y\na,0,1\na,1,oops\n").unwrap();
    let bad = bad_csv.display().to_string();
    let cases: Vec<(Vec<&str>, i32, &str)> = vec![
        (vec!["--frobnicate"], 2, "error: config: "),
        (vec!["run", "--method", "nope"], 2, "error: config: "),
        (vec!["--out", &d, "run"], 2, "error: config: "),
        (
            vec!["--out", &d, "run", "--data", &bad, "--init", TRUTH],
            2,
            "error: data: ",
        ),
        (
            vec!["--out", &d, "run", "--data", "/nonexistent/x.csv", "--init", TRUTH],
            2,
            "error: io: ",
        ),
        (
            vec![
                "--out",
                &d,
                "tune",
                "--model",
                "tumour",
                "--subjects",
                "2",
                "--days",
                "2",
                "--theta",
                TRUTH,
                "--set",
                "tune_max_particles=1",
                "--set",
                "substeps=1",
            ],
            4,
            "error: tuning: ",
        ),
    ];
    for (args, code, prefix) in cases {
        let (got, _, err) = sdemem(&args);
        assert_eq!(got, code, "{args:?}: {err}");
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with(prefix), "{args:?}: {err}");
    }
    assert!(dir.path().join("tuning.txt").exists());
    let (code, out, _) = sdemem(&["keys"]);
    assert_eq!(code, 0);
    assert!(out.contains("rw_cov"));
}

#[test]
fn cli_simulate_and_run_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    let (code, _, err) = sdemem(&[
        "--out",
        &d,
        "--seed",
        "7",
        "simulate",
        "--theta",
        TRUTH,
        "--subjects",
        "3",
        "--hours",
        "12",
        "--days",
        "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let data = dir.path().join("data.csv").display().to_string();
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 1 + 3 * 5);
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "method = cwpm # component-wise\niterations = 7\n").unwrap();
    let run_dir = dir.path().join("run").display().to_string();
    let (code, out, err) = sdemem(&[
        "--config",
        &cfg.display().to_string(),
        "--out",
        &run_dir,
        "run",
        "--data",
        &data,
        "--init",
        TRUTH,
        "--iterations",
        "12",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("method = cwpm"));
    let trace = std::fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 13);
    assert!(trace.starts_with("iteration,mu_x0,sigma_x0,mu_beta,sigma_beta,gamma,sigma,rho,loglik,logprior,accept_eta"));
}
