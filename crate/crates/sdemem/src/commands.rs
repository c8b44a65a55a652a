//! The `simulate`, `tune`, `run` and `diagnose` commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sdemem_core::pfilter::total_loglik;
use sdemem_core::relik::{fit_importance, iapm_subject_loglik};
use sdemem_core::samplers::{run_chain, LikelihoodBackend, Method, MethodConfig, ParticleBackend, Trace};
use sdemem_core::tunediag::{
    default_groups, run_report, sigma_delta, tune_particles, RefreshRule, RunReport, SigmaDelta, TuningReport,
    SIGMA_DELTA_TARGET,
};
use sdemem_core::{Clock, Dataset, Error, ModelSpec, RngBlockStore, Sdemem, Theta};

use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset, simulate};
use crate::error::{AppError, Result};
use crate::kde::{density_grid, GRID_POINTS};
use crate::report::{parse_report, run_report_text, tuning_report_text};
use crate::trace_io::{load_trace, save_trace, write_etas};
use crate::{fmt_f64, write_file};

/// Wall-clock seconds since construction.
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

/// Simulates the configured synthetic design and writes `data.csv`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = cfg
        .sim
        .as_ref()
        .ok_or_else(|| AppError::Config("simulate needs sim_subjects".into()))?;
    let theta = cfg
        .sim_theta
        .as_ref()
        .ok_or_else(|| AppError::Config("simulate needs sim_theta".into()))?;
    if !spec.standard_interval() {
        eprintln!("warning: sim_hours = {} is not one of 1, 12, 24", spec.hours);
    }
    let ds = simulate(&cfg.model, theta, spec, cfg.method.seed)?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out.join("data.csv");
    save_dataset(&ds, &path)?;
    Ok(path)
}

/// The configured dataset, simulated when the configuration is synthetic.
pub fn load_source(cfg: &RunConfig) -> Result<Dataset> {
    cfg.require_source()?;
    match (&cfg.data, &cfg.sim, &cfg.sim_theta) {
        (Some(path), _, _) => load_dataset(path),
        (None, Some(spec), Some(theta)) => simulate(&cfg.model, theta, spec, cfg.method.seed),
        _ => unreachable!("require_source checked the data source"),
    }
}

pub struct RunOutput {
    pub trace: Trace,
    pub report: RunReport,
}

/// Runs the configured chain and writes `trace.csv`, `etas.csv` (methods
/// with explicit random effects), `report.txt` and, for synthetic data,
/// `data.csv`.
pub fn cmd_run(cfg: &RunConfig, clock: &dyn Clock) -> Result<RunOutput> {
    let ds = load_source(cfg)?;
    let init = cfg.start()?;
    let backend = ParticleBackend::new(&cfg.model, &ds, &cfg.method);
    let trace = run_chain(&backend, &cfg.method, &init, clock)?;
    let report = run_report(&trace, &default_groups(&cfg.model));
    ensure_dir(&cfg.out)?;
    if cfg.data.is_none() {
        save_dataset(&ds, &cfg.out.join("data.csv"))?;
    }
    save_trace(&trace, &cfg.out.join("trace.csv"))?;
    if !trace.etas.is_empty() {
        let ids: Vec<String> = ds.subjects.iter().map(|s| s.id.clone()).collect();
        let path = cfg.out.join("etas.csv");
        let file = std::fs::File::create(&path).map_err(|e| AppError::io(&path, e))?;
        write_etas(&trace, &ids, cfg.model.re_names(), std::io::BufWriter::new(file))?;
    }
    write_file(&cfg.out.join("report.txt"), &run_report_text(&report))?;
    Ok(RunOutput { trace, report })
}

/// Tuning problem: σ_Δ of the method's likelihood estimator at fixed
/// parameters as a function of the particle count (`L = N` for IAPM).
pub struct TuneProblem<'a> {
    pub model: &'a ModelSpec,
    pub dataset: &'a Dataset,
    pub method: &'a MethodConfig,
    pub theta: &'a Theta,
    pub rule: RefreshRule,
    pub reps: usize,
    pub time_cap: f64,
    pub max_particles: usize,
}

impl TuneProblem<'_> {
    /// σ_Δ with `n` particles.
    pub fn evaluate(&self, n: usize, clock: &dyn Clock) -> Result<SigmaDelta, Error> {
        let mut cfg = self.method.clone();
        cfg.particles = n;
        cfg.draws = n;
        let m = self.dataset.num_subjects();
        let seed = cfg.seed;
        match cfg.method {
            Method::Iapm => {
                let iapm = cfg.iapm();
                let densities: Vec<_> = self
                    .dataset
                    .subjects
                    .iter()
                    .map(|s| fit_importance(iapm.kind, self.model, self.theta, s, iapm.filter.substeps))
                    .collect();
                let estimate = |store: &RngBlockStore| -> Result<f64, Error> {
                    let mut total = 0.0;
                    for (i, s) in self.dataset.subjects.iter().enumerate() {
                        total +=
                            iapm_subject_loglik(self.model, self.theta, s, &iapm, &densities[i], store.block_seed(i))?;
                    }
                    Ok(total)
                };
                sigma_delta(estimate, m, self.rule, self.reps, seed, clock, self.time_cap)
            }
            Method::Cwpm | Method::Mpm => {
                let backend = ParticleBackend::new(self.model, self.dataset, &cfg);
                let etas: Vec<Vec<f64>> = (0..m).map(|i| backend.initial_eta(self.theta, i)).collect();
                let filter = cfg.filter();
                let estimate = |store: &RngBlockStore| {
                    total_loglik(self.model, self.theta, &etas, self.dataset, &filter, store).map(|r| r.0)
                };
                sigma_delta(estimate, m, self.rule, self.reps, seed, clock, self.time_cap)
            }
        }
    }

    pub fn tune(&self, clock: &dyn Clock) -> TuningReport {
        tune_particles(|n| self.evaluate(n, clock), SIGMA_DELTA_TARGET, self.max_particles)
    }
}

/// Tunes the particle count and writes `tuning.txt`; an unattained target
/// is an error once the report is written.
pub fn cmd_tune(cfg: &RunConfig, clock: &dyn Clock) -> Result<TuningReport> {
    let ds = load_source(cfg)?;
    let theta = cfg.start()?;
    let rule = cfg.tune_refresh.unwrap_or(if cfg.method.correlated {
        RefreshRule::Block
    } else {
        RefreshRule::Independent
    });
    let problem = TuneProblem {
        model: &cfg.model,
        dataset: &ds,
        method: &cfg.method,
        theta: &theta,
        rule,
        reps: cfg.tune_reps,
        time_cap: cfg.tune_time_cap,
        max_particles: cfg.tune_max_particles,
    };
    let report = problem.tune(clock);
    let m = &cfg.method;
    let header = [
        ("model", cfg.model.name().to_string()),
        ("method", m.method.as_str().to_string()),
        ("correlated", m.correlated.to_string()),
        ("proposal", m.proposal.as_str().to_string()),
        ("importance", m.importance.as_str().to_string()),
        ("substeps", m.substeps.to_string()),
        ("refresh", format!("{rule:?}").to_lowercase()),
        ("reps", cfg.tune_reps.to_string()),
        ("seed", m.seed.to_string()),
    ];
    ensure_dir(&cfg.out)?;
    write_file(&cfg.out.join("tuning.txt"), &tuning_report_text(&header, &report))?;
    if !report.attained() {
        return Err(AppError::Unattained(format!(
            "σ_Δ ≤ {} not reached within {} particles",
            report.target, cfg.tune_max_particles
        )));
    }
    Ok(report)
}

/// Recomputes the run report of a trace file and writes `diagnose.txt` and
/// `density.csv` (`parameter,x,density`, 512 points per parameter) to `out`.
/// The score uses `duration_secs` from a `report.txt` next to the trace.
pub fn cmd_diagnose(trace_path: &Path, out: &Path) -> Result<RunReport> {
    let (model, mut trace) = load_trace(trace_path)?;
    let sibling = trace_path.with_file_name("report.txt");
    if let Ok(text) = std::fs::read_to_string(&sibling) {
        if let Some((_, v)) = parse_report(&text).into_iter().find(|(k, _)| k == "duration_secs") {
            trace.duration_secs = v.parse().unwrap_or(0.0);
        }
    }
    let report = run_report(&trace, &default_groups(&model));
    ensure_dir(out)?;
    write_file(&out.join("diagnose.txt"), &run_report_text(&report))?;
    let mut csv = String::from("parameter,x,density\n");
    for (j, name) in trace.param_names.iter().enumerate() {
        for (x, d) in density_grid(&trace.column(j), GRID_POINTS) {
            csv.push_str(&format!("{name},{},{}\n", fmt_f64(x), fmt_f64(d)));
        }
    }
    write_file(&out.join("density.csv"), &csv)?;
    Ok(report)
}
