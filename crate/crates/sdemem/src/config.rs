//! Flat `key = value` configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sdemem_core::model::{block_indices, Block};
use sdemem_core::pfilter::PathSelection;
use sdemem_core::relik::ImportanceKind;
use sdemem_core::samplers::{Method, MethodConfig, SigmaUpdate};
use sdemem_core::tunediag::{RefreshRule, DEFAULT_MAX_PARTICLES, DEFAULT_REPLICATES, DEFAULT_TIME_CAP_SECS};
use sdemem_core::{builtin_model, ModelSpec, Proposal, ResampleScheme, Sdemem, Theta};

use crate::dataset::SimSpec;
use crate::error::{AppError, Result};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model", "built-in model: constant or tumour"),
    ("data", "dataset CSV with header subject,time,y"),
    ("sim_subjects", "synthetic data: number of subjects M"),
    ("sim_hours", "synthetic data: hours between observations H"),
    ("sim_days", "synthetic data: length of the study in days"),
    (
        "sim_theta",
        "synthetic data: true parameters, comma-separated in layout order",
    ),
    ("init", "starting parameters in layout order (defaults to sim_theta)"),
    ("method", "iapm, cwpm or mpm"),
    ("correlated", "block-correlated random numbers (true/false)"),
    ("proposal", "particle proposal: emd, mdb or rb"),
    ("scheme", "resampling: stratified or multinomial"),
    (
        "importance",
        "IAPM random-effect importance density: prior, l_ode or laplace_mdb",
    ),
    (
        "qmc",
        "randomised quasi-Monte Carlo random-effect draws for IAPM (true/false)",
    ),
    ("particles", "particles per filter N"),
    ("draws", "random-effect draws per subject L (IAPM)"),
    ("substeps", "sub-steps per observation interval D"),
    ("iterations", "MCMC iterations"),
    (
        "rw_cov",
        "random-walk covariance on the unconstrained scale: p variances or p*p row-major entries",
    ),
    ("mala_step", "MALA step size"),
    (
        "mala_precond",
        "MALA preconditioner: k variances or k*k row-major entries",
    ),
    ("re_rw_scales", "random-walk SD per random-effect dimension"),
    ("joint_eta", "accept all random effects jointly (true/false)"),
    ("sigma_update", "MPM observation-SD update: slice or mh"),
    ("selection", "MPM path selection: backward or ancestral"),
    ("seed", "master seed"),
    ("out", "output directory"),
    ("threads", "worker threads for per-subject work"),
    ("tune_reps", "log-likelihood estimates per tuning candidate"),
    ("tune_time_cap", "seconds allowed for one estimate while tuning"),
    ("tune_max_particles", "largest particle count tried while tuning"),
    (
        "tune_refresh",
        "tuning refresh rule: block or independent (defaults from correlated)",
    ),
];

/// Parses `key = value` lines. Later keys override earlier ones.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| AppError::Config(format!("config line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(AppError::Config(format!("config line {}: unknown key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    parse_pairs(&text).map_err(|e| match e {
        AppError::Config(msg) => AppError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses one `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let pairs = parse_pairs(s)?;
    match pairs.as_slice() {
        [one] => Ok(one.clone()),
        _ => Err(AppError::Config(format!("expected key=value, got `{s}`"))),
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: Option<PathBuf>,
    pub sim: Option<SimSpec>,
    pub sim_theta: Option<Theta>,
    pub init: Option<Theta>,
    pub method: MethodConfig,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub tune_reps: usize,
    pub tune_time_cap: f64,
    pub tune_max_particles: usize,
    pub tune_refresh: Option<RefreshRule>,
}

struct Values(BTreeMap<String, String>);

fn bad(key: &str, value: &str, want: &str) -> AppError {
    AppError::Config(format!("{key} = `{value}`: expected {want}"))
}

impl Values {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, want: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| bad(key, &v, want)),
        }
    }

    fn flag(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => Ok(Some(true)),
                "false" | "no" | "0" => Ok(Some(false)),
                _ => Err(bad(key, &v, "true or false")),
            },
        }
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| bad(key, &v, "comma-separated numbers")),
        }
    }

    fn choice<T>(&mut self, key: &str, parse: impl Fn(&str) -> Option<T>, want: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => parse(&v).map(Some).ok_or_else(|| bad(key, &v, want)),
        }
    }
}

pub fn parse_theta(model: &ModelSpec, key: &str, values: &[f64]) -> Result<Theta> {
    let layout = model.layout();
    if values.len() != layout.len() {
        let names: Vec<&str> = layout.iter().map(|d| d.name).collect();
        return Err(AppError::Config(format!(
            "{key} needs {} values ({}), got {}",
            layout.len(),
            names.join(","),
            values.len()
        )));
    }
    Ok(Theta::from_flat(layout, values))
}

/// A square matrix from `n` diagonal entries or `n*n` row-major entries.
fn square_or_diagonal(key: &str, values: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    if values.len() == n * n {
        Ok(values)
    } else if values.len() == n {
        let mut out = vec![0.0; n * n];
        for (i, v) in values.into_iter().enumerate() {
            out[i * n + i] = v;
        }
        Ok(out)
    } else {
        Err(AppError::Config(format!(
            "{key} needs {n} or {} values, got {}",
            n * n,
            values.len()
        )))
    }
}

impl RunConfig {
    /// Builds a configuration from pairs in override order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut v = Values(pairs.iter().cloned().collect());
        let model = match v.take("model") {
            Some(name) => builtin_model(&name)?,
            None => ModelSpec::Tumour,
        };
        let method_kind = v
            .choice("method", Method::parse, "iapm, cwpm or mpm")?
            .unwrap_or(Method::Iapm);
        let mut m = MethodConfig::new(&model, method_kind);
        if let Some(x) = v.flag("correlated")? {
            m.correlated = x;
        }
        if let Some(x) = v.choice("proposal", Proposal::parse, "emd, mdb or rb")? {
            m.proposal = x;
        }
        if let Some(x) = v.choice("scheme", ResampleScheme::parse, "stratified or multinomial")? {
            m.scheme = x;
        }
        if let Some(x) = v.choice("importance", ImportanceKind::parse, "prior, l_ode or laplace_mdb")? {
            m.importance = x;
        }
        if let Some(x) = v.flag("qmc")? {
            m.qmc = x;
        }
        if let Some(x) = v.parse("particles", "a positive integer")? {
            m.particles = x;
        }
        if let Some(x) = v.parse("draws", "a positive integer")? {
            m.draws = x;
        }
        if let Some(x) = v.parse("substeps", "a positive integer")? {
            m.substeps = x;
        }
        if let Some(x) = v.parse("iterations", "a positive integer")? {
            m.iterations = x;
        }
        let p = model.layout().len();
        if let Some(x) = v.list("rw_cov")? {
            m.rw_cov = square_or_diagonal("rw_cov", x, p)?;
        }
        if let Some(x) = v.parse("mala_step", "a positive number")? {
            m.mala_step = x;
        }
        let k = block_indices(model.layout(), Block::PhiEta).len();
        if let Some(x) = v.list("mala_precond")? {
            m.mala_precond = square_or_diagonal("mala_precond", x, k)?;
        }
        if let Some(x) = v.list("re_rw_scales")? {
            m.re_rw_scales = x;
        }
        if let Some(x) = v.flag("joint_eta")? {
            m.joint_eta = x;
        }
        let sigma_update = |s: &str| match s {
            "slice" => Some(SigmaUpdate::Slice),
            "mh" => Some(SigmaUpdate::Mh),
            _ => None,
        };
        if let Some(x) = v.choice("sigma_update", sigma_update, "slice or mh")? {
            m.sigma_update = x;
        }
        let selection = |s: &str| match s {
            "backward" => Some(PathSelection::Backward),
            "ancestral" => Some(PathSelection::Ancestral),
            _ => None,
        };
        if let Some(x) = v.choice("selection", selection, "backward or ancestral")? {
            m.selection = x;
        }
        if let Some(x) = v.parse("seed", "a non-negative integer")? {
            m.seed = x;
        }
        m.validate(&model)?;

        let sim_parts = (
            v.parse::<usize>("sim_subjects", "a positive integer")?,
            v.parse::<f64>("sim_hours", "a positive number")?,
            v.parse::<f64>("sim_days", "a number of days")?,
        );
        let sim = match sim_parts {
            (None, None, None) => None,
            (Some(subjects), hours, days) => Some(SimSpec {
                subjects,
                hours: hours.unwrap_or(24.0),
                days: days.unwrap_or(19.0),
            }),
            _ => return Err(AppError::Config("synthetic data needs sim_subjects".into())),
        };
        if let Some(s) = &sim {
            s.validate()?;
        }
        let sim_theta = v
            .list("sim_theta")?
            .map(|x| parse_theta(&model, "sim_theta", &x))
            .transpose()?;
        let init = v.list("init")?.map(|x| parse_theta(&model, "init", &x)).transpose()?;
        let refresh = |s: &str| match s {
            "block" => Some(RefreshRule::Block),
            "independent" => Some(RefreshRule::Independent),
            _ => None,
        };
        let cfg = RunConfig {
            model,
            data: v.take("data").map(PathBuf::from),
            sim,
            sim_theta,
            init,
            method: m,
            out: v.take("out").map_or_else(|| PathBuf::from("."), PathBuf::from),
            threads: v.parse("threads", "a positive integer")?,
            tune_reps: v.parse("tune_reps", "an integer ≥ 1000")?.unwrap_or(DEFAULT_REPLICATES),
            tune_time_cap: v.parse("tune_time_cap", "seconds")?.unwrap_or(DEFAULT_TIME_CAP_SECS),
            tune_max_particles: v
                .parse("tune_max_particles", "a positive integer")?
                .unwrap_or(DEFAULT_MAX_PARTICLES),
            tune_refresh: v.choice("tune_refresh", refresh, "block or independent")?,
        };
        if let Some(key) = v.0.keys().next() {
            return Err(AppError::Config(format!("unknown key `{key}`")));
        }
        if cfg.tune_reps < DEFAULT_REPLICATES {
            return Err(AppError::Config(format!(
                "tune_reps must be at least {DEFAULT_REPLICATES}"
            )));
        }
        if cfg.threads == Some(0) {
            return Err(AppError::Config("threads must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Checks that exactly one data source is configured.
    pub fn require_source(&self) -> Result<()> {
        match (&self.data, &self.sim) {
            (Some(_), Some(_)) => Err(AppError::Config("give either data or sim_subjects, not both".into())),
            (None, None) => Err(AppError::Config("no data: set data or sim_subjects".into())),
            (None, Some(_)) if self.sim_theta.is_none() => {
                Err(AppError::Config("synthetic data needs sim_theta".into()))
            }
            _ => Ok(()),
        }
    }

    /// Starting parameters: `init`, else the true synthetic parameters.
    pub fn start(&self) -> Result<Theta> {
        self.init
            .clone()
            .or_else(|| self.sim.as_ref().and(self.sim_theta.clone()))
            .ok_or_else(|| AppError::Config("set init to the starting parameters".into()))
    }
}
