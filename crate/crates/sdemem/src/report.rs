//! Key-value report text: one `key = value` per line.

use std::fmt::Write as _;

use sdemem_core::tunediag::{RunReport, TuningReport};

use crate::fmt_f64;

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| String::from("none"), fmt_f64)
}

pub fn run_report_text(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "method = {}", r.method);
    let _ = writeln!(s, "iterations = {}", r.iterations);
    let _ = writeln!(s, "duration_secs = {}", fmt_f64(r.duration_secs));
    let _ = writeln!(s, "multiess = {}", opt(r.multiess));
    for (name, ess) in &r.group_multiess {
        let _ = writeln!(s, "multiess.{name} = {}", opt(*ess));
    }
    for (block, rate) in &r.acceptance {
        let _ = writeln!(s, "acceptance.{block} = {}", fmt_f64(*rate));
    }
    let _ = writeln!(s, "score = {}", opt(r.score));
    for (i, issue) in r.issues.iter().enumerate() {
        let _ = writeln!(s, "issue.{i} = {issue}");
    }
    s
}

/// `header` pairs describe the configuration under test.
pub fn tuning_report_text(header: &[(&str, String)], r: &TuningReport) -> String {
    let mut s = String::new();
    for (k, v) in header {
        let _ = writeln!(s, "{k} = {v}");
    }
    let _ = writeln!(s, "target = {}", fmt_f64(r.target));
    match r.selected {
        Some(n) => {
            let _ = writeln!(s, "selected = {n}");
        }
        None => {
            let _ = writeln!(s, "selected = unattained");
        }
    }
    for (i, c) in r.candidates.iter().enumerate() {
        let _ = writeln!(s, "candidate.{i}.particles = {}", c.particles);
        if let Some(sd) = &c.result {
            let _ = writeln!(s, "candidate.{i}.sigma_delta = {}", fmt_f64(sd.sigma_delta));
            let _ = writeln!(s, "candidate.{i}.sd_r = {}", fmt_f64(sd.sd_r));
            let _ = writeln!(s, "candidate.{i}.mean_seconds = {}", fmt_f64(sd.mean_seconds));
            let _ = writeln!(s, "candidate.{i}.reps = {}", sd.reps);
            let _ = writeln!(s, "candidate.{i}.excluded = {}", sd.excluded);
            let _ = writeln!(s, "candidate.{i}.lag1 = {}", fmt_f64(sd.lag1));
        }
        if let Some(f) = &c.failure {
            let _ = writeln!(s, "candidate.{i}.failure = {f}");
        }
    }
    s
}

/// Parses `key = value` report text back into pairs.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
