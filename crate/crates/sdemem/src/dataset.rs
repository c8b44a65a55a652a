//! Dataset CSV (`subject,time,y`) and synthetic data generation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sdemem_core::sdesim::simulate_latent;
use sdemem_core::{Dataset, ModelSpec, Sdemem, Stream, Subject, Theta};

use crate::error::{AppError, Result};

pub const HEADER: [&str; 3] = ["subject", "time", "y"];

/// Parses a dataset; rows may come in any order. Times are divided by the
/// global maximum.
pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| AppError::Data(format!("header: {e}")))?
        .clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(AppError::Data(format!(
            "line 1: expected header `subject,time,y`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64, u64)>> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            AppError::Data(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let id = field(0);
        if id.is_empty() {
            return Err(AppError::Data(format!("line {line}: empty subject")));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| AppError::Data(format!("line {line}: `{}` is not a number", field(i))))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(AppError::Data(format!("line {line}: non-finite value")))
            }
        };
        let (t, y) = (num(1)?, num(2)?);
        if t < 0.0 {
            return Err(AppError::Data(format!("line {line}: negative time")));
        }
        if !rows.contains_key(id) {
            order.push(id.to_string());
        }
        rows.entry(id.to_string()).or_default().push((t, y, line));
    }
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut r = rows.remove(&id).unwrap_or_default();
        r.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = r.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(AppError::Data(format!(
                "line {}: duplicate time {} for subject `{id}` (first on line {})",
                w[1].2, w[1].0, w[0].2
            )));
        }
        subjects.push(Subject::new(
            id,
            r.iter().map(|x| x.0).collect(),
            r.iter().map(|x| x.1).collect(),
        ));
    }
    let mut ds = Dataset::new(subjects).map_err(|e| AppError::Data(e.to_string()))?;
    if ds.max_time() <= 0.0 {
        return Err(AppError::Data("every observation time is zero".into()));
    }
    ds.scale_times();
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    read_dataset(std::io::BufReader::new(file)).map_err(|e| match e {
        AppError::Data(msg) => AppError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes the dataset with its recorded (unscaled) times.
pub fn write_dataset<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let err = |e: csv::Error| AppError::Data(format!("writing dataset: {e}"));
    w.write_record(HEADER).map_err(err)?;
    for s in &ds.subjects {
        for (t, y) in s.raw_times.iter().zip(&s.obs) {
            w.write_record([s.id.as_str(), &crate::fmt_f64(*t), &crate::fmt_f64(*y)])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| AppError::Data(format!("writing dataset: {e}")))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    write_dataset(ds, std::io::BufWriter::new(file))
}

/// Synthetic design: `subjects` series observed every `hours` hours for
/// `days` days.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSpec {
    pub subjects: usize,
    pub hours: f64,
    pub days: f64,
}

impl SimSpec {
    pub fn observations(&self) -> usize {
        1 + (24.0 * self.days / self.hours).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(AppError::Config("sim_subjects must be at least 1".into()));
        }
        if !(self.hours > 0.0) || !self.hours.is_finite() {
            return Err(AppError::Config("sim_hours must be positive".into()));
        }
        if !(self.days >= 1.0) || !self.days.is_finite() {
            return Err(AppError::Config("sim_days must be at least 1".into()));
        }
        Ok(())
    }

    /// True if `hours` is one of the sampling intervals of the reference
    /// designs (1, 12 or 24).
    pub fn standard_interval(&self) -> bool {
        [1.0, 12.0, 24.0].contains(&self.hours)
    }
}

/// Checks a parameter vector for simulation: positive-scale parameters must
/// be positive, except the observation SD which may be zero.
pub fn check_sim_theta(model: &ModelSpec, theta: &Theta) -> Result<()> {
    for def in model.layout() {
        let v = theta.get(def);
        if !v.is_finite() {
            return Err(AppError::Config(format!("{} must be finite", def.name)));
        }
        let positive = def.transform == sdemem_core::model::Transform::Log;
        if def.name == "sigma" {
            if v < 0.0 {
                return Err(AppError::Config("sigma must be non-negative".into()));
            }
        } else if positive && v <= 0.0 {
            return Err(AppError::Config(format!("{} must be positive", def.name)));
        }
    }
    Ok(())
}

/// Draws random effects from their population distribution, simulates the
/// latent paths by Euler-Maruyama with 10 sub-steps per interval on the
/// scaled time axis and adds Gaussian observation noise. Times are recorded
/// in hours.
pub fn simulate(model: &ModelSpec, theta: &Theta, spec: &SimSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    check_sim_theta(model, theta)?;
    let n = spec.observations();
    let hours: Vec<f64> = (0..n).map(|i| i as f64 * spec.hours).collect();
    let max = hours[n - 1];
    let scaled: Vec<f64> = if max > 0.0 {
        hours.iter().map(|h| h / max).collect()
    } else {
        hours.clone()
    };
    let mut stream = Stream::new(seed);
    let width = spec.subjects.to_string().len();
    let mut subjects = Vec::with_capacity(spec.subjects);
    for m in 0..spec.subjects {
        let eta = model.re_sample(&theta.phi_eta, &mut stream);
        let x = simulate_latent(model, &theta.phi_x, &eta, &scaled, 10, &mut stream)?;
        let y: Vec<f64> = x.iter().map(|&xi| xi + theta.sigma * stream.normal()).collect();
        let mut s = Subject::new(format!("{:0width$}", m + 1), hours.clone(), y);
        s.times = scaled.clone();
        subjects.push(s);
    }
    let mut ds = Dataset::new(subjects)?;
    ds.scaled = true;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_unsorted_rows_and_scales() {
        let text = "subject,time,y\nb,32,3\na,0,1\na,16,2\na,32,3.5\nb,0,1\n";
        let ds = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(ds.num_subjects(), 2);
        assert_eq!(ds.subjects[0].id, "b");
        assert_eq!(ds.subjects[1].times, [0.0, 0.5, 1.0]);
        assert_eq!(ds.subjects[1].raw_times, [0.0, 16.0, 32.0]);
        assert!(ds.scaled);
    }

    #[test]
    fn reports_line_numbers() {
        let e = read_dataset("subject,time,y\na,0,1\na,1,x\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = read_dataset("subject,time,y\na,0,1\na,0,2\n".as_bytes()).unwrap_err();
        assert!(
            e.to_string().contains("line 3") && e.to_string().contains("duplicate"),
            "{e}"
        );
        let e = read_dataset("subject,time,y\n,0,1\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("empty subject"), "{e}");
        let e = read_dataset("subject,time,y\na,0\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(read_dataset("id,t,y\na,0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn observation_counts() {
        let spec = |h: f64, d: f64| SimSpec {
            subjects: 1,
            hours: h,
            days: d,
        };
        assert_eq!(spec(1.0, 19.0).observations(), 457);
        assert_eq!(spec(12.0, 19.0).observations(), 39);
        assert_eq!(spec(24.0, 19.0).observations(), 20);
    }
}
