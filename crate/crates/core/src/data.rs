//! Longitudinal observations, one series per subject.

use alloc::string::String;
use alloc::vec::Vec;

use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Observation times on the model time axis (scaled when the dataset is).
    pub times: Vec<f64>,
    pub obs: Vec<f64>,
    /// Observation times as originally recorded.
    pub raw_times: Vec<f64>,
}

impl Subject {
    pub fn new(id: impl Into<String>, times: Vec<f64>, obs: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            raw_times: times.clone(),
            times,
            obs,
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    /// Whether `times` were divided by the global maximum time.
    pub scaled: bool,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self, Error> {
        let ds = Self {
            subjects,
            scaled: false,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.subjects.is_empty() {
            return Err(Error::Config("dataset has no subjects".into()));
        }
        for s in &self.subjects {
            if s.is_empty() {
                return Err(Error::Config(alloc::format!("subject `{}` has no observations", s.id)));
            }
            if s.times.len() != s.obs.len() || s.raw_times.len() != s.obs.len() {
                return Err(Error::Config(alloc::format!(
                    "subject `{}` has mismatched times and observations",
                    s.id
                )));
            }
            if s.times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(alloc::format!(
                    "subject `{}` times are not strictly increasing",
                    s.id
                )));
            }
            if s.times.iter().chain(&s.obs).any(|v| !v.is_finite()) {
                return Err(Error::Config(alloc::format!(
                    "subject `{}` has non-finite values",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn num_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn max_time(&self) -> f64 {
        self.subjects
            .iter()
            .flat_map(|s| s.raw_times.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Divides every time by the global maximum raw time.
    pub fn scale_times(&mut self) {
        let max = self.max_time();
        if max > 0.0 {
            for s in &mut self.subjects {
                s.times = s.raw_times.iter().map(|t| t / max).collect();
            }
        }
        self.scaled = true;
    }
}
