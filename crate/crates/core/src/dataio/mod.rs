//! Trial and dataset model, the directory archive format, and the synthetic
//! SSVEP generator.

mod archive;
mod synth;

pub use archive::{read_archive, write_archive, BLOB_MAGIC, MANIFEST_FILE};
pub use synth::{synth_dataset, topography_weight, SubjectConfig, SynthConfig, BENCHMARK_SEED, CHANNEL_LATENCY_S};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Stimulus flicker frequencies, indexed by class label.
pub const CLASS_FREQS_HZ: [f64; 4] = [10.0, 12.0, 15.0, 30.0];
pub const N_CLASSES: usize = 4;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 500.0;
pub const DEFAULT_DURATION_S: f64 = 3.0;
pub const DEFAULT_CHANNELS: [&str; 7] = ["P7", "P3", "Pz", "P4", "P8", "O1", "O2"];
pub const DEFAULT_REFERENCE: &str = "Fz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    pub channel_names: Vec<String>,
    pub sample_rate_hz: f64,
    /// Label of the reference electrode carried alongside the channels.
    #[serde(default)]
    pub reference: Option<String>,
}

impl Default for Montage {
    fn default() -> Self {
        Montage {
            channel_names: DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect(),
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            reference: Some(DEFAULT_REFERENCE.to_string()),
        }
    }
}

impl Montage {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_names.is_empty() {
            return Err(Error::Config("montage has no channels".into()));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "invalid sample rate {}",
                self.sample_rate_hz
            )));
        }
        for (i, name) in self.channel_names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Config(format!("channel {i} has an empty label")));
            }
            if self.channel_names[..i].contains(name) {
                return Err(Error::Config(format!("duplicate channel label {name}")));
            }
        }
        if let Some(r) = &self.reference {
            if self.channel_names.contains(r) {
                return Err(Error::Config(format!(
                    "reference {r} is also listed as a channel"
                )));
            }
        }
        Ok(())
    }

    /// Same montage at another sample rate, reference consumed.
    pub fn referenced_at(&self, sample_rate_hz: f64) -> Montage {
        Montage {
            channel_names: self.channel_names.clone(),
            sample_rate_hz,
            reference: None,
        }
    }
}

/// One recording: channels × time samples plus the optional reference row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub subject_id: String,
    pub label: usize,
    pub samples: Matrix,
    pub sample_rate_hz: f64,
    pub reference: Option<Vec<f64>>,
}

impl Trial {
    pub fn n_channels(&self) -> usize {
        self.samples.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.cols()
    }

    pub fn validate(&self, montage: &Montage) -> Result<()> {
        if self.label >= N_CLASSES {
            return Err(Error::Integrity(format!(
                "label {} outside 0..{N_CLASSES}",
                self.label
            )));
        }
        if self.samples.rows() != montage.n_channels() {
            return Err(Error::Integrity(format!(
                "trial has {} channels, montage has {}",
                self.samples.rows(),
                montage.n_channels()
            )));
        }
        if self.sample_rate_hz != montage.sample_rate_hz {
            return Err(Error::Integrity(format!(
                "trial rate {} Hz differs from montage rate {} Hz",
                self.sample_rate_hz, montage.sample_rate_hz
            )));
        }
        if !self.samples.is_finite() {
            return Err(Error::Integrity(format!(
                "trial of {} holds non-finite samples",
                self.subject_id
            )));
        }
        if let Some(r) = &self.reference {
            if r.len() != self.n_samples() {
                return Err(Error::Integrity("reference row length differs".into()));
            }
        }
        Ok(())
    }

    /// Channels with the reference appended as the last row, when present.
    pub fn stacked(&self) -> Matrix {
        match &self.reference {
            None => self.samples.clone(),
            Some(r) => {
                let mut data = self.samples.as_slice().to_vec();
                data.extend_from_slice(r);
                Matrix::from_vec(self.n_channels() + 1, self.n_samples(), data)
                    .expect("reference length checked")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub montage: Montage,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn new(montage: Montage, trials: Vec<Trial>) -> Result<Self> {
        let ds = Dataset { montage, trials };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.montage.validate()?;
        let mut len = None;
        for t in &self.trials {
            t.validate(&self.montage)?;
            if *len.get_or_insert(t.n_samples()) != t.n_samples() {
                return Err(Error::Integrity("trials differ in length".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.trials {
            if !out.contains(&t.subject_id) {
                out.push(t.subject_id.clone());
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            montage: self.montage.clone(),
            trials: indices.iter().map(|&i| self.trials[i].clone()).collect(),
        }
    }

    pub fn indices_of_subject(&self, subject: &str) -> Vec<usize> {
        (0..self.trials.len())
            .filter(|&i| self.trials[i].subject_id == subject)
            .collect()
    }
}
