//! Synthetic multichannel SSVEP trials.
//!
//! Each channel carries the stimulus response (fundamental plus decaying
//! harmonics) scaled by a fixed occipital-dominant topography and delayed by
//! a fixed per-channel conduction latency. On top of that come common-mode
//! nuisances shared with the reference electrode (pink drift, 50 Hz line),
//! a 10 Hz alpha burst over the posterior channels, and independent sensor
//! noise on every electrode.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Montage, Trial, CLASS_FREQS_HZ, DEFAULT_DURATION_S, N_CLASSES};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

const PINK_COMPONENTS: usize = 16;
const PINK_LOW_HZ: f64 = 0.5;
const LINE_HZ: f64 = 50.0;
const ALPHA_HZ: f64 = 10.0;
const ALPHA_BURST_S: f64 = 1.0;
/// Seed of the named benchmark presets.
pub const BENCHMARK_SEED: u64 = 2024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectConfig {
    pub subject_id: String,
    pub trials_per_class: usize,
    pub gain: f64,
    pub phase_offset_rad: f64,
    pub noise_sigma: f64,
}

impl SubjectConfig {
    pub fn new(subject_id: &str, trials_per_class: usize) -> Self {
        SubjectConfig {
            subject_id: subject_id.to_string(),
            trials_per_class,
            gain: 1.0,
            phase_offset_rad: 0.0,
            noise_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects: Vec<SubjectConfig>,
    pub class_freqs_hz: Vec<f64>,
    pub harmonics: usize,
    pub harmonic_decay: f64,
    pub line_noise_amp: f64,
    pub pink_noise_amp: f64,
    pub alpha_burst_amp: f64,
    /// Log-normal spread of the per-trial common-mode nuisance level.
    #[serde(default)]
    pub nuisance_log_spread: f64,
    /// Uniform per-trial jitter of the response phase, in radians.
    #[serde(default)]
    pub phase_jitter_rad: f64,
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
}

fn default_duration() -> f64 {
    DEFAULT_DURATION_S
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: vec![SubjectConfig::new("S01", 100)],
            class_freqs_hz: CLASS_FREQS_HZ.to_vec(),
            harmonics: 3,
            harmonic_decay: 0.5,
            line_noise_amp: 0.0,
            pink_noise_amp: 0.0,
            alpha_burst_amp: 0.0,
            nuisance_log_spread: 0.0,
            phase_jitter_rad: 0.0,
            seed: 0,
            duration_s: DEFAULT_DURATION_S,
        }
    }
}

impl SynthConfig {
    /// Noise-free single-subject configuration.
    pub fn clean(trials_per_class: usize, seed: u64) -> Self {
        SynthConfig {
            subjects: vec![SubjectConfig {
                noise_sigma: 0.0,
                ..SubjectConfig::new("S01", trials_per_class)
            }],
            seed,
            ..SynthConfig::default()
        }
    }

    /// Single subject S01 under common-mode pink and line noise with a
    /// log-normal per-trial level, alpha bursts and phase jitter.
    pub fn moderate(trials_per_class: usize) -> Self {
        SynthConfig {
            line_noise_amp: 2.0,
            pink_noise_amp: 4.0,
            alpha_burst_amp: 1.0,
            nuisance_log_spread: 0.7,
            phase_jitter_rad: 0.3,
            seed: BENCHMARK_SEED,
            ..SynthConfig::default()
        }
        .with_subjects(1, trials_per_class)
    }

    /// Moderate noise over `n_subjects` subjects that differ in gain,
    /// response phase and sensor noise.
    pub fn cohort(n_subjects: usize, trials_per_class: usize) -> Self {
        SynthConfig::moderate(trials_per_class).with_subjects(n_subjects, trials_per_class)
    }

    fn with_subjects(mut self, n: usize, trials_per_class: usize) -> Self {
        const GAIN: [f64; 4] = [1.0, 0.8, 1.2, 0.9];
        const PHASE: [f64; 4] = [0.0, 0.6, 1.2, 1.8];
        const SIGMA: [f64; 4] = [1.0, 1.3, 0.8, 1.15];
        self.subjects = (0..n)
            .map(|i| SubjectConfig {
                gain: GAIN[i % 4],
                phase_offset_rad: PHASE[i % 4],
                noise_sigma: SIGMA[i % 4],
                ..SubjectConfig::new(&format!("S{:02}", i + 1), trials_per_class)
            })
            .collect();
        self
    }

    /// Named configuration: `clean`, `moderate` or `cohort`.
    pub fn preset(name: &str, trials_per_class: usize) -> Result<Self> {
        match name {
            "clean" => Ok(SynthConfig::clean(trials_per_class, BENCHMARK_SEED)),
            "moderate" => Ok(SynthConfig::moderate(trials_per_class)),
            "cohort" => Ok(SynthConfig::cohort(4, trials_per_class)),
            other => Err(Error::Config(format!(
                "unknown synthetic preset {other}; expected clean, moderate or cohort"
            ))),
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let nyquist = sample_rate_hz / 2.0;
        if self.subjects.is_empty() {
            return Err(Error::Config("no subjects configured".into()));
        }
        if self.class_freqs_hz.len() != N_CLASSES {
            return Err(Error::Config(format!(
                "expected {N_CLASSES} class frequencies, got {}",
                self.class_freqs_hz.len()
            )));
        }
        if self.harmonics == 0 {
            return Err(Error::Config("harmonics must be at least 1".into()));
        }
        if !(self.harmonic_decay > 0.0 && self.harmonic_decay <= 1.0) {
            return Err(Error::Config(format!(
                "harmonic decay {} outside (0, 1]",
                self.harmonic_decay
            )));
        }
        for (label, &f) in self.class_freqs_hz.iter().enumerate() {
            if !(f > 0.0) {
                return Err(Error::Config(format!("class {label} frequency {f} Hz")));
            }
            for h in 1..=self.harmonics {
                if f * h as f64 >= nyquist {
                    return Err(Error::Config(format!(
                        "class {label}: harmonic {h} of {f} Hz ({} Hz) reaches Nyquist {nyquist} Hz",
                        f * h as f64
                    )));
                }
            }
        }
        for amp in [
            self.line_noise_amp,
            self.pink_noise_amp,
            self.alpha_burst_amp,
            self.nuisance_log_spread,
            self.phase_jitter_rad,
        ] {
            if !(amp >= 0.0 && amp.is_finite()) {
                return Err(Error::Config(format!("noise amplitude {amp} must be ≥ 0")));
            }
        }
        for s in &self.subjects {
            if s.subject_id.is_empty() {
                return Err(Error::Config("empty subject id".into()));
            }
            if !(s.noise_sigma >= 0.0 && s.gain.is_finite()) {
                return Err(Error::Config(format!("subject {} parameters", s.subject_id)));
            }
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial weight of the stimulus response per electrode label.
pub fn topography_weight(label: &str) -> f64 {
    match label {
        "O1" | "O2" => 1.0,
        "Pz" => 0.8,
        "P3" | "P4" => 0.6,
        "P7" | "P8" => 0.4,
        _ => 0.0,
    }
}

/// Conduction delay of the stimulus response per electrode label (seconds).
pub const CHANNEL_LATENCY_S: [(&str, f64); 7] = [
    ("O1", 0.0),
    ("O2", 0.0),
    ("Pz", 0.006),
    ("P3", 0.010),
    ("P4", 0.010),
    ("P7", 0.016),
    ("P8", 0.016),
];

fn latency(label: &str) -> f64 {
    CHANNEL_LATENCY_S
        .iter()
        .find(|(l, _)| *l == label)
        .map_or(0.0, |&(_, t)| t)
}

pub fn synth_dataset(cfg: &SynthConfig, montage: &Montage) -> Result<Dataset> {
    montage.validate()?;
    cfg.validate(montage.sample_rate_hz)?;
    let fs = montage.sample_rate_hz;
    let n_samples = (cfg.duration_s * fs).round() as usize;
    if (n_samples as f64 - cfg.duration_s * fs).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{} s at {fs} Hz is not a whole number of samples",
            cfg.duration_s
        )));
    }

    let mut jobs = Vec::new();
    for (si, subject) in cfg.subjects.iter().enumerate() {
        for rep in 0..subject.trials_per_class {
            for label in 0..N_CLASSES {
                jobs.push((si, rep, label));
            }
        }
    }
    let trials = jobs
        .par_iter()
        .map(|&(si, rep, label)| {
            let mut r = rng::stream(cfg.seed, rng::mix(&[si as u64, rep as u64, label as u64]));
            synth_trial(cfg, montage, &cfg.subjects[si], label, n_samples, &mut r)
        })
        .collect();
    Dataset::new(montage.clone(), trials)
}

fn synth_trial(
    cfg: &SynthConfig,
    montage: &Montage,
    subject: &SubjectConfig,
    label: usize,
    n: usize,
    r: &mut rng::Rng,
) -> Trial {
    let fs = montage.sample_rate_hz;
    let nyquist = fs / 2.0;
    let f = cfg.class_freqs_hz[label];
    let t = |i: usize| i as f64 / fs;

    let jitter = if cfg.phase_jitter_rad > 0.0 {
        r.random_range(-cfg.phase_jitter_rad..=cfg.phase_jitter_rad)
    } else {
        0.0
    };
    let phase = subject.phase_offset_rad + jitter;

    // Common-mode nuisance shared by every electrode, reference included.
    let level = if cfg.nuisance_log_spread > 0.0 {
        let z: f64 = StandardNormal.sample(r);
        (cfg.nuisance_log_spread * z).exp()
    } else {
        1.0
    };
    let mut common = vec![0.0; n];
    if cfg.pink_noise_amp > 0.0 {
        let hi = 0.9 * nyquist;
        let ratio = (hi / PINK_LOW_HZ).ln() / (PINK_COMPONENTS - 1) as f64;
        for k in 0..PINK_COMPONENTS {
            let log_f = PINK_LOW_HZ.ln() + ratio * (k as f64 + r.random_range(-0.5..0.5));
            let fk = log_f.exp().min(hi);
            let amp = level * cfg.pink_noise_amp / fk;
            let ph = r.random_range(0.0..2.0 * PI);
            for (i, c) in common.iter_mut().enumerate() {
                *c += amp * (2.0 * PI * fk * t(i) + ph).sin();
            }
        }
    }
    if cfg.line_noise_amp > 0.0 {
        let amp = level * cfg.line_noise_amp;
        let ph = r.random_range(0.0..2.0 * PI);
        for (i, c) in common.iter_mut().enumerate() {
            *c += amp * (2.0 * PI * LINE_HZ * t(i) + ph).sin();
        }
    }

    // Alpha burst over the posterior channels, Hann envelope, random onset.
    let mut alpha = vec![0.0; n];
    if cfg.alpha_burst_amp > 0.0 {
        let len = ((ALPHA_BURST_S * fs) as usize).min(n);
        let onset = r.random_range(0..=n - len);
        let ph = r.random_range(0.0..2.0 * PI);
        for k in 0..len {
            let env = 0.5 - 0.5 * (2.0 * PI * k as f64 / len as f64).cos();
            let i = onset + k;
            alpha[i] = cfg.alpha_burst_amp * env * (2.0 * PI * ALPHA_HZ * t(i) + ph).sin();
        }
    }

    let mut samples = Matrix::zeros(montage.n_channels(), n);
    for (c, name) in montage.channel_names.iter().enumerate() {
        let w = topography_weight(name);
        let tau = latency(name);
        let row = samples.row_mut(c);
        if w != 0.0 {
            for h in 1..=cfg.harmonics {
                let amp = w * subject.gain * cfg.harmonic_decay.powi(h as i32 - 1);
                let omega = 2.0 * PI * h as f64 * f;
                for (i, v) in row.iter_mut().enumerate() {
                    *v += amp * (omega * (t(i) - tau) + phase).sin();
                }
            }
            for (v, a) in row.iter_mut().zip(&alpha) {
                *v += a;
            }
        }
        for (v, cm) in row.iter_mut().zip(&common) {
            *v += cm;
        }
        add_sensor_noise(row, subject.noise_sigma, r);
    }

    let reference = montage.reference.as_ref().map(|_| {
        let mut row = common.clone();
        add_sensor_noise(&mut row, subject.noise_sigma, r);
        quantize(&mut row);
        row
    });
    quantize(samples.as_mut_slice());

    Trial {
        subject_id: subject.subject_id.clone(),
        label,
        samples,
        sample_rate_hz: fs,
        reference,
    }
}

fn add_sensor_noise(row: &mut [f64], sigma: f64, r: &mut rng::Rng) {
    if sigma > 0.0 {
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(r);
            *v += sigma * z;
        }
    }
}

/// Archives store 32-bit samples; generated values sit on that grid so a
/// write/read cycle is exact.
fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::dft_magnitude;

    #[test]
    fn benchmark_sized_single_subject() {
        let cfg = SynthConfig::clean(100, 7);
        let ds = synth_dataset(&cfg, &Montage::default()).unwrap();
        assert_eq!(ds.len(), 400);
        for t in &ds.trials {
            assert_eq!((t.n_channels(), t.n_samples()), (7, 1500));
        }
        for label in 0..4 {
            assert_eq!(ds.trials.iter().filter(|t| t.label == label).count(), 100);
        }
    }

    #[test]
    fn noise_free_fundamental_is_pure_sinusoid() {
        let cfg = SynthConfig {
            harmonics: 1,
            ..SynthConfig::clean(1, 3)
        };
        let montage = Montage::default();
        let ds = synth_dataset(&cfg, &montage).unwrap();
        let trial = ds.trials.iter().find(|t| t.label == 0).unwrap();
        for (c, name) in montage.channel_names.iter().enumerate() {
            let w = topography_weight(name);
            let tau = latency(name);
            for (i, &v) in trial.samples.row(c).iter().enumerate() {
                let expect = w * (2.0 * PI * 10.0 * (i as f64 / 500.0 - tau)).sin();
                assert!((v - expect).abs() < 1e-6, "channel {name} sample {i}");
            }
        }
        // Reference carries no stimulus response.
        assert!(trial.reference.as_ref().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fifteen_hz_trial_peaks_at_fifteen_on_o1() {
        let cfg = SynthConfig {
            subjects: vec![SubjectConfig {
                noise_sigma: 0.5,
                ..SubjectConfig::new("S01", 3)
            }],
            line_noise_amp: 1.0,
            pink_noise_amp: 1.0,
            alpha_burst_amp: 0.5,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&cfg, &Montage::default()).unwrap();
        let o1 = 5;
        for t in ds.trials.iter().filter(|t| t.label == 2) {
            let mag = dft_magnitude(t.samples.row(o1));
            let df: f64 = 500.0 / 1500.0;
            let lo = (5.0 / df) as usize;
            let hi = (40.0 / df) as usize;
            let peak = (lo..=hi).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
            assert_eq!(peak, (15.0 / df).round() as usize);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let mut cfg = SynthConfig::default();
        cfg.subjects[0].trials_per_class = 2;
        cfg.pink_noise_amp = 1.0;
        cfg.alpha_burst_amp = 1.0;
        let m = Montage::default();
        let a = synth_dataset(&cfg, &m).unwrap();
        let b = synth_dataset(&cfg, &m).unwrap();
        assert_eq!(a, b);
        cfg.seed = 1;
        let c = synth_dataset(&cfg, &m).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn harmonic_above_nyquist_is_named() {
        let cfg = SynthConfig {
            harmonics: 9,
            ..SynthConfig::clean(1, 0)
        };
        let err = synth_dataset(&cfg, &Montage::default()).unwrap_err().to_string();
        assert!(err.contains("harmonic 9 of 30 Hz"), "{err}");
    }
}
