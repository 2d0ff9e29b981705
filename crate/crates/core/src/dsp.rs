//! Offline preprocessing for the feature-based baselines: decimation to half
//! rate, re-referencing against the reference electrode, a 50 Hz notch and a
//! Butterworth bandpass, all applied zero-phase.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Montage, Trial};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Shortest record `decimate_by_2` accepts.
pub const MIN_DECIMATE_LEN: usize = 64;
const DECIMATE_ORDER: usize = 8;
const DECIMATE_CUTOFF: f64 = 0.8;

/// Second-order section with a0 normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    pub const IDENTITY: Biquad = Biquad {
        b0: 1.0,
        b1: 0.0,
        b2: 0.0,
        a1: 0.0,
        a2: 0.0,
    };

    /// Poles strictly inside the unit circle (stability triangle).
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    /// Direct form II transposed, state carried in `z`.
    #[inline]
    fn run(&self, x: &mut [f64], z: &mut [f64; 2]) {
        let Biquad { b0, b1, b2, a1, a2 } = *self;
        let [mut z1, mut z2] = *z;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
        *z = [z1, z2];
    }

    /// Filter state at sample 0 for an input that has been the steady
    /// signal `model` forever.
    fn steady_state(&self, model: &SteadyInput) -> [f64; 2] {
        let out = model.through(self);
        let (x1, x2) = (model.at(-1.0), model.at(-2.0));
        let (y1, y2) = (out.at(-1.0), out.at(-2.0));
        [
            self.b1 * x1 - self.a1 * y1 + self.b2 * x2 - self.a2 * y2,
            self.b2 * x1 - self.a2 * y1,
        ]
    }
}

/// DC level plus an optional sinusoid `Re(phasor · e^{iωn})`.
#[derive(Debug, Clone, Copy)]
struct SteadyInput {
    level: f64,
    tone: Option<(f64, Complex64)>,
}

impl SteadyInput {
    fn at(&self, n: f64) -> f64 {
        self.level
            + self
                .tone
                .map_or(0.0, |(w, p)| (p * Complex64::from_polar(1.0, w * n)).re)
    }

    fn through(&self, s: &Biquad) -> SteadyInput {
        SteadyInput {
            level: self.level * s.dc_gain(),
            tone: self
                .tone
                .map(|(w, p)| (w, p * s.response(Complex64::from_polar(1.0, -w)))),
        }
    }

    /// Least-squares fit of `c + a·cos(ωn) + b·sin(ωn)` over `x`.
    fn fit(x: &[f64], w: f64) -> SteadyInput {
        let mut g = [[0.0; 3]; 3];
        let mut r = [0.0; 3];
        for (n, &v) in x.iter().enumerate() {
            let basis = [1.0, (w * n as f64).cos(), (w * n as f64).sin()];
            for i in 0..3 {
                r[i] += basis[i] * v;
                for j in 0..3 {
                    g[i][j] += basis[i] * basis[j];
                }
            }
        }
        let [c, a, b] = solve3(g, r);
        SteadyInput {
            level: c,
            tone: Some((w, Complex64::new(a, -b))),
        }
    }
}

/// Gaussian elimination with partial pivoting on a 3×3 system.
fn solve3(mut g: [[f64; 3]; 3], mut r: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&a, &b| g[a][col].abs().total_cmp(&g[b][col].abs()))
            .unwrap();
        g.swap(col, piv);
        r.swap(col, piv);
        if g[col][col].abs() < 1e-300 {
            continue;
        }
        for row in (col + 1)..3 {
            let f = g[row][col] / g[col][col];
            for k in col..3 {
                g[row][k] -= f * g[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut out = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = ((row + 1)..3).map(|k| g[row][k] * out[k]).sum();
        out[row] = if g[row][row].abs() < 1e-300 {
            0.0
        } else {
            (r[row] - tail) / g[row][row]
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    /// Frequency (radians/sample) the cascade is tuned to reject; zero-phase
    /// passes then start from the fitted sinusoidal steady state instead of
    /// padding the record.
    #[serde(default)]
    pub reject_omega: Option<f64>,
}

impl BiquadCascade {
    pub fn identity() -> Self {
        BiquadCascade {
            sections: vec![Biquad::IDENTITY],
            reject_omega: None,
        }
    }

    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    /// Complex frequency response at `f` Hz.
    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        self.sections
            .iter()
            .map(|s| s.response(z_inv))
            .product()
    }

    /// Causal single pass over `x` starting from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y, &mut [0.0; 2]);
        }
        y
    }

    /// Causal pass with every section starting from the steady state of
    /// `model`.
    fn filter_steady(&self, y: &mut [f64], model: SteadyInput) {
        let mut model = model;
        for s in &self.sections {
            let mut z = s.steady_state(&model);
            s.run(y, &mut z);
            model = model.through(s);
        }
    }

    fn steady_model(&self, y: &[f64]) -> SteadyInput {
        match self.reject_omega {
            Some(w) => SteadyInput::fit(y, w),
            None => SteadyInput {
                level: y.first().copied().unwrap_or(0.0),
                tone: None,
            },
        }
    }

    fn check_stable(self) -> Result<Self> {
        if self.is_stable() {
            Ok(self)
        } else {
            Err(Error::Numerical("designed filter has a pole on or outside the unit circle".into()))
        }
    }
}

fn check_band_edge(f: f64, fs: f64, what: &str) -> Result<()> {
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::Config(format!("invalid sample rate {fs}")));
    }
    if !(f > 0.0 && f < fs / 2.0) {
        return Err(Error::Config(format!(
            "{what} {f} Hz must lie strictly between 0 and Nyquist {} Hz",
            fs / 2.0
        )));
    }
    Ok(())
}

/// Second-order notch centred on `f0` with quality factor `q`.
pub fn design_notch(f0: f64, fs: f64, q: f64) -> Result<BiquadCascade> {
    check_band_edge(f0, fs, "notch frequency")?;
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Config(format!("notch quality factor {q} must be positive")));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let c = -2.0 * w0.cos();
    BiquadCascade {
        sections: vec![Biquad {
            b0: 1.0 / a0,
            b1: c / a0,
            b2: 1.0 / a0,
            a1: c / a0,
            a2: (1.0 - alpha) / a0,
        }],
        reject_omega: Some(w0),
    }
    .check_stable()
}

/// Analog Butterworth prototype poles with non-negative imaginary part.
fn butterworth_upper_poles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
        .filter(|p| p.im >= -1e-12)
        .collect()
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + s) / (k - s)
}

/// Section with the conjugate pole pair around `pole` (or a real pair).
fn section_from_poles(p1: Complex64, p2: Complex64, b: [f64; 3]) -> Biquad {
    let sum = p1 + p2;
    let prod = p1 * p2;
    Biquad {
        b0: b[0],
        b1: b[1],
        b2: b[2],
        a1: -sum.re,
        a2: prod.re,
    }
}

/// Butterworth lowpass of even `order`, cutoff `fc`.
pub fn design_lowpass(fc: f64, order: usize, fs: f64) -> Result<BiquadCascade> {
    check_band_edge(fc, fs, "cutoff")?;
    if order == 0 || order % 2 != 0 {
        return Err(Error::Config(format!("lowpass order {order} must be even and positive")));
    }
    let wc = prewarp(fc, fs);
    let mut sections = Vec::with_capacity(order / 2);
    for p in butterworth_upper_poles(order) {
        let z = bilinear(p * wc, fs);
        let mut s = section_from_poles(z, z.conj(), [1.0, 2.0, 1.0]);
        let g = s.dc_gain();
        s.b0 /= g;
        s.b1 /= g;
        s.b2 /= g;
        sections.push(s);
    }
    BiquadCascade {
        sections,
        reject_omega: None,
    }
    .check_stable()
}

/// Butterworth bandpass between `lo` and `hi` Hz. `order` is the order of
/// the whole bandpass (twice the lowpass prototype order), so order 4 gives
/// two sections.
pub fn design_bandpass(lo: f64, hi: f64, order: usize, fs: f64) -> Result<BiquadCascade> {
    check_band_edge(lo, fs, "lower band edge")?;
    check_band_edge(hi, fs, "upper band edge")?;
    if lo >= hi {
        return Err(Error::Config(format!("band {lo}..{hi} Hz is empty")));
    }
    if order == 0 || order % 2 != 0 {
        return Err(Error::Config(format!("bandpass order {order} must be even and positive")));
    }
    let proto = order / 2;
    let w_lo = prewarp(lo, fs);
    let w_hi = prewarp(hi, fs);
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // Each prototype pole p maps to the roots of s² − p·bw·s + w0² = 0.
    let mut poles: Vec<(Complex64, Complex64)> = Vec::new();
    for p in butterworth_upper_poles(proto) {
        let half = p * bw / 2.0;
        let disc = (half * half - w0_sq).sqrt();
        let (s1, s2) = (half + disc, half - disc);
        if p.im.abs() < 1e-12 {
            // Real prototype pole: its two images are already a conjugate
            // (or real) pair.
            poles.push((bilinear(s1, fs), bilinear(s2, fs)));
        } else {
            let (z1, z2) = (bilinear(s1, fs), bilinear(s2, fs));
            poles.push((z1, z1.conj()));
            poles.push((z2, z2.conj()));
        }
    }
    let mut sections: Vec<Biquad> = poles
        .into_iter()
        .map(|(a, b)| section_from_poles(a, b, [1.0, 0.0, -1.0]))
        .collect();

    // Unit gain at the geometric centre of the prewarped band.
    let centre = fs / PI * (w0_sq.sqrt() / (2.0 * fs)).atan();
    let cascade = BiquadCascade {
        sections: sections.clone(),
        reject_omega: None,
    };
    let g = cascade.response(centre, fs).norm();
    let per_section = g.powf(1.0 / sections.len() as f64);
    for s in &mut sections {
        s.b0 /= per_section;
        s.b1 /= per_section;
        s.b2 /= per_section;
    }
    BiquadCascade {
        sections,
        reject_omega: None,
    }
    .check_stable()
}

/// Zero-phase forward-backward filtering of every row of `x`.
///
/// Rows are extended at both ends by mirror reflection (3 × order samples,
/// bounded by the row length) and each pass starts from the steady state of
/// its first sample; the padding is trimmed afterwards. Cascades tuned to a
/// rejection frequency skip the padding: each pass starts from the steady
/// state of the least-squares DC-plus-sinusoid fit of its input, which keeps
/// a narrow notch from ringing at the record edges.
pub fn filtfilt(f: &BiquadCascade, x: &Matrix) -> Result<Matrix> {
    let min_len = 3 * f.order();
    if x.cols() < min_len.max(2) {
        return Err(Error::Shape(format!(
            "filtfilt needs at least {} samples per row, got {}",
            min_len.max(2),
            x.cols()
        )));
    }
    let pad = if f.reject_omega.is_some() {
        0
    } else {
        min_len.min(x.cols() - 1)
    };
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let y = filtfilt_row(f, x.row(r), pad);
        out.row_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}

fn filtfilt_row(f: &BiquadCascade, x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|k| x[k]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|k| x[n - 1 - k]));

    let model = f.steady_model(&ext);
    f.filter_steady(&mut ext, model);
    ext.reverse();
    let model = f.steady_model(&ext);
    f.filter_steady(&mut ext, model);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Anti-aliased halving of the sample rate.
pub fn decimate_by_2(x: &Matrix, fs: f64) -> Result<(Matrix, f64)> {
    if x.cols() < MIN_DECIMATE_LEN {
        return Err(Error::Shape(format!(
            "decimation needs at least {MIN_DECIMATE_LEN} samples, got {}",
            x.cols()
        )));
    }
    let new_fs = fs / 2.0;
    let lowpass = design_lowpass(DECIMATE_CUTOFF * new_fs / 2.0, DECIMATE_ORDER, fs)?;
    let smooth = filtfilt(&lowpass, x)?;
    let out_len = x.cols().div_ceil(2);
    let mut out = Matrix::zeros(x.rows(), out_len);
    for r in 0..x.rows() {
        for (o, &v) in out.row_mut(r).iter_mut().zip(smooth.row(r).iter().step_by(2)) {
            *o = v;
        }
    }
    Ok((out, new_fs))
}

/// Subtracts row `reference_row` from every other row and drops it.
pub fn rereference(x: &Matrix, reference_row: usize) -> Result<Matrix> {
    if reference_row >= x.rows() {
        return Err(Error::Shape(format!(
            "reference row {reference_row} out of range for {} rows",
            x.rows()
        )));
    }
    let reference = x.row(reference_row);
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .filter(|&r| r != reference_row)
        .map(|r| x.row(r).iter().zip(reference).map(|(a, b)| a - b).collect())
        .collect();
    let mut out = Matrix::from_rows(&rows)?;
    if rows.is_empty() {
        out = Matrix::zeros(0, x.cols());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub notch_hz: f64,
    pub notch_q: f64,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub band_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            notch_hz: 50.0,
            notch_q: 30.0,
            band_lo_hz: 9.0,
            band_hi_hz: 100.0,
            band_order: 4,
        }
    }
}

/// Filters designed once for a given output rate.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    cfg: PreprocessConfig,
    out_fs: f64,
    notch: Option<BiquadCascade>,
    bandpass: BiquadCascade,
}

impl Preprocessor {
    /// `fs` is the raw rate; filters run at `fs / 2`.
    pub fn new(cfg: &PreprocessConfig, fs: f64) -> Result<Self> {
        let out_fs = fs / 2.0;
        let notch = if cfg.notch_hz > 0.0 {
            Some(design_notch(cfg.notch_hz, out_fs, cfg.notch_q).map_err(|e| e.in_stage("notch"))?)
        } else {
            None
        };
        let bandpass = design_bandpass(cfg.band_lo_hz, cfg.band_hi_hz, cfg.band_order, out_fs)
            .map_err(|e| e.in_stage("bandpass"))?;
        Ok(Preprocessor {
            cfg: cfg.clone(),
            out_fs,
            notch,
            bandpass,
        })
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.cfg
    }

    pub fn output_rate(&self) -> f64 {
        self.out_fs
    }

    /// decimate → re-reference → notch → bandpass.
    pub fn apply(&self, t: &Trial) -> Result<Trial> {
        let reference = t.reference.as_ref().ok_or_else(|| {
            Error::Config("trial carries no reference channel to re-reference against".into())
                .in_stage("rereference")
        })?;
        let stacked = Trial {
            reference: Some(reference.clone()),
            ..t.clone()
        }
        .stacked();
        let (x, fs) =
            decimate_by_2(&stacked, t.sample_rate_hz).map_err(|e| e.in_stage("decimate"))?;
        if (fs - self.out_fs).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "preprocessor built for {} Hz input, trial is at {} Hz",
                2.0 * self.out_fs,
                t.sample_rate_hz
            )));
        }
        let mut x = rereference(&x, x.rows() - 1).map_err(|e| e.in_stage("rereference"))?;
        if let Some(notch) = &self.notch {
            x = filtfilt(notch, &x).map_err(|e| e.in_stage("notch"))?;
        }
        x = filtfilt(&self.bandpass, &x).map_err(|e| e.in_stage("bandpass"))?;
        Ok(Trial {
            subject_id: t.subject_id.clone(),
            label: t.label,
            samples: x,
            sample_rate_hz: fs,
            reference: None,
        })
    }
}

pub fn preprocess_trial(t: &Trial, montage: &Montage, cfg: &PreprocessConfig) -> Result<Trial> {
    if montage.reference.is_none() && t.reference.is_none() {
        return Err(Error::Config("montage names no reference electrode".into()));
    }
    Preprocessor::new(cfg, t.sample_rate_hz)?.apply(t)
}

pub fn preprocess_dataset(ds: &Dataset, cfg: &PreprocessConfig) -> Result<Dataset> {
    let pre = Preprocessor::new(cfg, ds.montage.sample_rate_hz)?;
    let trials = ds
        .trials
        .par_iter()
        .map(|t| pre.apply(t))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(ds.montage.referenced_at(pre.output_rate()), trials)
}
