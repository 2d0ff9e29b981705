//! Baseline classifiers: LDA and one-vs-rest SVM on tangent-space feature
//! vectors, MDM on covariance matrices.
//!
//! Ties are broken towards the lowest class index everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    geometric_mean, riemann_distance, sym_inverse, SpdMatrix, DEFAULT_MEAN_MAX_ITER,
    DEFAULT_MEAN_TOL,
};
use crate::linalg::{dot, Matrix};

pub const CLASSIC_SCHEMA: &str = "classic-v1";
pub const DEFAULT_SVM_C: f64 = 1.0;
pub const DEFAULT_SVM_TOL: f64 = 1e-3;
const SINGULAR_REL: f64 = 1e-12;
const MIN_CURVATURE: f64 = 1e-12;

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the first minimum.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Number of classes implied by `ys`, each of which must appear at least
/// `min_count` times.
fn class_count(ys: &[usize], n: usize, min_count: usize) -> Result<usize> {
    if ys.len() != n {
        return Err(Error::Shape(format!("{n} samples but {} labels", ys.len())));
    }
    let k = ys.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &y in ys {
        counts[y] += 1;
    }
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt < min_count {
            return Err(Error::Config(format!(
                "class {c} has {cnt} samples, need at least {min_count}"
            )));
        }
    }
    Ok(k)
}

fn feature_dim(xs: &[Vec<f64>]) -> Result<usize> {
    let d = xs.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::Shape("empty feature vectors".into()));
    }
    if let Some(bad) = xs.iter().position(|x| x.len() != d) {
        return Err(Error::Shape(format!(
            "feature vector {bad} has length {}, expected {d}",
            xs[bad].len()
        )));
    }
    Ok(d)
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::Shape(format!(
            "feature vector has length {}, model expects {expected}",
            x.len()
        )));
    }
    Ok(())
}

/// Per-feature z-scoring; constant features are left unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Result<Self> {
        let d = feature_dim(xs)?;
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub class_means: Vec<Vec<f64>>,
    pub shared_covariance_inverse: Matrix,
    pub class_priors: Vec<f64>,
    pub ridge: f64,
}

/// Fits shared-covariance LDA. `ridge = None` picks `1e-6·tr(Σ)/d`.
pub fn lda_train(xs: &[Vec<f64>], ys: &[usize], ridge: Option<f64>) -> Result<LdaModel> {
    let d = feature_dim(xs)?;
    let k = class_count(ys, xs.len(), 2)?;
    if k < 2 {
        return Err(Error::Config("LDA needs at least 2 classes".into()));
    }
    let mut counts = vec![0usize; k];
    let mut means = vec![vec![0.0; d]; k];
    for (x, &y) in xs.iter().zip(ys) {
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let mut cov = Matrix::zeros(d, d);
    for (x, &y) in xs.iter().zip(ys) {
        let r: Vec<f64> = x.iter().zip(&means[y]).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += r[i] * r[j];
            }
        }
    }
    let dof = (xs.len() - k) as f64;
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= dof;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let ridge = ridge.unwrap_or(1e-6 * cov.trace() / d as f64);
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge {ridge} must be non-negative")));
    }
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let inv = sym_inverse(&cov, SINGULAR_REL).map_err(|e| {
        Error::Numerical(format!("pooled covariance is singular ({e}); use ridge > 0"))
    })?;
    let n = xs.len() as f64;
    Ok(LdaModel {
        class_means: means,
        shared_covariance_inverse: inv,
        class_priors: counts.iter().map(|&c| c as f64 / n).collect(),
        ridge,
    })
}

impl LdaModel {
    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn discriminants(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.shared_covariance_inverse.rows(), x)?;
        Ok(self
            .class_means
            .iter()
            .zip(&self.class_priors)
            .map(|(mu, &p)| {
                let w = self.shared_covariance_inverse.matvec(mu);
                dot(x, &w) - 0.5 * dot(mu, &w) + p.ln()
            })
            .collect())
    }
}

/// Label and posterior probabilities.
pub fn lda_classify(m: &LdaModel, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    let g = m.discriminants(x)?;
    let top = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = g.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok((argmax(&g), e.into_iter().map(|v| v / s).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdmModel {
    pub class_means: Vec<SpdMatrix>,
}

pub fn mdm_train(cs: &[SpdMatrix], ys: &[usize]) -> Result<MdmModel> {
    let k = class_count(ys, cs.len(), 1)?;
    let class_means = (0..k)
        .map(|c| {
            let members: Vec<SpdMatrix> = cs
                .iter()
                .zip(ys)
                .filter(|(_, &y)| y == c)
                .map(|(m, _)| m.clone())
                .collect();
            geometric_mean(&members, DEFAULT_MEAN_TOL, DEFAULT_MEAN_MAX_ITER)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MdmModel { class_means })
}

/// Label and the distance to every class mean.
pub fn mdm_classify(m: &MdmModel, c: &SpdMatrix) -> Result<(usize, Vec<f64>)> {
    let d = m
        .class_means
        .iter()
        .map(|g| riemann_distance(c, g))
        .collect::<Result<Vec<_>>>()?;
    Ok((argmin(&d), d))
}

/// Kernel as requested; a Gaussian without `gamma` is resolved from the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Linear,
    Gaussian { gamma: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Gaussian { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Gaussian { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

/// One binary machine: `f(x) = Σ αᵢ yᵢ K(sᵢ, x) + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMachine {
    pub support_vectors: Vec<Vec<f64>>,
    /// Dual coefficients αᵢ in [0, c].
    pub alphas: Vec<f64>,
    /// ±1 targets of the support vectors.
    pub targets: Vec<f64>,
    pub bias: f64,
    /// Maximal KKT violation at the end of training.
    pub kkt_residual: f64,
    pub updates: usize,
}

impl BinaryMachine {
    pub fn decision(&self, kernel: &Kernel, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.alphas)
            .zip(&self.targets)
            .map(|((s, a), y)| a * y * kernel.eval(s, x))
            .sum::<f64>()
            + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c: f64,
    pub tol: f64,
    pub dim: usize,
    /// Machine k separates class k from the rest.
    pub machines: Vec<BinaryMachine>,
}

/// `1 / (d · mean per-feature variance)`.
pub fn default_gamma(xs: &[Vec<f64>]) -> Result<f64> {
    let d = feature_dim(xs)?;
    let st = Standardizer::fit(xs)?;
    let mean_var = xs
        .iter()
        .map(|x| {
            x.iter()
                .zip(&st.mean)
                .map(|(v, m)| (v - m).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (xs.len() * d) as f64;
    if !(mean_var > 0.0) {
        return Err(Error::Numerical("features have zero variance".into()));
    }
    Ok(1.0 / (d as f64 * mean_var))
}

pub fn svm_train(
    xs: &[Vec<f64>],
    ys: &[usize],
    kernel: KernelSpec,
    c: f64,
    tol: f64,
) -> Result<SvmModel> {
    let dim = feature_dim(xs)?;
    let k = class_count(ys, xs.len(), 1)?;
    if k < 2 {
        return Err(Error::Config("SVM needs at least 2 classes".into()));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("SVM c = {c} must be positive")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("SVM tolerance {tol} must be positive")));
    }
    let kernel = match kernel {
        KernelSpec::Linear => Kernel::Linear,
        KernelSpec::Gaussian { gamma: Some(g) } if g > 0.0 => Kernel::Gaussian { gamma: g },
        KernelSpec::Gaussian { gamma: Some(g) } => {
            return Err(Error::Config(format!("gamma {g} must be positive")))
        }
        KernelSpec::Gaussian { gamma: None } => Kernel::Gaussian {
            gamma: default_gamma(xs)?,
        },
    };
    let n = xs.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&xs[i], &xs[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let machines = (0..k)
        .map(|cls| {
            let y: Vec<f64> = ys
                .iter()
                .map(|&l| if l == cls { 1.0 } else { -1.0 })
                .collect();
            smo(&gram, &y, c, tol)
                .map(|(alpha, bias, kkt, updates)| {
                    let sv: Vec<usize> = (0..n).filter(|&i| alpha[i] > 0.0).collect();
                    BinaryMachine {
                        support_vectors: sv.iter().map(|&i| xs[i].clone()).collect(),
                        alphas: sv.iter().map(|&i| alpha[i]).collect(),
                        targets: sv.iter().map(|&i| y[i]).collect(),
                        bias,
                        kkt_residual: kkt,
                        updates,
                    }
                })
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("class {cls} machine: {msg}")),
                    other => other,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SvmModel {
        kernel,
        c,
        tol,
        dim,
        machines,
    })
}

/// SMO with maximal-violating-pair working-set selection on
/// `min ½αᵀQα − Σα` subject to `0 ≤ α ≤ c`, `yᵀα = 0`.
/// Returns (α, bias, final KKT gap, pair updates).
fn smo(gram: &[f64], y: &[f64], c: f64, tol: f64) -> Result<(Vec<f64>, f64, f64, usize)> {
    let n = y.len();
    let max_updates = 10 * n * n;
    let mut alpha = vec![0.0; n];
    // Gradient of the dual objective: G = Qα − 1.
    let mut grad = vec![-1.0; n];
    let in_up = |a: f64, t: f64| (t > 0.0 && a < c) || (t < 0.0 && a > 0.0);
    let in_low = |a: f64, t: f64| (t > 0.0 && a > 0.0) || (t < 0.0 && a < c);
    let mut updates = 0;
    loop {
        let mut i = usize::MAX;
        let mut j = usize::MAX;
        let mut m_up = f64::NEG_INFINITY;
        let mut m_low = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > m_up {
                m_up = v;
                i = t;
            }
            if in_low(alpha[t], y[t]) && v < m_low {
                m_low = v;
                j = t;
            }
        }
        let gap = m_up - m_low;
        if i == usize::MAX || j == usize::MAX || gap <= tol {
            let gap = gap.max(0.0);
            let free: Vec<f64> = (0..n)
                .filter(|&t| alpha[t] > 0.0 && alpha[t] < c)
                .map(|t| -y[t] * grad[t])
                .collect();
            let bias = if free.is_empty() {
                (m_up.max(f64::MIN) + m_low.min(f64::MAX)) / 2.0
            } else {
                free.iter().sum::<f64>() / free.len() as f64
            };
            let bias = if bias.is_finite() { bias } else { 0.0 };
            return Ok((alpha, bias, if gap.is_finite() { gap } else { 0.0 }, updates));
        }
        if updates >= max_updates {
            return Err(Error::Numerical(format!(
                "SMO did not converge after {max_updates} pair updates (KKT gap {gap:.3e} > {tol:e})"
            )));
        }
        let kii = gram[i * n + i];
        let kjj = gram[j * n + j];
        let kij = gram[i * n + j];
        let eta = (kii + kjj - 2.0 * kij).max(MIN_CURVATURE);
        // Move α_i by y_i·t and α_j by −y_j·t, keeping yᵀα fixed.
        let mut t = gap / eta;
        t = t.min(if y[i] > 0.0 { c - alpha[i] } else { alpha[i] });
        t = t.min(if y[j] > 0.0 { alpha[j] } else { c - alpha[j] });
        alpha[i] = (alpha[i] + y[i] * t).clamp(0.0, c);
        alpha[j] = (alpha[j] - y[j] * t).clamp(0.0, c);
        for (k, g) in grad.iter_mut().enumerate() {
            *g += y[k] * t * (gram[k * n + i] - gram[k * n + j]);
        }
        updates += 1;
    }
}

/// Label and the one-vs-rest decision values.
pub fn svm_classify(m: &SvmModel, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    check_dim(m.dim, x)?;
    let d: Vec<f64> = m.machines.iter().map(|b| b.decision(&m.kernel, x)).collect();
    Ok((argmax(&d), d))
}

/// Any trained baseline, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClassicModel {
    Lda(LdaModel),
    Mdm(MdmModel),
    Svm(SvmModel),
}

#[derive(Serialize, Deserialize)]
struct Document {
    schema: String,
    /// Feature scaling applied before the model, if any.
    #[serde(default)]
    standardizer: Option<Standardizer>,
    model: ClassicModel,
}

pub fn save_classic(
    model: &ClassicModel,
    standardizer: Option<&Standardizer>,
    path: &Path,
) -> Result<()> {
    let doc = Document {
        schema: CLASSIC_SCHEMA.into(),
        standardizer: standardizer.cloned(),
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialize(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_classic(path: &Path) -> Result<(ClassicModel, Option<Standardizer>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Document = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    if doc.schema != CLASSIC_SCHEMA {
        return Err(Error::Integrity(format!(
            "{}: schema {} is not {CLASSIC_SCHEMA}",
            path.display(),
            doc.schema
        )));
    }
    check_loaded(&doc.model).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    Ok((doc.model, doc.standardizer))
}

fn check_loaded(model: &ClassicModel) -> Result<()> {
    let consistent = match model {
        ClassicModel::Lda(m) => {
            let d = m.shared_covariance_inverse.rows();
            m.shared_covariance_inverse.as_slice().len() == d * d
                && m.class_means.iter().all(|mu| mu.len() == d)
                && m.class_priors.len() == m.class_means.len()
        }
        ClassicModel::Mdm(m) => m
            .class_means
            .iter()
            .all(|g| g.dim() == m.class_means[0].dim()),
        ClassicModel::Svm(m) => m.machines.iter().all(|b| {
            b.alphas.len() == b.support_vectors.len()
                && b.targets.len() == b.alphas.len()
                && b.support_vectors.iter().all(|s| s.len() == m.dim)
        }),
    };
    if consistent {
        Ok(())
    } else {
        Err(Error::Integrity("model parameters have inconsistent shapes".into()))
    }
}
