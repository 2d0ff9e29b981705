//! Experiment orchestration: stratified k-fold plans, the single-subject,
//! per-subject, pooled and unseen-subject designs, grid search over a
//! validation split, confusion matrices and report emission.
//!
//! Everything fitted from data (tangent reference, feature scaling, network
//! weights and batch-norm statistics) is fitted on the training indices of a
//! fold only. Folds may run concurrently; results are reduced in fold order.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::classic::{
    lda_classify, lda_train, mdm_classify, mdm_train, svm_classify, svm_train, KernelSpec,
    Standardizer, DEFAULT_SVM_C, DEFAULT_SVM_TOL,
};
use crate::dataio::{Dataset, CLASS_FREQS_HZ, N_CLASSES};
use crate::dsp::{preprocess_dataset, PreprocessConfig};
use crate::error::{Error, Result};
use crate::features::{
    geometric_mean, sample_covariance, SpdMatrix, TangentSpace, DEFAULT_MEAN_MAX_ITER,
    DEFAULT_MEAN_TOL, DEFAULT_SHRINKAGE,
};
use crate::linalg::Matrix;
use crate::models::{predict, train, Arch, ArchConfig, TrainConfig};
use crate::rng;

pub const DEFAULT_FOLDS: usize = 10;

/// Seeded stratified assignment of trials to folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Stratified split of trials with the given labels. Each class is shuffled
/// with its own stream and dealt round-robin, starting where the previous
/// class stopped so fold sizes stay balanced.
pub fn kfold_labels(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Config("fold count must be at least 1".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut assignments = vec![0; labels.len()];
    let mut offset = 0;
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Config(format!(
                "class {class} has {} trials, fewer than the {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, class as u64));
        for (pos, &i) in members.iter().enumerate() {
            assignments[i] = (offset + pos) % k;
        }
        offset = (offset + members.len()) % k;
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
    })
}

pub fn kfold_split(ds: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    kfold_labels(&ds.labels(), k, seed)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_predictions(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let mut m = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::Integrity(format!("label pair ({t}, {p}) outside 0..{k}")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.n_classes()).map(|i| self.counts[i][i]).sum();
        hits as f64 / self.total().max(1) as f64
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Classifier used by an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Net(Arch),
    SvmLinear,
    SvmGaussian,
    Lda,
    Mdm,
    /// Always predicts the given class; a chance-level reference.
    Constant(usize),
}

impl Method {
    fn uses_covariance(&self) -> bool {
        matches!(self, Method::SvmLinear | Method::SvmGaussian | Method::Lda | Method::Mdm)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svm-linear" => Ok(Method::SvmLinear),
            "svm-gaussian" => Ok(Method::SvmGaussian),
            "lda" => Ok(Method::Lda),
            "mdm" => Ok(Method::Mdm),
            _ => {
                if let Some(c) = s.strip_prefix("constant:") {
                    return c
                        .parse()
                        .map(Method::Constant)
                        .map_err(|_| Error::Config(format!("bad class in {s}")));
                }
                s.parse::<Arch>().map(Method::Net).map_err(|_| {
                    Error::Config(format!(
                        "unknown method {s}; expected cnn, deep-scu:N, rnn, lstm, gru, \
                         svm-linear, svm-gaussian, lda or mdm"
                    ))
                })
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Net(a) => write!(f, "{a}"),
            Method::SvmLinear => write!(f, "svm-linear"),
            Method::SvmGaussian => write!(f, "svm-gaussian"),
            Method::Lda => write!(f, "lda"),
            Method::Mdm => write!(f, "mdm"),
            Method::Constant(c) => write!(f, "constant:{c}"),
        }
    }
}

fn as_display<T: fmt::Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Every setting that influences an experiment's result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    #[serde(serialize_with = "as_display")]
    pub method: Method,
    /// `None` feeds the raw trials to the method.
    pub preprocess: Option<PreprocessConfig>,
    pub folds: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub svm_c: f64,
    pub svm_gamma: Option<f64>,
    pub svm_tol: f64,
    pub lda_ridge: Option<f64>,
    pub shrinkage: f64,
    /// Z-score tangent features with training-fold statistics.
    pub standardize: bool,
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        ExperimentConfig {
            method,
            preprocess: None,
            folds: DEFAULT_FOLDS,
            seed: 0,
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            svm_c: DEFAULT_SVM_C,
            svm_gamma: None,
            svm_tol: DEFAULT_SVM_TOL,
            lda_ridge: None,
            shrinkage: DEFAULT_SHRINKAGE,
            standardize: true,
        }
    }

    /// Sets one named hyperparameter, as used by grid axes.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{name} must be a whole number, got {value}")))
            }
        };
        match name {
            "lr" => self.train.lr = value,
            "lambda_l2" => self.train.lambda_l2 = value,
            "epochs" => self.train.epochs = count(value)?,
            "batch_size" => self.train.batch_size = count(value)?,
            "dropout_p" => {
                self.arch.scu.dropout_p = value;
                self.arch.recurrent.dropout_p = value;
            }
            "svm_c" => self.svm_c = value,
            "svm_gamma" => self.svm_gamma = Some(value),
            "lda_ridge" => self.lda_ridge = Some(value),
            "shrinkage" => self.shrinkage = value,
            _ => {
                return Err(Error::Config(format!(
                    "unknown hyperparameter {name}; expected lr, lambda_l2, epochs, batch_size, \
                     dropout_p, svm_c, svm_gamma, lda_ridge or shrinkage"
                )))
            }
        }
        Ok(())
    }
}

/// Short hex digest of the design plus configuration.
pub fn fingerprint(design: &Design, cfg: &ExperimentConfig) -> String {
    let doc = serde_json::json!({ "design": design.to_string(), "config": cfg });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Design {
    SingleSubject(String),
    PerSubject,
    Pooled,
    /// Train on every other subject, test once on this one.
    UnseenSubject(String),
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Design::SingleSubject(s) => write!(f, "single:{s}"),
            Design::PerSubject => write!(f, "per-subject"),
            Design::Pooled => write!(f, "pooled"),
            Design::UnseenSubject(s) => write!(f, "unseen:{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub design: String,
    /// Subject evaluated, or `all` for pooled data.
    pub subject: String,
    pub method: String,
    pub preprocessing: bool,
    pub per_fold_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub confusion: ConfusionMatrix,
    pub fingerprint: String,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Signals (and covariances when the method needs them) of a trial pool.
struct Prepared {
    signals: Vec<Matrix>,
    covs: Vec<SpdMatrix>,
    labels: Vec<usize>,
    subjects: Vec<String>,
}

fn prepare(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Prepared> {
    let ds = match &cfg.preprocess {
        Some(p) => preprocess_dataset(ds, p)?,
        None => ds.clone(),
    };
    let covs = if cfg.method.uses_covariance() {
        ds.trials
            .par_iter()
            .map(|t| sample_covariance(&t.samples, cfg.shrinkage))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("covariance"))?
    } else {
        Vec::new()
    };
    Ok(Prepared {
        labels: ds.labels(),
        subjects: ds.trials.iter().map(|t| t.subject_id.clone()).collect(),
        signals: ds.trials.into_iter().map(|t| t.samples).collect(),
        covs,
    })
}

fn check_disjoint(n: usize, train: &[usize], test: &[usize]) -> Result<()> {
    let mut in_train = vec![false; n];
    for &i in train {
        in_train[i] = true;
    }
    if let Some(&i) = test.iter().find(|&&i| in_train[i]) {
        return Err(Error::Integrity(format!(
            "trial {i} appears in both the training and the test set"
        )));
    }
    Ok(())
}

/// Rejects an unseen-subject split whose training pool contains a trial of
/// the held-out subject or shares any trial with the test set.
pub fn check_unseen_split(ds: &Dataset, train: &[usize], test: &[usize], held_out: &str) -> Result<()> {
    check_disjoint(ds.len(), train, test)?;
    if let Some(&i) = train.iter().find(|&&i| ds.trials[i].subject_id == held_out) {
        return Err(Error::Integrity(format!(
            "held-out subject {held_out} has trial {i} in the training pool"
        )));
    }
    if let Some(&i) = test.iter().find(|&&i| ds.trials[i].subject_id != held_out) {
        return Err(Error::Integrity(format!(
            "test trial {i} belongs to {}, not the held-out subject {held_out}",
            ds.trials[i].subject_id
        )));
    }
    Ok(())
}

/// Fits on `train` and predicts `test`.
fn fit_predict(p: &Prepared, train_idx: &[usize], test_idx: &[usize], cfg: &ExperimentConfig, seed: u64) -> Result<Vec<usize>> {
    check_disjoint(p.labels.len(), train_idx, test_idx)?;
    let ys: Vec<usize> = train_idx.iter().map(|&i| p.labels[i]).collect();
    match cfg.method {
        Method::Constant(c) => Ok(vec![c; test_idx.len()]),
        Method::Net(arch) => {
            let first = &p.signals[train_idx[0]];
            let mut net = arch.build(&cfg.arch, first.rows(), first.cols(), rng::mix(&[seed, 0]))?;
            let xs: Vec<&Matrix> = train_idx.iter().map(|&i| &p.signals[i]).collect();
            let tc = TrainConfig {
                seed: rng::mix(&[seed, 1]),
                ..cfg.train.clone()
            };
            train(&mut net, &xs, &ys, &tc)?;
            let test: Vec<&Matrix> = test_idx.iter().map(|&i| &p.signals[i]).collect();
            Ok(predict(&net, &test)?.0)
        }
        Method::Mdm => {
            let covs: Vec<SpdMatrix> = train_idx.iter().map(|&i| p.covs[i].clone()).collect();
            let model = mdm_train(&covs, &ys)?;
            test_idx
                .iter()
                .map(|&i| mdm_classify(&model, &p.covs[i]).map(|r| r.0))
                .collect()
        }
        Method::Lda | Method::SvmLinear | Method::SvmGaussian => {
            let train_covs: Vec<SpdMatrix> = train_idx.iter().map(|&i| p.covs[i].clone()).collect();
            let reference = geometric_mean(&train_covs, DEFAULT_MEAN_TOL, DEFAULT_MEAN_MAX_ITER)
                .map_err(|e| e.in_stage("tangent reference"))?;
            let space = TangentSpace::new(reference)?;
            let project = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
                idx.iter().map(|&i| space.project(&p.covs[i])).collect()
            };
            let mut xs = project(train_idx)?;
            let mut xt = project(test_idx)?;
            if cfg.standardize {
                let st = Standardizer::fit(&xs)?;
                xs = xs.iter().map(|x| st.apply(x)).collect();
                xt = xt.iter().map(|x| st.apply(x)).collect();
            }
            match cfg.method {
                Method::Lda => {
                    let m = lda_train(&xs, &ys, cfg.lda_ridge)?;
                    xt.iter().map(|x| lda_classify(&m, x).map(|r| r.0)).collect()
                }
                _ => {
                    let kernel = if cfg.method == Method::SvmLinear {
                        KernelSpec::Linear
                    } else {
                        KernelSpec::Gaussian {
                            gamma: cfg.svm_gamma,
                        }
                    };
                    let m = svm_train(&xs, &ys, kernel, cfg.svm_c, cfg.svm_tol)?;
                    xt.iter().map(|x| svm_classify(&m, x).map(|r| r.0)).collect()
                }
            }
        }
    }
}

/// Accuracy of a model fitted on `train` and scored on `test`.
pub fn evaluate_split(ds: &Dataset, train_idx: &[usize], test_idx: &[usize], cfg: &ExperimentConfig) -> Result<ConfusionMatrix> {
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Config("training and test sets must be nonempty".into()));
    }
    let p = prepare(ds, cfg)?;
    let pred = fit_predict(&p, train_idx, test_idx, cfg, cfg.seed)?;
    let truth: Vec<usize> = test_idx.iter().map(|&i| p.labels[i]).collect();
    ConfusionMatrix::from_predictions(N_CLASSES, &truth, &pred)
}

fn cross_validate(pool: &Dataset, cfg: &ExperimentConfig, design: &Design, subject: &str) -> Result<ExperimentReport> {
    if cfg.folds < 2 {
        return Err(Error::Config(format!(
            "cross validation needs at least 2 folds, got {}",
            cfg.folds
        )));
    }
    let plan = kfold_split(pool, cfg.folds, cfg.seed)?;
    let p = prepare(pool, cfg)?;
    let folds: Vec<ConfusionMatrix> = (0..plan.k)
        .into_par_iter()
        .map(|f| {
            let train_idx = plan.train_indices(f);
            let test_idx = plan.test_indices(f);
            let pred = fit_predict(&p, &train_idx, &test_idx, cfg, rng::mix(&[cfg.seed, f as u64]))
                .map_err(|e| Error::Stage {
                    stage: "fold",
                    source: Box::new(e),
                })?;
            let truth: Vec<usize> = test_idx.iter().map(|&i| p.labels[i]).collect();
            ConfusionMatrix::from_predictions(N_CLASSES, &truth, &pred)
        })
        .collect::<Result<_>>()?;
    Ok(report_from(design, subject, cfg, &folds))
}

fn report_from(design: &Design, subject: &str, cfg: &ExperimentConfig, folds: &[ConfusionMatrix]) -> ExperimentReport {
    let accs: Vec<f64> = folds.iter().map(ConfusionMatrix::accuracy).collect();
    let mut confusion = ConfusionMatrix::new(N_CLASSES);
    folds.iter().for_each(|f| confusion.merge(f));
    let (mean, std) = mean_std(&accs);
    ExperimentReport {
        design: design.to_string(),
        subject: subject.to_string(),
        method: cfg.method.to_string(),
        preprocessing: cfg.preprocess.is_some(),
        per_fold_accuracy: accs,
        mean,
        std,
        confusion,
        fingerprint: fingerprint(design, cfg),
    }
}

/// Runs one design. Per-subject designs return one report per subject, in
/// first-appearance order; the others return a single report.
pub fn run_experiment(design: &Design, ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    let subjects = ds.subjects();
    let require = |s: &str| -> Result<()> {
        if subjects.iter().any(|x| x == s) {
            Ok(())
        } else {
            Err(Error::Config(format!("subject {s} is not in the dataset")))
        }
    };
    match design {
        Design::SingleSubject(s) => {
            require(s)?;
            let pool = ds.subset(&ds.indices_of_subject(s));
            Ok(vec![cross_validate(&pool, cfg, design, s)?])
        }
        Design::Pooled => Ok(vec![cross_validate(ds, cfg, design, "all")?]),
        Design::PerSubject => subjects
            .iter()
            .map(|s| {
                let pool = ds.subset(&ds.indices_of_subject(s));
                cross_validate(&pool, cfg, design, s)
            })
            .collect(),
        Design::UnseenSubject(s) => {
            require(s)?;
            if subjects.len() < 2 {
                return Err(Error::Config("unseen-subject design needs at least 2 subjects".into()));
            }
            let test_idx = ds.indices_of_subject(s);
            let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.trials[i].subject_id != *s).collect();
            check_unseen_split(ds, &train_idx, &test_idx, s)?;
            let p = prepare(ds, cfg)?;
            let pred = fit_predict(&p, &train_idx, &test_idx, cfg, cfg.seed)?;
            let truth: Vec<usize> = test_idx.iter().map(|&i| p.labels[i]).collect();
            debug_assert!(test_idx.iter().all(|&i| p.subjects[i] == *s));
            let cm = ConfusionMatrix::from_predictions(N_CLASSES, &truth, &pred)?;
            Ok(vec![report_from(design, s, cfg, &[cm])])
        }
    }
}

/// Named hyperparameter axes; points enumerate with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrid {
    pub axes: Vec<(String, Vec<f64>)>,
}

impl ParamGrid {
    pub fn points(&self) -> Vec<Vec<(String, f64)>> {
        let mut out: Vec<Vec<(String, f64)>> = vec![vec![]];
        for (name, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((name.clone(), v));
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Parses `name=v1,v2,...`.
    pub fn parse_axis(text: &str) -> Result<(String, Vec<f64>)> {
        let (name, values) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {text} is not name=v1,v2,...")))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad value {v} in grid axis {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((name.trim().to_string(), values))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: ExperimentConfig,
    pub best_index: usize,
    /// Every grid point with its validation accuracy, in grid order.
    pub table: Vec<(Vec<(String, f64)>, f64)>,
}

/// Exhaustive search scored on a held-out validation set; ties keep the
/// earliest grid point.
pub fn grid_search(ds: &Dataset, grid: &ParamGrid, train_idx: &[usize], val_idx: &[usize], base: &ExperimentConfig) -> Result<GridResult> {
    let points = grid.points();
    if grid.axes.is_empty() || grid.axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Config("grid search needs a nonempty grid".into()));
    }
    check_disjoint(ds.len(), train_idx, val_idx)
        .map_err(|e| Error::Integrity(format!("validation overlaps training: {e}")))?;
    let configs: Vec<ExperimentConfig> = points
        .iter()
        .map(|pt| {
            let mut c = base.clone();
            for (name, v) in pt {
                c.set(name, *v)?;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = configs
        .par_iter()
        .map(|c| evaluate_split(ds, train_idx, val_idx, c).map(|m| m.accuracy()))
        .collect::<Result<_>>()?;
    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = i;
        }
    }
    Ok(GridResult {
        best: configs[best_index].clone(),
        best_index,
        table: points.into_iter().zip(scores).collect(),
    })
}

/// Stratified hold-out: fold 0 of a `k`-fold plan is the validation set.
pub fn validation_split(ds: &Dataset, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let plan = kfold_split(ds, k, rng::mix(&[seed, 0x76616c]))?;
    Ok((plan.train_indices(0), plan.test_indices(0)))
}

/// Tangent coordinates of every trial at the geometric mean of all trial
/// covariances, for export.
pub fn tangent_table(ds: &Dataset, shrinkage: f64) -> Result<Vec<Vec<f64>>> {
    let covs = ds
        .trials
        .par_iter()
        .map(|t| sample_covariance(&t.samples, shrinkage))
        .collect::<Result<Vec<_>>>()?;
    let space = TangentSpace::new(geometric_mean(&covs, DEFAULT_MEAN_TOL, DEFAULT_MEAN_MAX_ITER)?)?;
    covs.par_iter().map(|c| space.project(c)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            _ => Err(Error::Config(format!("unknown format {s}; expected text, csv or svg"))),
        }
    }
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

pub fn emit_report(reports: &[ExperimentReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => emit_text(reports),
        ReportFormat::Csv => emit_csv(reports),
        ReportFormat::Svg => emit_svg(reports),
    }
}

fn emit_text(reports: &[ExperimentReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:<8} {:<13} {:<4} {:>5} {:<10} {}",
        "design", "subject", "method", "pre", "folds", "accuracy", "fingerprint"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<14} {:<8} {:<13} {:<4} {:>5} {:<10} {}",
            r.design,
            r.subject,
            r.method,
            if r.preprocessing { "on" } else { "off" },
            r.per_fold_accuracy.len(),
            format_mean_std(r.mean, r.std),
            r.fingerprint
        );
    }
    if reports.len() > 1 {
        let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
        let (m, s) = mean_std(&means);
        let _ = writeln!(
            out,
            "{:<14} {:<8} {:<13} {:<4} {:>5} {:<10}",
            reports[0].design,
            "mean",
            reports[0].method,
            if reports[0].preprocessing { "on" } else { "off" },
            reports.len(),
            format_mean_std(m, s)
        );
    }
    out
}

fn emit_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("design,subject,method,pre,record,fold,true_class,pred_class,value\n");
    for r in reports {
        let head = format!(
            "{},{},{},{}",
            r.design,
            r.subject,
            r.method,
            if r.preprocessing { "on" } else { "off" }
        );
        for (f, a) in r.per_fold_accuracy.iter().enumerate() {
            let _ = writeln!(out, "{head},fold_accuracy,{f},,,{a}");
        }
        let _ = writeln!(out, "{head},mean,,,,{}", r.mean);
        let _ = writeln!(out, "{head},std,,,,{}", r.std);
        for (t, row) in r.confusion.counts.iter().enumerate() {
            for (p, c) in row.iter().enumerate() {
                let _ = writeln!(out, "{head},confusion,,{t},{p},{c}");
            }
        }
    }
    out
}

fn class_name(k: usize) -> String {
    match CLASS_FREQS_HZ.get(k) {
        Some(f) => format!("{f} Hz"),
        None => format!("class {k}"),
    }
}

fn emit_svg(reports: &[ExperimentReport]) -> String {
    const CELL: usize = 56;
    const MARGIN: usize = 70;
    const GAP: usize = 30;
    let k = reports.first().map_or(N_CLASSES, |r| r.confusion.n_classes());
    let panel = MARGIN + k * CELL + GAP;
    let width = panel * reports.len().max(1);
    let height = MARGIN + k * CELL + 40;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for (ri, r) in reports.iter().enumerate() {
        let x0 = ri * panel + MARGIN;
        let y0 = MARGIN;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="20" font-size="13">{} {} {} ({})</text>"#,
            ri * panel + 8,
            r.design,
            r.subject,
            r.method,
            format_mean_std(r.mean, r.std)
        );
        let norm = r.confusion.row_normalized();
        for (t, row) in norm.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                x0 - 6,
                y0 + t * CELL + CELL / 2 + 4,
                class_name(t)
            );
            for (p, &v) in row.iter().enumerate() {
                let shade = (255.0 * (1.0 - v)).round() as u8;
                let ink = if v > 0.5 { "#ffffff" } else { "#000000" };
                let (x, y) = (x0 + p * CELL, y0 + t * CELL);
                let _ = writeln!(
                    out,
                    r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#888888"/>"##
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.2}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2 + 4
                );
            }
        }
        for p in 0..k {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                x0 + p * CELL + CELL / 2,
                y0 - 8,
                class_name(p)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#,
            x0 + k * CELL / 2,
            y0 + k * CELL + 20
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_dataset, Montage, SubjectConfig, SynthConfig};

    #[test]
    fn stratified_folds() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let plan = kfold_labels(&labels, 10, 3).unwrap();
        for f in 0..10 {
            let test = plan.test_indices(f);
            assert_eq!(test.len(), 40);
            for c in 0..4 {
                assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 10);
            }
            assert_eq!(plan.train_indices(f).len(), 360);
        }
        assert_eq!(kfold_labels(&labels, 10, 3).unwrap(), plan);
        assert_ne!(kfold_labels(&labels, 10, 4).unwrap().assignments, plan.assignments);

        let one = kfold_labels(&labels, 1, 0).unwrap();
        assert!(one.assignments.iter().all(|&f| f == 0));
        let err = kfold_labels(&[0, 0, 1], 2, 0).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn uneven_classes_stay_balanced() {
        let labels: Vec<usize> = (0..57).map(|i| (i * 7) % 3).collect();
        let plan = kfold_labels(&labels, 5, 1).unwrap();
        let sizes: Vec<usize> = (0..5).map(|f| plan.test_indices(f).len()).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "{sizes:?}");
    }

    #[test]
    fn confusion_and_reports() {
        let cm = ConfusionMatrix::from_predictions(4, &[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert_eq!(cm.accuracy(), 1.0);
        let norm = cm.row_normalized();
        for (i, row) in norm.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(format_mean_std(mean_std(&[1.0, 0.9]).0, mean_std(&[1.0, 0.9]).1), "0.95±0.05");
        let svg = emit_svg(&[report_from(&Design::Pooled, "all", &ExperimentConfig::new(Method::Lda), &[cm])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 16);
    }

    fn small_ds(subjects: &[&str], per_class: usize) -> Dataset {
        let mut cfg = SynthConfig::default();
        cfg.subjects = subjects.iter().map(|s| SubjectConfig::new(s, per_class)).collect();
        cfg.seed = 5;
        synth_dataset(&cfg, &Montage::default()).unwrap()
    }

    #[test]
    fn constant_classifier_is_chance() {
        let ds = small_ds(&["S01"], 10);
        let cfg = ExperimentConfig::new(Method::Constant(0));
        let r = &run_experiment(&Design::SingleSubject("S01".into()), &ds, &cfg).unwrap()[0];
        assert_eq!(r.mean, 0.25);
        assert_eq!(r.per_fold_accuracy.len(), 10);
        for row in &r.confusion.counts {
            assert_eq!(row[1..].iter().sum::<u64>(), 0);
        }
        let mut one = cfg.clone();
        one.folds = 1;
        assert!(run_experiment(&Design::Pooled, &ds, &one).is_err());
    }

    #[test]
    fn unseen_split_leakage_rejected() {
        let ds = small_ds(&["S01", "S02"], 2);
        let test = ds.indices_of_subject("S02");
        let mut train = ds.indices_of_subject("S01");
        check_unseen_split(&ds, &train, &test, "S02").unwrap();
        train.push(test[0]);
        assert!(matches!(check_unseen_split(&ds, &train, &test, "S02"), Err(Error::Integrity(_))));
        let cfg = ExperimentConfig::new(Method::Mdm);
        let r = run_experiment(&Design::UnseenSubject("S02".into()), &ds, &cfg).unwrap();
        assert_eq!(r[0].per_fold_accuracy.len(), 1);
        assert_eq!(r[0].std, 0.0);
        assert!(run_experiment(&Design::UnseenSubject("S09".into()), &ds, &cfg).is_err());
    }

    #[test]
    fn grid_cases() {
        let ds = small_ds(&["S01"], 10);
        let (tr, va) = validation_split(&ds, 5, 1).unwrap();
        let base = ExperimentConfig::new(Method::SvmLinear);
        let one = ParamGrid {
            axes: vec![("svm_c".into(), vec![2.0])],
        };
        let g = grid_search(&ds, &one, &tr, &va, &base).unwrap();
        assert_eq!(g.best.svm_c, 2.0);
        assert_eq!(g.table.len(), 1);
        let two = ParamGrid {
            axes: vec![("svm_c".into(), vec![0.5, 1.0]), ("shrinkage".into(), vec![0.001, 0.01, 0.1])],
        };
        assert_eq!(two.points().len(), 6);
        assert_eq!(two.points()[1], vec![("svm_c".into(), 0.5), ("shrinkage".into(), 0.01)]);
        assert_eq!(grid_search(&ds, &two, &tr, &va, &base).unwrap().table.len(), 6);
        let mut overlap = tr.clone();
        overlap.push(va[0]);
        assert!(matches!(grid_search(&ds, &one, &overlap, &va, &base), Err(Error::Integrity(_))));
        assert!(grid_search(&ds, &ParamGrid::default(), &tr, &va, &base).is_err());
        assert_eq!(ParamGrid::parse_axis("lr=0,0.001").unwrap(), ("lr".into(), vec![0.0, 0.001]));
        assert!(ExperimentConfig::new(Method::Lda).set("nope", 1.0).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for s in ["cnn", "deep-scu:5", "rnn", "lstm", "gru", "svm-linear", "svm-gaussian", "lda", "mdm", "constant:2"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert!("knn".parse::<Method>().is_err());
    }

    #[test]
    fn fingerprint_tracks_settings() {
        let a = ExperimentConfig::new(Method::Lda);
        let mut b = a.clone();
        assert_eq!(fingerprint(&Design::Pooled, &a), fingerprint(&Design::Pooled, &b));
        b.seed = 1;
        assert_ne!(fingerprint(&Design::Pooled, &a), fingerprint(&Design::Pooled, &b));
        assert_ne!(fingerprint(&Design::Pooled, &a), fingerprint(&Design::PerSubject, &a));
    }
}
