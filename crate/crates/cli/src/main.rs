use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use ssvep_core::dataio::{read_archive, synth_dataset, write_archive, Dataset, Montage, SynthConfig};
use ssvep_core::dsp::{preprocess_dataset, PreprocessConfig};
use ssvep_core::features::DEFAULT_SHRINKAGE;
use ssvep_core::harness::{
    emit_report, grid_search, run_experiment, tangent_table, validation_split, ConfusionMatrix,
    Design, ExperimentConfig, ExperimentReport, Method, ParamGrid, ReportFormat,
};
use ssvep_core::linalg::Matrix;
use ssvep_core::models::{predict, train, Arch, ArchConfig, RecurrentSpec, ScuSpec, TrainConfig};
use ssvep_core::nn::Network;
use ssvep_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ssvep", version, about = "SSVEP EEG classification workbench")]
struct Cli {
    /// Seed for data generation, initialization, training and folds.
    /// Generator presets keep their own seed unless this is given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Svg,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Csv => ReportFormat::Csv,
            Format::Svg => ReportFormat::Svg,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignKind {
    Single,
    PerSubject,
    Pooled,
    Unseen,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trial archive.
    Gen(GenArgs),
    /// Decimate, re-reference, notch and bandpass an archive.
    Preprocess(PreprocessArgs),
    /// Write tangent-space coordinates of every trial as a text table.
    Features(FeaturesArgs),
    /// Train a network on a whole archive and save a checkpoint.
    Train(TrainArgs),
    /// Cross-validate a method under an experiment design.
    Xval(XvalArgs),
    /// Score a checkpoint on an archive.
    Eval(EvalArgs),
    /// Render saved reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// clean, moderate or cohort; ignored with --cfg.
    #[arg(long, default_value = "moderate")]
    preset: String,
    #[arg(long, default_value_t = 100)]
    trials_per_class: usize,
    /// TOML document with the full generator configuration.
    #[arg(long)]
    cfg: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    filters: FilterArgs,
}

#[derive(Args)]
struct FilterArgs {
    /// Notch centre in Hz; 0 disables the notch.
    #[arg(long)]
    notch_hz: Option<f64>,
    #[arg(long)]
    notch_q: Option<f64>,
    /// Passband as lo:hi in Hz.
    #[arg(long)]
    band: Option<String>,
    /// Butterworth order of each bandpass edge.
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    shrinkage: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// scu, deep-scu:N, rnn, lstm or gru.
    #[arg(long, default_value = "scu")]
    arch: String,
    #[arg(long = "in")]
    input: PathBuf,
    /// TOML document with [train], [scu] and [recurrent] tables.
    #[arg(long)]
    cfg: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pre: Switch,
}

#[derive(Args)]
struct XvalArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = DesignKind::Single)]
    design: DesignKind,
    /// Subject for the single and unseen designs; defaults to the first
    /// and the last subject respectively.
    #[arg(long)]
    subject: Option<String>,
    /// cnn, deep-scu:N, rnn, lstm, gru, svm-linear, svm-gaussian, lda or mdm.
    #[arg(long, default_value = "cnn")]
    method: String,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pre: Switch,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// TOML document with [train], [scu] and [recurrent] tables.
    #[arg(long)]
    cfg: Option<PathBuf>,
    /// Grid axis name=v1,v2,...; repeatable. The best point on a
    /// validation split is used for cross validation.
    #[arg(long)]
    grid: Vec<String>,
    /// Also save the reports as JSON for `report`.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pre: Switch,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON reports written by `xval --save`.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NetConfigFile {
    train: TrainConfig,
    scu: ScuSpec,
    recurrent: RecurrentSpec,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn load_net_config(path: Option<&Path>) -> Result<NetConfigFile> {
    match path {
        None => Ok(NetConfigFile::default()),
        Some(p) => toml::from_str(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

fn filter_config(args: &FilterArgs) -> Result<PreprocessConfig> {
    let mut cfg = PreprocessConfig::default();
    if let Some(v) = args.notch_hz {
        cfg.notch_hz = v;
    }
    if let Some(v) = args.notch_q {
        cfg.notch_q = v;
    }
    if let Some(band) = &args.band {
        let (lo, hi) = band
            .split_once(':')
            .and_then(|(lo, hi)| Some((lo.trim().parse().ok()?, hi.trim().parse().ok()?)))
            .ok_or_else(|| Error::Config(format!("band {band} is not lo:hi")))?;
        cfg.band_lo_hz = lo;
        cfg.band_hi_hz = hi;
    }
    if let Some(v) = args.order {
        cfg.band_order = v;
    }
    Ok(cfg)
}

fn maybe_preprocess(ds: Dataset, pre: Switch) -> Result<Dataset> {
    match pre {
        Switch::On => preprocess_dataset(&ds, &PreprocessConfig::default()),
        Switch::Off => Ok(ds),
    }
}

fn gen(args: &GenArgs, seed: Option<u64>) -> Result<String> {
    let cfg = match &args.cfg {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => {
            let preset = SynthConfig::preset(&args.preset, args.trials_per_class)?;
            SynthConfig {
                seed: seed.unwrap_or(preset.seed),
                ..preset
            }
        }
    };
    let ds = synth_dataset(&cfg, &Montage::default())?;
    write_archive(&ds, &args.out)?;
    Ok(format!("wrote {} trials to {}\n", ds.len(), args.out.display()))
}

fn preprocess(args: &PreprocessArgs) -> Result<String> {
    let ds = read_archive(&args.input)?;
    let out = preprocess_dataset(&ds, &filter_config(&args.filters)?)?;
    write_archive(&out, &args.out)?;
    Ok(format!(
        "wrote {} trials at {} Hz to {}\n",
        out.len(),
        out.montage.sample_rate_hz,
        args.out.display()
    ))
}

fn features(args: &FeaturesArgs) -> Result<String> {
    let ds = read_archive(&args.input)?;
    let rows = tangent_table(&ds, args.shrinkage)?;
    let mut text = String::new();
    for (t, coords) in ds.trials.iter().zip(&rows) {
        let coords: Vec<String> = coords.iter().map(|c| format!("{c:.10e}")).collect();
        text.push_str(&format!("{} {} {}\n", t.subject_id, t.label, coords.join(" ")));
    }
    write_text(&args.out, &text)?;
    Ok(format!("wrote {} rows to {}\n", rows.len(), args.out.display()))
}

fn inputs(ds: &Dataset) -> Vec<&Matrix> {
    ds.trials.iter().map(|t| &t.samples).collect()
}

fn train_cmd(args: &TrainArgs, seed: u64) -> Result<String> {
    let arch: Arch = args.arch.parse()?;
    let file = load_net_config(args.cfg.as_deref())?;
    let ds = maybe_preprocess(read_archive(&args.input)?, args.pre)?;
    let first = ds.trials.first().ok_or_else(|| Error::Config("archive holds no trials".into()))?;
    let arch_cfg = ArchConfig {
        scu: file.scu,
        recurrent: file.recurrent,
    };
    let mut net = arch.build(&arch_cfg, first.n_channels(), first.n_samples(), seed)?;
    let cfg = TrainConfig { seed, ..file.train };
    let losses = train(&mut net, &inputs(&ds), &ds.labels(), &cfg)?;
    net.save(&args.out)?;
    Ok(format!(
        "trained {arch} for {} epochs, final loss {:.4}; saved {}\n",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    ))
}

fn design(args: &XvalArgs, ds: &Dataset) -> Result<Design> {
    let subjects = ds.subjects();
    let pick = |fallback: Option<&String>| {
        args.subject
            .clone()
            .or_else(|| fallback.cloned())
            .ok_or_else(|| Error::Config("archive holds no trials".into()))
    };
    Ok(match args.design {
        DesignKind::Single => Design::SingleSubject(pick(subjects.first())?),
        DesignKind::PerSubject => Design::PerSubject,
        DesignKind::Pooled => Design::Pooled,
        DesignKind::Unseen => Design::UnseenSubject(pick(subjects.last())?),
    })
}

/// Trials a grid search may draw its validation split from: the subject
/// under test for the single design, every other subject for the unseen one.
fn tuning_pool(design: &Design, ds: &Dataset) -> Dataset {
    let keep: Vec<usize> = match design {
        Design::SingleSubject(s) => ds.indices_of_subject(s),
        Design::UnseenSubject(s) => (0..ds.len()).filter(|&i| ds.trials[i].subject_id != *s).collect(),
        Design::PerSubject | Design::Pooled => (0..ds.len()).collect(),
    };
    ds.subset(&keep)
}

fn xval(args: &XvalArgs, seed: u64, format: Format) -> Result<String> {
    let ds = read_archive(&args.input)?;
    let file = load_net_config(args.cfg.as_deref())?;
    let mut cfg = ExperimentConfig::new(args.method.parse::<Method>()?);
    cfg.seed = seed;
    cfg.folds = args.folds;
    cfg.train = file.train;
    cfg.arch = ArchConfig {
        scu: file.scu,
        recurrent: file.recurrent,
    };
    if args.pre == Switch::On {
        cfg.preprocess = Some(PreprocessConfig::default());
    }
    let design = design(args, &ds)?;
    let mut log = String::new();
    if !args.grid.is_empty() {
        let grid = ParamGrid {
            axes: args.grid.iter().map(|a| ParamGrid::parse_axis(a)).collect::<Result<_>>()?,
        };
        let pool = tuning_pool(&design, &ds);
        let (train_idx, val_idx) = validation_split(&pool, args.folds, seed)?;
        let result = grid_search(&pool, &grid, &train_idx, &val_idx, &cfg)?;
        for (point, acc) in &result.table {
            let point: Vec<String> = point.iter().map(|(n, v)| format!("{n}={v}")).collect();
            log.push_str(&format!("grid {} validation accuracy {acc:.4}\n", point.join(" ")));
        }
        cfg = result.best;
    }
    let reports = run_experiment(&design, &ds, &cfg)?;
    if let Some(path) = &args.save {
        let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::Serialize(e.to_string()))?;
        write_text(path, &json)?;
    }
    eprint!("{log}");
    Ok(emit_report(&reports, format.into()))
}

fn eval(args: &EvalArgs, format: Format) -> Result<String> {
    let net = Network::load(&args.model)?;
    let ds = maybe_preprocess(read_archive(&args.input)?, args.pre)?;
    let (pred, _) = predict(&net, &inputs(&ds))?;
    let confusion = ConfusionMatrix::from_predictions(net.n_outputs(), &ds.labels(), &pred)?;
    let acc = confusion.accuracy();
    let report = ExperimentReport {
        design: "eval".into(),
        subject: "all".into(),
        method: args.model.display().to_string(),
        preprocessing: args.pre == Switch::On,
        per_fold_accuracy: vec![acc],
        mean: acc,
        std: 0.0,
        confusion,
        fingerprint: String::new(),
    };
    Ok(emit_report(&[report], format.into()))
}

fn report(args: &ReportArgs, format: Format) -> Result<String> {
    let reports: Vec<ExperimentReport> = serde_json::from_str(&read_text(&args.input)?)
        .map_err(|e| Error::Integrity(format!("{}: {e}", args.input.display())))?;
    Ok(emit_report(&reports, format.into()))
}

fn run(cli: &Cli) -> Result<String> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Gen(a) => gen(a, cli.seed),
        Command::Preprocess(a) => preprocess(a),
        Command::Features(a) => features(a),
        Command::Train(a) => train_cmd(a, seed),
        Command::Xval(a) => xval(a, seed, cli.format),
        Command::Eval(a) => eval(a, cli.format),
        Command::Report(a) => report(a, cli.format),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
