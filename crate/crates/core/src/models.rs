//! SCU convolutional networks, recurrent baselines, and the mini-batch Adam
//! training loop.
//!
//! An SCU block is conv1d → batch norm → ReLU → max pool. The first block
//! uses a long strided kernel; later blocks of the deep variant use short
//! unit-stride kernels so five blocks still fit into 1500 samples:
//!
//! ```text
//! 1500 → conv k10 s4 → 373 → pool 2 → 186 → 92 → 45 → 21 → 9
//! ```

use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DEFAULT_CHANNELS, N_CLASSES};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{one_hot, softmax, AdamState, CellKind, LayerSpec, Mode, NetSpec, Network, Tensor};
use crate::rng;

pub const MAX_SCU_BLOCKS: usize = 5;
pub const DEFAULT_LENGTH: usize = 1500;
pub const DEFAULT_HIDDEN: usize = 64;
const PREDICT_CHUNK: usize = 64;

/// Hyperparameters of one SCU block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScuSpec {
    pub n_scu_blocks: usize,
    pub first_block: BlockSpec,
    pub later_blocks: BlockSpec,
    pub dropout_p: f64,
    pub n_classes: usize,
    pub channels: usize,
    pub length: usize,
}

impl Default for ScuSpec {
    fn default() -> Self {
        ScuSpec {
            n_scu_blocks: 1,
            first_block: BlockSpec {
                filters: 16,
                kernel: 10,
                stride: 4,
                pool: 2,
            },
            later_blocks: BlockSpec {
                filters: 16,
                kernel: 3,
                stride: 1,
                pool: 2,
            },
            dropout_p: 0.5,
            n_classes: N_CLASSES,
            channels: DEFAULT_CHANNELS.len(),
            length: DEFAULT_LENGTH,
        }
    }
}

impl ScuSpec {
    pub fn deep(n_scu_blocks: usize) -> Self {
        ScuSpec {
            n_scu_blocks,
            ..ScuSpec::default()
        }
    }

    /// Sequence length after each block's convolution and pooling, starting
    /// with the input length.
    pub fn length_trace(&self) -> Result<Vec<usize>> {
        if !(1..=MAX_SCU_BLOCKS).contains(&self.n_scu_blocks) {
            return Err(Error::Config(format!(
                "{} SCU blocks requested, supported range is 1..={MAX_SCU_BLOCKS}",
                self.n_scu_blocks
            )));
        }
        let mut trace = vec![self.length];
        let mut len = self.length;
        for b in 0..self.n_scu_blocks {
            let blk = self.block(b);
            if blk.filters == 0 || blk.kernel == 0 || blk.stride == 0 || blk.pool == 0 {
                return Err(Error::Config(format!("SCU block {}: sizes must be positive", b + 1)));
            }
            if len < blk.kernel {
                return Err(Error::Config(format!(
                    "SCU block {}: input length {len} is shorter than kernel {}",
                    b + 1,
                    blk.kernel
                )));
            }
            let conv = (len - blk.kernel) / blk.stride + 1;
            if conv < blk.pool {
                return Err(Error::Config(format!(
                    "SCU block {}: convolution output length {conv} is shorter than pool {}",
                    b + 1,
                    blk.pool
                )));
            }
            trace.push(conv);
            len = conv / blk.pool;
            trace.push(len);
        }
        Ok(trace)
    }

    fn block(&self, b: usize) -> BlockSpec {
        if b == 0 {
            self.first_block
        } else {
            self.later_blocks
        }
    }

    pub fn net_spec(&self) -> Result<NetSpec> {
        let trace = self.length_trace()?;
        if self.n_classes < 2 || self.channels == 0 {
            return Err(Error::Config("need at least 2 classes and 1 channel".into()));
        }
        let mut layers = Vec::new();
        let mut ch = self.channels;
        for b in 0..self.n_scu_blocks {
            let blk = self.block(b);
            layers.push(LayerSpec::Conv1d {
                in_channels: ch,
                out_channels: blk.filters,
                kernel: blk.kernel,
                stride: blk.stride,
            });
            layers.push(LayerSpec::BatchNorm1d {
                channels: blk.filters,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool1d { window: blk.pool });
            ch = blk.filters;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dropout { p: self.dropout_p });
        layers.push(LayerSpec::Dense {
            d_in: ch * trace.last().unwrap(),
            d_out: self.n_classes,
        });
        Ok(NetSpec {
            input_shape: vec![self.channels, self.length],
            layers,
        })
    }

    /// Width of the flattened feature vector feeding the dense head.
    pub fn flatten_len(&self) -> Result<usize> {
        let trace = self.length_trace()?;
        Ok(self.block(self.n_scu_blocks - 1).filters * trace.last().unwrap())
    }
}

/// Single-block SCU network.
pub fn build_scu_cnn(spec: &ScuSpec, seed: u64) -> Result<Network> {
    if spec.n_scu_blocks != 1 {
        return Err(Error::Config(format!(
            "the SCU network has one block, got {}; use the deep builder",
            spec.n_scu_blocks
        )));
    }
    Network::new(spec.net_spec()?, seed)
}

/// SCU network with 1 to 5 blocks.
pub fn build_deep_scu_cnn(spec: &ScuSpec, seed: u64) -> Result<Network> {
    Network::new(spec.net_spec()?, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecurrentSpec {
    pub hidden: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
    pub channels: usize,
    pub length: usize,
}

impl Default for RecurrentSpec {
    fn default() -> Self {
        RecurrentSpec {
            hidden: DEFAULT_HIDDEN,
            dropout_p: 0.001,
            n_classes: N_CLASSES,
            channels: DEFAULT_CHANNELS.len(),
            length: DEFAULT_LENGTH,
        }
    }
}

/// Recurrent cell over the time steps, then dropout and a dense head.
pub fn build_recurrent(kind: CellKind, spec: &RecurrentSpec, seed: u64) -> Result<Network> {
    if spec.hidden == 0 || spec.length == 0 {
        return Err(Error::Config("hidden size and length must be positive".into()));
    }
    Network::new(
        NetSpec {
            input_shape: vec![spec.channels, spec.length],
            layers: vec![
                LayerSpec::Recurrent {
                    kind,
                    input: spec.channels,
                    hidden: spec.hidden,
                },
                LayerSpec::Dropout { p: spec.dropout_p },
                LayerSpec::Dense {
                    d_in: spec.hidden,
                    d_out: spec.n_classes,
                },
            ],
        },
        seed,
    )
}

/// Network family selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Scu,
    DeepScu(usize),
    Recurrent(CellKind),
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scu" | "cnn" => Ok(Arch::Scu),
            "rnn" => Ok(Arch::Recurrent(CellKind::Vanilla)),
            "lstm" => Ok(Arch::Recurrent(CellKind::Lstm)),
            "gru" => Ok(Arch::Recurrent(CellKind::Gru)),
            _ => match s.strip_prefix("deep-scu:") {
                Some(n) => n
                    .parse()
                    .map(Arch::DeepScu)
                    .map_err(|_| Error::Config(format!("bad block count in {s}"))),
                None => Err(Error::Config(format!(
                    "unknown architecture {s}; expected scu, deep-scu:N, rnn, lstm or gru"
                ))),
            },
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Scu => write!(f, "cnn"),
            Arch::DeepScu(n) => write!(f, "deep-scu:{n}"),
            Arch::Recurrent(CellKind::Vanilla) => write!(f, "rnn"),
            Arch::Recurrent(CellKind::Lstm) => write!(f, "lstm"),
            Arch::Recurrent(CellKind::Gru) => write!(f, "gru"),
        }
    }
}

/// Architecture hyperparameters shared by every family.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub scu: ScuSpec,
    pub recurrent: RecurrentSpec,
}

impl Arch {
    /// Builds the network for inputs of `channels × length`.
    pub fn build(
        &self,
        cfg: &ArchConfig,
        channels: usize,
        length: usize,
        seed: u64,
    ) -> Result<Network> {
        match *self {
            Arch::Scu => build_scu_cnn(
                &ScuSpec {
                    channels,
                    length,
                    n_scu_blocks: 1,
                    ..cfg.scu.clone()
                },
                seed,
            ),
            Arch::DeepScu(n) => build_deep_scu_cnn(
                &ScuSpec {
                    channels,
                    length,
                    n_scu_blocks: n,
                    ..cfg.scu.clone()
                },
                seed,
            ),
            Arch::Recurrent(kind) => build_recurrent(
                kind,
                &RecurrentSpec {
                    channels,
                    length,
                    ..cfg.recurrent.clone()
                },
                seed,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_l2: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            lambda_l2: 1e-4,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Named L2 settings: `paper-method` (λ = 1e-4) and `paper-results`
    /// (λ = 1e-3).
    pub fn preset(name: &str) -> Result<Self> {
        let lambda_l2 = match name {
            "paper-method" => 1e-4,
            "paper-results" => 1e-3,
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name}; expected paper-method or paper-results"
                )))
            }
        };
        Ok(TrainConfig {
            lambda_l2,
            ..TrainConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return Err(Error::Config(format!("L2 scale {} must be >= 0", self.lambda_l2)));
        }
        Ok(())
    }
}

/// Stacks equally shaped trials into a `batch × channels × length` tensor.
pub fn batch_tensor(xs: &[&Matrix]) -> Result<Tensor> {
    let (c, l) = xs.first().map_or((0, 0), |m| (m.rows(), m.cols()));
    let mut data = Vec::with_capacity(xs.len() * c * l);
    for m in xs {
        if m.rows() != c || m.cols() != l {
            return Err(Error::Shape(format!(
                "trial is {}x{}, batch expects {c}x{l}",
                m.rows(),
                m.cols()
            )));
        }
        data.extend_from_slice(m.as_slice());
    }
    Tensor::new(vec![xs.len(), c, l], data)
}

/// Minimizes `CCE + λ Σ‖w‖²` with Adam over seeded mini-batches and returns
/// the mean training objective of every epoch.
pub fn train(net: &mut Network, xs: &[&Matrix], ys: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} trials but {} labels", xs.len(), ys.len())));
    }
    let k = net.n_outputs();
    if let Some(&bad) = ys.iter().find(|&&y| y >= k) {
        return Err(Error::Config(format!("label {bad} outside 0..{k}")));
    }
    net.reseed_dropout(rng::mix(&[cfg.seed, 1]));
    let mut order_rng = rng::stream(cfg.seed, 2);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut adam = AdamState::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Matrix> = idx.iter().map(|&i| xs[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
            let x = batch_tensor(&batch)?;
            let y = one_hot(&labels, k)?;
            let (loss, _) = net
                .loss_and_grad(&x, &y, cfg.lambda_l2, Mode::Train)
                .map_err(|e| match e {
                    Error::Numerical(m) => {
                        Error::Numerical(format!("epoch {epoch}, batch {bi}: {m}"))
                    }
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            net.adam_step(&mut adam)?;
            total += loss * idx.len() as f64;
        }
        history.push(total / xs.len() as f64);
    }
    net.clear_caches();
    Ok(history)
}

/// Eval-mode labels (ties to the lowest class) and class probabilities.
pub fn predict(net: &Network, xs: &[&Matrix]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if !net.is_trained() {
        return Err(Error::State(
            "model has no batch-norm statistics; train it before predicting".into(),
        ));
    }
    let chunks: Vec<Vec<Vec<f64>>> = xs
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let probs = softmax(&net.infer(&batch_tensor(chunk)?)?)?;
            Ok(probs.rows().map(<[f64]>::to_vec).collect())
        })
        .collect::<Result<_>>()?;
    let probs: Vec<Vec<f64>> = chunks.into_iter().flatten().collect();
    let labels = probs.iter().map(|p| crate::classic::argmax(p)).collect();
    Ok((labels, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_dataset, Montage, SynthConfig};
    use crate::nn::grad_check;

    #[test]
    fn scu_length_trace() {
        let spec = ScuSpec::default();
        assert_eq!(spec.length_trace().unwrap(), vec![1500, 373, 186]);
        assert_eq!(spec.flatten_len().unwrap(), 2976);
        let net = build_scu_cnn(&spec, 0).unwrap();
        assert_eq!(net.n_outputs(), 4);
        let trace = net.spec().shape_trace().unwrap();
        assert_eq!(trace[1], vec![16, 373]);
        assert_eq!(trace[4], vec![16, 186]);

        let deep = ScuSpec::deep(5);
        let t = deep.length_trace().unwrap();
        let pooled: Vec<usize> = t.iter().step_by(2).copied().collect();
        assert_eq!(pooled, vec![1500, 186, 92, 45, 21, 9]);
        assert_eq!(deep.flatten_len().unwrap(), 144);
        assert_eq!(build_deep_scu_cnn(&ScuSpec::deep(1), 3).unwrap().spec(), build_scu_cnn(&spec, 3).unwrap().spec());
        assert!(build_deep_scu_cnn(&ScuSpec::deep(6), 0).is_err());
        assert!(build_scu_cnn(&ScuSpec::deep(2), 0).is_err());

        let short = ScuSpec {
            length: 60,
            ..ScuSpec::deep(5)
        };
        let err = short.length_trace().unwrap_err().to_string();
        assert!(err.contains("SCU block"), "{err}");
    }

    #[test]
    fn untrained_bn_and_probabilities() {
        let net = build_scu_cnn(&ScuSpec::default(), 1).unwrap();
        let zero = Matrix::zeros(7, 1500);
        assert!(matches!(predict(&net, &[&zero]), Err(Error::State(_))));
        assert!(matches!(net.infer(&batch_tensor(&[&zero]).unwrap()), Err(Error::State(_))));
    }

    #[test]
    fn recurrent_parameter_count_and_zero_input() {
        let net = build_recurrent(CellKind::Vanilla, &RecurrentSpec::default(), 0).unwrap();
        assert_eq!(net.n_params(), 64 * (7 + 64) + 64 + (64 * 4 + 4));
        let small = RecurrentSpec {
            length: 20,
            ..RecurrentSpec::default()
        };
        let net = build_recurrent(CellKind::Vanilla, &small, 0).unwrap();
        let (_, p) = predict(&net, &[&Matrix::zeros(7, 20)]).unwrap();
        assert!(p[0].iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn recurrent_truncated_gradients() {
        for kind in [CellKind::Vanilla, CellKind::Lstm, CellKind::Gru] {
            let spec = RecurrentSpec {
                hidden: 6,
                length: 20,
                ..RecurrentSpec::default()
            };
            let mut net = build_recurrent(kind, &spec, 2).unwrap();
            let cfg = SynthConfig::clean(1, 4);
            let ds = synth_dataset(&cfg, &Montage::default()).unwrap();
            let xs: Vec<Matrix> = ds.trials[..2]
                .iter()
                .map(|t| {
                    let rows: Vec<Vec<f64>> = t.samples.row_iter().map(|r| r[..20].to_vec()).collect();
                    Matrix::from_rows(&rows).unwrap()
                })
                .collect();
            let x = batch_tensor(&xs.iter().collect::<Vec<_>>()).unwrap();
            let e = grad_check(&mut net, &x, &[0, 1], 1e-5, 0.0).unwrap();
            assert!(e < 1e-5, "{kind:?}: {e}");
        }
    }

    #[test]
    fn deep_two_block_gradients() {
        let spec = ScuSpec {
            length: 160,
            channels: 3,
            ..ScuSpec::deep(2)
        };
        let mut net = build_deep_scu_cnn(&spec, 5).unwrap();
        let ds = synth_dataset(&SynthConfig::clean(1, 9), &Montage::default()).unwrap();
        let xs: Vec<Matrix> = ds.trials[..2]
            .iter()
            .map(|t| {
                let rows: Vec<Vec<f64>> = t.samples.row_iter().skip(4).map(|r| r[..160].to_vec()).collect();
                Matrix::from_rows(&rows).unwrap()
            })
            .collect();
        let x = batch_tensor(&xs.iter().collect::<Vec<_>>()).unwrap();
        let e = grad_check(&mut net, &x, &[0, 1], 1e-5, 1e-3).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn arch_parsing() {
        assert_eq!("scu".parse::<Arch>().unwrap(), Arch::Scu);
        assert_eq!("deep-scu:3".parse::<Arch>().unwrap(), Arch::DeepScu(3));
        assert_eq!("gru".parse::<Arch>().unwrap(), Arch::Recurrent(CellKind::Gru));
        assert!("deep-scu:x".parse::<Arch>().is_err());
        assert!("mlp".parse::<Arch>().is_err());
        assert_eq!(Arch::DeepScu(5).to_string(), "deep-scu:5");
    }

    #[test]
    fn presets_and_validation() {
        assert_eq!(TrainConfig::preset("paper-method").unwrap().lambda_l2, 1e-4);
        assert_eq!(TrainConfig::preset("paper-results").unwrap().lambda_l2, 1e-3);
        assert!(TrainConfig::preset("other").is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn toy() -> (Vec<Matrix>, Vec<usize>, ScuSpec) {
        // Short clean trials keep the toy task fast.
        let mut cfg = SynthConfig::clean(6, 21);
        cfg.duration_s = 0.6;
        let ds = synth_dataset(&cfg, &Montage::default()).unwrap();
        let spec = ScuSpec {
            length: 300,
            ..ScuSpec::default()
        };
        (
            ds.trials.iter().map(|t| t.samples.clone()).collect(),
            ds.labels(),
            spec,
        )
    }

    #[test]
    fn training_descends_and_memorizes() {
        let (xs, ys, spec) = toy();
        let refs: Vec<&Matrix> = xs.iter().collect();
        let mut net = build_scu_cnn(&spec, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let h = train(&mut net, &refs, &ys, &cfg).unwrap();
        assert_eq!(h.len(), 20);
        assert!(h[19] < h[0], "{h:?}");
        let (labels, probs) = predict(&net, &refs).unwrap();
        let acc = labels.iter().zip(&ys).filter(|(a, b)| a == b).count() as f64 / ys.len() as f64;
        assert!(acc >= 0.99, "{acc}");
        for p in &probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (again, _) = predict(&net, &[refs[0], refs[0]]).unwrap();
        assert_eq!(again[0], again[1]);
        assert_eq!(predict(&net, &refs).unwrap(), (labels, probs));

        let mut twin = build_scu_cnn(&spec, 1).unwrap();
        assert_eq!(train(&mut twin, &refs, &ys, &cfg).unwrap(), h);
        assert_eq!(twin.to_bytes().unwrap(), net.to_bytes().unwrap());
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let (xs, ys, spec) = toy();
        let refs: Vec<&Matrix> = xs.iter().collect();
        let spec = ScuSpec {
            dropout_p: 0.0,
            ..spec
        };
        let mut net = build_scu_cnn(&spec, 2).unwrap();
        let before: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            shuffle: false,
            ..TrainConfig::default()
        };
        let h = train(&mut net, &refs, &ys, &cfg).unwrap();
        let after: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
        assert!(h.iter().all(|&v| v == h[0]), "{h:?}");
        assert!(train(&mut net, &[], &[], &cfg).is_err());
    }

    #[test]
    fn weight_penalty_shrinks_weights() {
        let (xs, ys, spec) = toy();
        let refs: Vec<&Matrix> = xs.iter().collect();
        let run = |lambda: f64| {
            let mut net = build_scu_cnn(&spec, 3).unwrap();
            let cfg = TrainConfig {
                epochs: 10,
                batch_size: 8,
                lr: 1e-2,
                lambda_l2: lambda,
                ..TrainConfig::default()
            };
            train(&mut net, &refs, &ys, &cfg).unwrap();
            net.weight_sq_norm()
        };
        assert!(run(1e-2) <= run(0.0));
    }
}
