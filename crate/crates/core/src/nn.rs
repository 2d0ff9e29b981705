//! Layer engine for the convolutional and recurrent classifiers: forward and
//! exact backward passes, softmax with categorical cross-entropy, the L2
//! weight penalty, Adam, finite-difference gradient checking and the binary
//! checkpoint format.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PROB_CLAMP: f64 = 1e-12;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCUNET01";

/// Dense row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let w = self.shape.last().copied().unwrap_or(1).max(1);
        self.data.chunks(w)
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, c, l] => Ok((b, c, l)),
            _ => Err(Error::Shape(format!(
                "{what} expects batch x channels x length, got {:?}",
                self.shape
            ))),
        }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [b, d] => Ok((b, d)),
            _ => Err(Error::Shape(format!(
                "{what} expects batch x features, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "{context}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }
}

/// Trainable tensor with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Weight matrices and kernels carry the L2 penalty; biases and
    /// batch-norm affine terms do not.
    pub decay: bool,
}

impl Param {
    fn new(name: String, value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name,
            value,
            grad,
            decay,
        }
    }

    fn uniform(name: String, shape: &[usize], fan_in: usize, r: &mut Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| r.random_range(-bound..bound))
            .collect();
        Param::new(name, Tensor::new(shape.to_vec(), data).unwrap(), true)
    }

    fn constant(name: String, shape: &[usize], v: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(v);
        Param::new(name, t, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics with running-stat updates, fresh dropout masks.
    Train,
    /// Batch statistics without running-stat updates, dropout masks reused:
    /// the loss is a deterministic function of the parameters.
    Probe,
    /// Running statistics, dropout off.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Vanilla,
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Vanilla => 1,
            CellKind::Lstm => 4,
            CellKind::Gru => 2,
        }
    }
}

/// Architecture entry as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm1d {
        channels: usize,
    },
    Relu,
    MaxPool1d {
        window: usize,
    },
    Flatten,
    Dropout {
        p: f64,
    },
    Dense {
        d_in: usize,
        d_out: usize,
    },
    Recurrent {
        kind: CellKind,
        input: usize,
        hidden: usize,
    },
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Shape(msg));
        match (self, input) {
            (
                LayerSpec::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                },
                &[c, l],
            ) => {
                if c != *in_channels {
                    return bad(format!("conv1d expects {in_channels} channels, got {c}"));
                }
                if l < *kernel {
                    return bad(format!("conv1d input length {l} shorter than kernel {kernel}"));
                }
                Ok(vec![*out_channels, (l - kernel) / stride + 1])
            }
            (LayerSpec::BatchNorm1d { channels }, &[c, l]) if c == *channels => Ok(vec![c, l]),
            (LayerSpec::Relu | LayerSpec::Dropout { .. }, s) => Ok(s.to_vec()),
            (LayerSpec::MaxPool1d { window }, &[c, l]) => {
                if l < *window {
                    return bad(format!("maxpool1d input length {l} shorter than window {window}"));
                }
                Ok(vec![c, l / window])
            }
            (LayerSpec::Flatten, s) => Ok(vec![s.iter().product()]),
            (LayerSpec::Dense { d_in, d_out }, &[d]) if d == *d_in => Ok(vec![*d_out]),
            (LayerSpec::Recurrent { input: i, hidden, .. }, &[c, _]) if c == *i => {
                Ok(vec![*hidden])
            }
            (spec, s) => bad(format!("{spec:?} cannot take per-sample shape {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
struct Conv1d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    w: Param,
    b: Param,
    input: Option<Tensor>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Patch matrix for one sample: row `t` holds the receptive field of
/// output step `t`, laid out channel-major to match the weight rows.
fn patches(xb: &[f64], c: usize, l: usize, k: usize, s: usize, lo: usize) -> Vec<f64> {
    let mut p = vec![0.0; lo * c * k];
    for (t, row) in p.chunks_exact_mut(c * k).enumerate() {
        for (i, dst) in row.chunks_exact_mut(k).enumerate() {
            dst.copy_from_slice(&xb[i * l + t * s..][..k]);
        }
    }
    p
}

impl Conv1d {
    fn patches(&self, xb: &[f64], l: usize, lo: usize) -> Vec<f64> {
        patches(xb, self.in_ch, l, self.kernel, self.stride, lo)
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let (bs, c, l) = x.dims3("conv1d")?;
        let out = LayerSpec::Conv1d {
            in_channels: self.in_ch,
            out_channels: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
        }
        .output_shape(&[c, l])?;
        let lo = out[1];
        let ck = c * self.kernel;
        let w = self.w.value.data();
        let mut y = vec![0.0; bs * self.out_ch * lo];
        for b in 0..bs {
            let p = self.patches(&x.data[b * c * l..(b + 1) * c * l], l, lo);
            for o in 0..self.out_ch {
                let wo = &w[o * ck..(o + 1) * ck];
                let bias = self.b.value.data[o];
                let yo = &mut y[(b * self.out_ch + o) * lo..][..lo];
                for (yt, row) in yo.iter_mut().zip(p.chunks_exact(ck)) {
                    *yt = bias + dot(wo, row);
                }
            }
        }
        Tensor::new(vec![bs, self.out_ch, lo], y)
    }

    fn backward(&mut self, g: &Tensor, need_input: bool) -> Result<Tensor> {
        let x = self.input.as_ref().ok_or_else(no_cache)?;
        let (bs, c, l) = x.dims3("conv1d")?;
        let lo = g.shape[2];
        let (k, s) = (self.kernel, self.stride);
        let ck = c * k;
        let mut gx = vec![0.0; if need_input { x.len() } else { 0 }];
        let w = &self.w.value.data;
        let gw = &mut self.w.grad.data;
        let mut gp = vec![0.0; if need_input { lo * ck } else { 0 }];
        for b in 0..bs {
            let p = patches(&x.data[b * c * l..(b + 1) * c * l], c, l, k, s, lo);
            gp.fill(0.0);
            for o in 0..self.out_ch {
                let go = &g.data[(b * self.out_ch + o) * lo..][..lo];
                self.b.grad.data[o] += go.iter().sum::<f64>();
                let gwo = &mut gw[o * ck..(o + 1) * ck];
                for (&gt, row) in go.iter().zip(p.chunks_exact(ck)) {
                    axpy(gt, row, gwo);
                }
                if need_input {
                    let wo = &w[o * ck..(o + 1) * ck];
                    for (&gt, grow) in go.iter().zip(gp.chunks_exact_mut(ck)) {
                        axpy(gt, wo, grow);
                    }
                }
            }
            if need_input {
                let gxb = &mut gx[b * c * l..(b + 1) * c * l];
                for (t, grow) in gp.chunks_exact(ck).enumerate() {
                    for (i, src) in grow.chunks_exact(k).enumerate() {
                        for (d, v) in gxb[i * l + t * s..][..k].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
        if !need_input {
            return Ok(Tensor {
                shape: vec![0],
                data: gx,
            });
        }
        Tensor::new(x.shape.clone(), gx)
    }
}

#[derive(Debug, Clone)]
struct BatchNorm1d {
    channels: usize,
    gamma: Param,
    beta: Param,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    stats_ready: bool,
    /// Normalized input and per-channel 1/σ from the last batch forward.
    cache: Option<(Tensor, Vec<f64>)>,
}

impl BatchNorm1d {
    fn affine(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> (Tensor, Tensor) {
        let (bs, c, l) = (x.shape[0], x.shape[1], x.shape[2]);
        let mut xhat = x.clone();
        let mut y = x.clone();
        for b in 0..bs {
            for ch in 0..c {
                let off = (b * c + ch) * l;
                let (g, be) = (self.gamma.value.data[ch], self.beta.value.data[ch]);
                for t in off..off + l {
                    let h = (x.data[t] - mean[ch]) * inv_std[ch];
                    xhat.data[t] = h;
                    y.data[t] = g * h + be;
                }
            }
        }
        (y, xhat)
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (bs, c, l) = x.dims3("batchnorm1d")?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm1d expects {} channels, got {c}",
                self.channels
            )));
        }
        if mode == Mode::Eval {
            return self.eval(x);
        }
        let n = bs * l;
        if n < 2 {
            return Err(Error::Shape(format!(
                "batch norm needs at least 2 values per channel in training, got {n}"
            )));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..bs).flat_map(|b| &x.data[(b * c + ch) * l..][..l]);
            mean[ch] = vals.clone().sum::<f64>() / n as f64;
            var[ch] = vals.map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (y, xhat) = self.affine(x, &mean, &inv_std);
        if mode == Mode::Train {
            let unbias = n as f64 / (n - 1) as f64;
            for ch in 0..c {
                self.running_mean[ch] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch];
                self.running_var[ch] =
                    (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
            self.stats_ready = true;
        }
        self.cache = Some((xhat, inv_std));
        Ok(y)
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        if !self.stats_ready {
            return Err(Error::State(
                "batch norm has no running statistics; train the model first".into(),
            ));
        }
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        Ok(self.affine(x, &self.running_mean, &inv_std).0)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let (xhat, inv_std) = self.cache.as_ref().ok_or_else(no_cache)?;
        let (bs, c, l) = g.dims3("batchnorm1d")?;
        let n = (bs * l) as f64;
        let mut gx = vec![0.0; g.len()];
        for ch in 0..c {
            let mut sg = 0.0;
            let mut sgx = 0.0;
            for b in 0..bs {
                let off = (b * c + ch) * l;
                for t in off..off + l {
                    sg += g.data[t];
                    sgx += g.data[t] * xhat.data[t];
                }
            }
            self.gamma.grad.data[ch] += sgx;
            self.beta.grad.data[ch] += sg;
            let scale = self.gamma.value.data[ch] * inv_std[ch] / n;
            for b in 0..bs {
                let off = (b * c + ch) * l;
                for t in off..off + l {
                    gx[t] = scale * (n * g.data[t] - sg - xhat.data[t] * sgx);
                }
            }
        }
        Tensor::new(g.shape.clone(), gx)
    }
}

#[derive(Debug, Clone)]
struct MaxPool1d {
    window: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    /// Output and, per output element, the flat input index of its maximum
    /// (first index on ties).
    fn compute(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (bs, c, l) = x.dims3("maxpool1d")?;
        let lo = LayerSpec::MaxPool1d {
            window: self.window,
        }
        .output_shape(&[c, l])?[1];
        let k = self.window;
        let mut y = Vec::with_capacity(bs * c * lo);
        let mut arg = Vec::with_capacity(bs * c * lo);
        for row in 0..bs * c {
            for t in 0..lo {
                let start = row * l + t * k;
                let mut best = start;
                for j in start + 1..start + k {
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                y.push(x.data[best]);
                arg.push(best);
            }
        }
        Ok((Tensor::new(vec![bs, c, lo], y)?, arg))
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self.cache.as_ref().ok_or_else(no_cache)?;
        let mut gx = Tensor::zeros(shape);
        for (&i, &v) in arg.iter().zip(&g.data) {
            gx.data[i] += v;
        }
        Ok(gx)
    }
}

#[derive(Debug, Clone)]
struct Dropout {
    p: f64,
    rng: Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let fresh = mode == Mode::Train
            || self.mask.as_ref().map_or(true, |m| m.len() != x.len());
        if fresh {
            let keep = 1.0 / (1.0 - self.p);
            let p = self.p;
            let rng = &mut self.rng;
            self.mask = Some(
                (0..x.len())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect(),
            );
        }
        let mask = self.mask.as_ref().unwrap();
        let data = x.data.iter().zip(mask).map(|(v, m)| v * m).collect();
        Tensor::new(x.shape.clone(), data)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        match &self.mask {
            None => Ok(g.clone()),
            Some(m) => Tensor::new(
                g.shape.clone(),
                g.data.iter().zip(m).map(|(v, m)| v * m).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    d_in: usize,
    d_out: usize,
    w: Param,
    b: Param,
    input: Option<Tensor>,
}

impl Dense {
    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let (bs, d) = x.dims2("dense")?;
        if d != self.d_in {
            return Err(Error::Shape(format!("dense expects {} inputs, got {d}", self.d_in)));
        }
        let mut y = Vec::with_capacity(bs * self.d_out);
        for xb in x.data.chunks(d) {
            for o in 0..self.d_out {
                let wo = &self.w.value.data[o * d..][..d];
                y.push(self.b.value.data[o] + xb.iter().zip(wo).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        Tensor::new(vec![bs, self.d_out], y)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let x = self.input.as_ref().ok_or_else(no_cache)?;
        let d = self.d_in;
        let mut gx = vec![0.0; x.len()];
        for (b, xb) in x.data.chunks(d).enumerate() {
            let gxb = &mut gx[b * d..][..d];
            for o in 0..self.d_out {
                let go = g.data[b * self.d_out + o];
                self.b.grad.data[o] += go;
                let wo = &self.w.value.data[o * d..][..d];
                let gwo = &mut self.w.grad.data[o * d..][..d];
                for j in 0..d {
                    gwo[j] += go * xb[j];
                    gxb[j] += go * wo[j];
                }
            }
        }
        Tensor::new(x.shape.clone(), gx)
    }
}

/// Per-step values kept for backpropagation through time.
#[derive(Debug, Clone, Default)]
struct StepCache {
    /// Concatenated `[x_t; h_{t-1}]`.
    z: Vec<f64>,
    /// Activated gates, cell-specific layout.
    gates: Vec<f64>,
    /// Vanilla/GRU: h_t. LSTM: c_t.
    state: Vec<f64>,
    /// GRU only: `[x_t; r ⊙ h_{t-1}]`.
    zn: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Recurrent {
    kind: CellKind,
    input: usize,
    hidden: usize,
    /// Gate weights on `[x; h]`, shape `gates·H × (I+H)`.
    w: Param,
    b: Param,
    /// GRU candidate weights on `[x; r ⊙ h]`.
    wn: Option<Param>,
    bn: Option<Param>,
    /// Per sample, per step.
    cache: Option<(Vec<usize>, Vec<Vec<StepCache>>)>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine_into(w: &[f64], b: &[f64], z: &[f64], out: &mut [f64]) {
    let n = z.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + w[r * n..(r + 1) * n].iter().zip(z).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// `gw += da zᵀ`, `gb += da`, `gz += Wᵀ da`.
fn affine_back(w: &[f64], gw: &mut [f64], gb: &mut [f64], z: &[f64], da: &[f64], gz: &mut [f64]) {
    let n = z.len();
    for (r, &d) in da.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[r] += d;
        let wr = &w[r * n..(r + 1) * n];
        let gwr = &mut gw[r * n..(r + 1) * n];
        for j in 0..n {
            gwr[j] += d * z[j];
            gz[j] += d * wr[j];
        }
    }
}

impl Recurrent {
    /// Runs one sample's sequence (`channels × length`, row-major) and
    /// returns the last hidden state plus the step caches when requested.
    fn run(&self, xs: &[f64], len: usize, record: bool) -> (Vec<f64>, Vec<StepCache>) {
        let (i_n, h_n) = (self.input, self.hidden);
        let mut h = vec![0.0; h_n];
        let mut c = vec![0.0; h_n];
        let mut steps = Vec::with_capacity(if record { len } else { 0 });
        let mut a = vec![0.0; self.kind.gates() * h_n];
        let mut z = vec![0.0; i_n + h_n];
        for t in 0..len {
            for ch in 0..i_n {
                z[ch] = xs[ch * len + t];
            }
            z[i_n..].copy_from_slice(&h);
            affine_into(&self.w.value.data, &self.b.value.data, &z, &mut a);
            let mut step = StepCache::default();
            match self.kind {
                CellKind::Vanilla => {
                    for (hv, av) in h.iter_mut().zip(&a) {
                        *hv = av.tanh();
                    }
                    if record {
                        step.state = h.clone();
                    }
                }
                CellKind::Lstm => {
                    for j in 0..h_n {
                        let ig = sigmoid(a[j]);
                        let fg = sigmoid(a[h_n + j]);
                        let gg = a[2 * h_n + j].tanh();
                        let og = sigmoid(a[3 * h_n + j]);
                        a[j] = ig;
                        a[h_n + j] = fg;
                        a[2 * h_n + j] = gg;
                        a[3 * h_n + j] = og;
                        c[j] = fg * c[j] + ig * gg;
                        h[j] = og * c[j].tanh();
                    }
                    if record {
                        step.gates = a.clone();
                        step.state = c.clone();
                    }
                }
                CellKind::Gru => {
                    let wn = self.wn.as_ref().unwrap();
                    let bn = self.bn.as_ref().unwrap();
                    for v in a.iter_mut() {
                        *v = sigmoid(*v);
                    }
                    let mut zn = z.clone();
                    for j in 0..h_n {
                        zn[i_n + j] = a[h_n + j] * h[j];
                    }
                    let mut n = vec![0.0; h_n];
                    affine_into(&wn.value.data, &bn.value.data, &zn, &mut n);
                    for j in 0..h_n {
                        let nv = n[j].tanh();
                        n[j] = nv;
                        h[j] = (1.0 - a[j]) * nv + a[j] * h[j];
                    }
                    if record {
                        step.gates = a.iter().copied().chain(n).collect();
                        step.zn = zn;
                        step.state = h.clone();
                    }
                }
            }
            if record {
                step.z = z.clone();
                steps.push(step);
            }
        }
        (h, steps)
    }

    fn compute(&self, x: &Tensor, record: bool) -> Result<(Tensor, Vec<Vec<StepCache>>)> {
        let (bs, c, l) = x.dims3("recurrent")?;
        if c != self.input {
            return Err(Error::Shape(format!(
                "recurrent cell expects {} channels, got {c}",
                self.input
            )));
        }
        let mut out = Vec::with_capacity(bs * self.hidden);
        let mut caches = Vec::new();
        for xb in x.data.chunks(c * l) {
            let (h, steps) = self.run(xb, l, record);
            out.extend(h);
            if record {
                caches.push(steps);
            }
        }
        Ok((Tensor::new(vec![bs, self.hidden], out)?, caches))
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let (shape, caches) = self.cache.take().ok_or_else(no_cache)?;
        let (i_n, h_n) = (self.input, self.hidden);
        let len = shape[2];
        let mut gx = Tensor::zeros(&shape);
        for (b, steps) in caches.iter().enumerate() {
            let mut dh = g.data[b * h_n..(b + 1) * h_n].to_vec();
            let mut dc = vec![0.0; h_n];
            let gxb = &mut gx.data[b * i_n * len..(b + 1) * i_n * len];
            for t in (0..len).rev() {
                let st = &steps[t];
                let mut dz = vec![0.0; i_n + h_n];
                match self.kind {
                    CellKind::Vanilla => {
                        let da: Vec<f64> = (0..h_n)
                            .map(|j| dh[j] * (1.0 - st.state[j] * st.state[j]))
                            .collect();
                        affine_back(
                            &self.w.value.data,
                            &mut self.w.grad.data,
                            &mut self.b.grad.data,
                            &st.z,
                            &da,
                            &mut dz,
                        );
                    }
                    CellKind::Lstm => {
                        let gt = &st.gates;
                        let c_prev: Vec<f64> = if t == 0 {
                            vec![0.0; h_n]
                        } else {
                            steps[t - 1].state.clone()
                        };
                        let mut da = vec![0.0; 4 * h_n];
                        for j in 0..h_n {
                            let (ig, fg, gg, og) =
                                (gt[j], gt[h_n + j], gt[2 * h_n + j], gt[3 * h_n + j]);
                            let tc = st.state[j].tanh();
                            let dct = dc[j] + dh[j] * og * (1.0 - tc * tc);
                            da[j] = dct * gg * ig * (1.0 - ig);
                            da[h_n + j] = dct * c_prev[j] * fg * (1.0 - fg);
                            da[2 * h_n + j] = dct * ig * (1.0 - gg * gg);
                            da[3 * h_n + j] = dh[j] * tc * og * (1.0 - og);
                            dc[j] = dct * fg;
                        }
                        affine_back(
                            &self.w.value.data,
                            &mut self.w.grad.data,
                            &mut self.b.grad.data,
                            &st.z,
                            &da,
                            &mut dz,
                        );
                    }
                    CellKind::Gru => {
                        let gt = &st.gates;
                        let h_prev = &st.z[i_n..];
                        let wn = self.wn.as_mut().unwrap();
                        let bn = self.bn.as_mut().unwrap();
                        let mut dan = vec![0.0; h_n];
                        let mut dzr = vec![0.0; 2 * h_n];
                        for j in 0..h_n {
                            let (zg, nv) = (gt[j], gt[2 * h_n + j]);
                            dan[j] = dh[j] * (1.0 - zg) * (1.0 - nv * nv);
                            dzr[j] = dh[j] * (h_prev[j] - nv) * zg * (1.0 - zg);
                        }
                        let mut dzn = vec![0.0; i_n + h_n];
                        affine_back(
                            &wn.value.data,
                            &mut wn.grad.data,
                            &mut bn.grad.data,
                            &st.zn,
                            &dan,
                            &mut dzn,
                        );
                        for j in 0..h_n {
                            let rg = gt[h_n + j];
                            dzr[h_n + j] = dzn[i_n + j] * h_prev[j] * rg * (1.0 - rg);
                            dz[i_n + j] += dh[j] * gt[j] + dzn[i_n + j] * rg;
                        }
                        for ch in 0..i_n {
                            dz[ch] += dzn[ch];
                        }
                        affine_back(
                            &self.w.value.data,
                            &mut self.w.grad.data,
                            &mut self.b.grad.data,
                            &st.z,
                            &dzr,
                            &mut dz,
                        );
                    }
                }
                for ch in 0..i_n {
                    gxb[ch * len + t] += dz[ch];
                }
                dh.copy_from_slice(&dz[i_n..]);
            }
        }
        Ok(gx)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv1d(Conv1d),
    BatchNorm1d(BatchNorm1d),
    Relu(Option<Vec<bool>>),
    MaxPool1d(MaxPool1d),
    Flatten(Option<Vec<usize>>),
    Dropout(Dropout),
    Dense(Dense),
    Recurrent(Recurrent),
}

fn no_cache() -> Error {
    Error::State("backward called without a preceding training forward".into())
}

fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn flatten(x: &Tensor) -> Tensor {
    let b = x.shape.first().copied().unwrap_or(0);
    let rest = if b == 0 { 0 } else { x.len() / b };
    Tensor {
        shape: vec![b, rest],
        data: x.data.clone(),
    }
}

impl Layer {
    fn build(spec: &LayerSpec, index: usize, r: &mut Rng) -> Result<Layer> {
        Ok(match *spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::Config(format!("layer {index}: conv1d sizes must be positive")));
                }
                Layer::Conv1d(Conv1d {
                    in_ch: in_channels,
                    out_ch: out_channels,
                    kernel,
                    stride,
                    w: Param::uniform(
                        format!("{index}.conv.w"),
                        &[out_channels, in_channels, kernel],
                        in_channels * kernel,
                        r,
                    ),
                    b: Param::constant(format!("{index}.conv.b"), &[out_channels], 0.0),
                    input: None,
                })
            }
            LayerSpec::BatchNorm1d { channels } => Layer::BatchNorm1d(BatchNorm1d {
                channels,
                gamma: Param::constant(format!("{index}.bn.gamma"), &[channels], 1.0),
                beta: Param::constant(format!("{index}.bn.beta"), &[channels], 0.0),
                running_mean: vec![0.0; channels],
                running_var: vec![1.0; channels],
                stats_ready: false,
                cache: None,
            }),
            LayerSpec::Relu => Layer::Relu(None),
            LayerSpec::MaxPool1d { window } => {
                if window == 0 {
                    return Err(Error::Config(format!("layer {index}: pool window must be positive")));
                }
                Layer::MaxPool1d(MaxPool1d {
                    window,
                    cache: None,
                })
            }
            LayerSpec::Flatten => Layer::Flatten(None),
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "layer {index}: dropout rate {p} outside [0, 1)"
                    )));
                }
                Layer::Dropout(Dropout {
                    p,
                    rng: rng::stream(r.random(), index as u64),
                    mask: None,
                })
            }
            LayerSpec::Dense { d_in, d_out } => {
                if d_in == 0 || d_out == 0 {
                    return Err(Error::Config(format!("layer {index}: dense sizes must be positive")));
                }
                Layer::Dense(Dense {
                    d_in,
                    d_out,
                    w: Param::uniform(format!("{index}.dense.w"), &[d_out, d_in], d_in, r),
                    b: Param::constant(format!("{index}.dense.b"), &[d_out], 0.0),
                    input: None,
                })
            }
            LayerSpec::Recurrent {
                kind,
                input,
                hidden,
            } => {
                if input == 0 || hidden == 0 {
                    return Err(Error::Config(format!(
                        "layer {index}: recurrent sizes must be positive"
                    )));
                }
                let fan = input + hidden;
                let rows = kind.gates() * hidden;
                let gru = kind == CellKind::Gru;
                Layer::Recurrent(Recurrent {
                    kind,
                    input,
                    hidden,
                    w: Param::uniform(format!("{index}.rnn.w"), &[rows, fan], fan, r),
                    b: Param::constant(format!("{index}.rnn.b"), &[rows], 0.0),
                    wn: gru.then(|| Param::uniform(format!("{index}.rnn.wn"), &[hidden, fan], fan, r)),
                    bn: gru.then(|| Param::constant(format!("{index}.rnn.bn"), &[hidden], 0.0)),
                    cache: None,
                })
            }
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.eval(x);
        }
        match self {
            Layer::Conv1d(l) => {
                let y = l.compute(x)?;
                l.input = Some(x.clone());
                Ok(y)
            }
            Layer::BatchNorm1d(l) => l.forward(x, mode),
            Layer::Relu(mask) => {
                *mask = Some(x.data.iter().map(|&v| v > 0.0).collect());
                Ok(relu(x))
            }
            Layer::MaxPool1d(l) => {
                let (y, arg) = l.compute(x)?;
                l.cache = Some((x.shape.clone(), arg));
                Ok(y)
            }
            Layer::Flatten(shape) => {
                *shape = Some(x.shape.clone());
                Ok(flatten(x))
            }
            Layer::Dropout(l) => l.forward(x, mode),
            Layer::Dense(l) => {
                let y = l.compute(x)?;
                l.input = Some(x.clone());
                Ok(y)
            }
            Layer::Recurrent(l) => {
                let (y, caches) = l.compute(x, true)?;
                l.cache = Some((x.shape.clone(), caches));
                Ok(y)
            }
        }
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv1d(l) => l.compute(x),
            Layer::BatchNorm1d(l) => {
                x.dims3("batchnorm1d")?;
                if x.shape[1] != l.channels {
                    return Err(Error::Shape(format!(
                        "batchnorm1d expects {} channels, got {}",
                        l.channels, x.shape[1]
                    )));
                }
                l.eval(x)
            }
            Layer::Relu(_) => Ok(relu(x)),
            Layer::MaxPool1d(l) => Ok(l.compute(x)?.0),
            Layer::Flatten(_) => Ok(flatten(x)),
            Layer::Dropout(_) => Ok(x.clone()),
            Layer::Dense(l) => l.compute(x),
            Layer::Recurrent(l) => Ok(l.compute(x, false)?.0),
        }
    }

    fn backward(&mut self, g: &Tensor, need_input: bool) -> Result<Tensor> {
        match self {
            Layer::Conv1d(l) => l.backward(g, need_input),
            Layer::BatchNorm1d(l) => l.backward(g),
            Layer::Relu(mask) => {
                let mask = mask.as_ref().ok_or_else(no_cache)?;
                Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(mask)
                        .map(|(&v, &on)| if on { v } else { 0.0 })
                        .collect(),
                )
            }
            Layer::MaxPool1d(l) => l.backward(g),
            Layer::Flatten(shape) => {
                let shape = shape.as_ref().ok_or_else(no_cache)?;
                Tensor::new(shape.clone(), g.data.clone())
            }
            Layer::Dropout(l) => l.backward(g),
            Layer::Dense(l) => l.backward(g),
            Layer::Recurrent(l) => l.backward(g),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv1d(l) => vec![&l.w, &l.b],
            Layer::BatchNorm1d(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.w, &l.b],
            Layer::Recurrent(l) => {
                let mut v = vec![&l.w, &l.b];
                v.extend(l.wn.iter().chain(l.bn.iter()));
                v
            }
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv1d(l) => vec![&mut l.w, &mut l.b],
            Layer::BatchNorm1d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.w, &mut l.b],
            Layer::Recurrent(l) => {
                let mut v = vec![&mut l.w, &mut l.b];
                v.extend(l.wn.iter_mut().chain(l.bn.iter_mut()));
                v
            }
            _ => vec![],
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Layer::Conv1d(l) => l.input = None,
            Layer::BatchNorm1d(l) => l.cache = None,
            Layer::Relu(m) => *m = None,
            Layer::MaxPool1d(l) => l.cache = None,
            Layer::Flatten(s) => *s = None,
            Layer::Dropout(l) => l.mask = None,
            Layer::Dense(l) => l.input = None,
            Layer::Recurrent(l) => l.cache = None,
        }
    }
}

/// Network architecture: per-sample input shape plus the layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Per-sample input shape, `[channels, length]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// Per-sample shapes after each layer, starting with the input.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut trace = vec![self.input_shape.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let next = l
                .output_shape(trace.last().unwrap())
                .map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer_name(l))))?;
            trace.push(next);
        }
        Ok(trace)
    }
}

fn layer_name(l: &LayerSpec) -> &'static str {
    match l {
        LayerSpec::Conv1d { .. } => "conv1d",
        LayerSpec::BatchNorm1d { .. } => "batchnorm1d",
        LayerSpec::Relu => "relu",
        LayerSpec::MaxPool1d { .. } => "maxpool1d",
        LayerSpec::Flatten => "flatten",
        LayerSpec::Dropout { .. } => "dropout",
        LayerSpec::Dense { .. } => "dense",
        LayerSpec::Recurrent { .. } => "recurrent",
    }
}

/// Sequential stack of layers producing logits.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds the network with fan-in uniform weights drawn from `seed`.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.shape_trace()?;
        let mut r = rng::stream(seed, 0x6e6e);
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| Layer::build(l, i, &mut r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn n_outputs(&self) -> usize {
        let trace = self.spec.shape_trace().expect("checked at build");
        trace.last().unwrap().iter().product()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.data.fill(0.0);
        }
    }

    /// Reseeds every dropout layer's mask stream.
    pub fn reseed_dropout(&mut self, seed: u64) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Layer::Dropout(d) = l {
                d.rng = rng::stream(seed, i as u64);
                d.mask = None;
            }
        }
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape.len() != self.spec.input_shape.len() + 1
            || x.shape[1..] != self.spec.input_shape[..]
        {
            return Err(Error::Shape(format!(
                "network expects batch x {:?}, got {:?}",
                self.spec.input_shape, x.shape
            )));
        }
        Ok(())
    }

    /// Forward pass to logits, caching what backward needs unless `Eval`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            h = l.forward(&h, mode)?;
            h.check_finite(&format!("forward, layer {i}"))?;
        }
        Ok(h)
    }

    /// Eval-mode logits without touching any layer state.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.eval(&h)?;
            h.check_finite(&format!("inference, layer {i}"))?;
        }
        Ok(h)
    }

    /// Accumulates parameter gradients from `d loss / d logits` and returns
    /// the gradient with respect to the input.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        self.backward_inner(grad_logits, true)
    }

    /// With `need_input` false, a leading conv layer skips its input
    /// gradient and the returned tensor is empty.
    fn backward_inner(&mut self, grad_logits: &Tensor, need_input: bool) -> Result<Tensor> {
        let mut g = grad_logits.clone();
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            g = l.backward(&g, need_input || i > 0)?;
            g.check_finite(&format!("backward, layer {i}"))?;
        }
        Ok(g)
    }

    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        let weights: Vec<&Tensor> = self
            .params()
            .into_iter()
            .filter(|p| p.decay)
            .map(|p| &p.value)
            .collect();
        l2_penalty(&weights, lambda)
    }

    /// Sum of squared weights (the unscaled penalty).
    pub fn weight_sq_norm(&self) -> f64 {
        self.l2_penalty(1.0)
    }

    /// Zeroes gradients, then evaluates the penalized objective
    /// `CCE + λ Σ‖w‖²` on one batch and fills every gradient slot.
    /// Returns (objective, softmax probabilities).
    pub fn loss_and_grad(
        &mut self,
        x: &Tensor,
        one_hot: &Tensor,
        lambda: f64,
        mode: Mode,
    ) -> Result<(f64, Tensor)> {
        if mode == Mode::Eval {
            return Err(Error::State("gradients need Train or Probe mode".into()));
        }
        self.zero_grads();
        let logits = self.forward(x, mode)?;
        let probs = softmax(&logits)?;
        let loss = cce_loss(&probs, one_hot)? + self.l2_penalty(lambda);
        self.backward_inner(&cce_softmax_grad(&probs, one_hot)?, false)?;
        for p in self.params_mut() {
            if p.decay {
                for (g, w) in p.grad.data.iter_mut().zip(&p.value.data) {
                    *g += 2.0 * lambda * w;
                }
            }
        }
        Ok((loss, probs))
    }

    /// Penalized objective without gradients, in Probe mode.
    pub fn probe_loss(&mut self, x: &Tensor, one_hot: &Tensor, lambda: f64) -> Result<f64> {
        let logits = self.forward(x, Mode::Probe)?;
        Ok(cce_loss(&softmax(&logits)?, one_hot)? + self.l2_penalty(lambda))
    }

    pub fn adam_step(&mut self, state: &mut AdamState) -> Result<()> {
        let (mut values, grads): (Vec<&mut Tensor>, Vec<&Tensor>) = self
            .params_mut()
            .into_iter()
            .map(|p| (&mut p.value, &p.grad))
            .unzip();
        adam_step(state, &mut values, &grads)?;
        for p in self.params() {
            p.value.check_finite(&format!("Adam update of {}", p.name))?;
        }
        Ok(())
    }

    fn bn_layers(&self) -> impl Iterator<Item = &BatchNorm1d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm1d(b) => Some(b),
            _ => None,
        })
    }

    /// Whether every batch-norm layer holds running statistics.
    pub fn is_trained(&self) -> bool {
        self.bn_layers().all(|b| b.stats_ready)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let desc = serde_json::to_vec(&self.spec).map_err(|e| Error::Serialize(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(desc.len() as u64).to_le_bytes());
        out.extend_from_slice(&desc);
        for p in self.params() {
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in self.bn_layers() {
            out.push(u8::from(b.stats_ready));
            for v in b.running_mean.iter().chain(&b.running_var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
        let bad = |m: &str| Error::Integrity(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing SCUNET01 magic"));
        }
        let dlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let desc = bytes
            .get(16..16usize.saturating_add(dlen))
            .ok_or_else(|| bad("descriptor truncated"))?;
        let spec: NetSpec = serde_json::from_slice(desc)
            .map_err(|e| bad(&format!("bad descriptor: {e}")))?;
        let mut net = Network::new(spec, 0)?;
        let mut cur = Cursor {
            bytes,
            pos: 16 + dlen,
        };
        for p in net.params_mut() {
            for v in p.value.data.iter_mut() {
                *v = cur.f64()?;
            }
        }
        for l in net.layers.iter_mut() {
            if let Layer::BatchNorm1d(b) = l {
                b.stats_ready = cur.byte()? == 1;
                for v in b.running_mean.iter_mut().chain(b.running_var.iter_mut()) {
                    *v = cur.f64()?;
                }
                if b.running_var.iter().any(|&v| v < 0.0) {
                    return Err(bad("negative running variance"));
                }
            }
        }
        let pos = cur.pos;
        if pos != bytes.len() {
            return Err(bad(&format!("{} trailing bytes", bytes.len() - pos)));
        }
        for p in net.params() {
            p.value.check_finite(&p.name).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Network::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Integrity("checkpoint: parameters truncated".into()))?;
        self.pos += n;
        Ok(chunk)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Row-wise softmax of `batch × K` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2("softmax")?;
    logits.check_finite("softmax input")?;
    let mut out = logits.clone();
    for row in out.data.chunks_mut(k) {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - top).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Config(format!("label {y} outside 0..{k}")));
        }
        t.data[i * k + y] = 1.0;
    }
    Ok(t)
}

fn check_targets(probs: &Tensor, one_hot: &Tensor) -> Result<usize> {
    let (b, k) = probs.dims2("cross-entropy")?;
    if one_hot.shape != probs.shape {
        return Err(Error::Shape(format!(
            "labels {:?} do not match probabilities {:?}",
            one_hot.shape, probs.shape
        )));
    }
    for (i, row) in one_hot.data.chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Config(format!("label row {i} is not one-hot")));
        }
    }
    for (i, row) in probs.data.chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!("probability row {i} sums to {s}")));
        }
    }
    Ok(b)
}

/// Mean over the batch of `−Σ_k y_k log ŷ_k`.
pub fn cce_loss(probs: &Tensor, one_hot: &Tensor) -> Result<f64> {
    let b = check_targets(probs, one_hot)?;
    let total: f64 = probs
        .data
        .iter()
        .zip(&one_hot.data)
        .filter(|(_, &y)| y == 1.0)
        .map(|(&p, _)| -p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
        .sum();
    Ok(total / b as f64)
}

/// Gradient of softmax followed by CCE with respect to the logits.
pub fn cce_softmax_grad(probs: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    let b = check_targets(probs, one_hot)? as f64;
    Tensor::new(
        probs.shape.clone(),
        probs
            .data
            .iter()
            .zip(&one_hot.data)
            .map(|(p, y)| (p - y) / b)
            .collect(),
    )
}

/// `λ Σ ‖w‖²` over the given weight tensors.
pub fn l2_penalty(weights: &[&Tensor], lambda: f64) -> f64 {
    lambda
        * weights
            .iter()
            .map(|w| w.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn ensure(&mut self, shapes: &[Vec<usize>]) -> Result<()> {
        if self.m.is_empty() && self.step == 0 {
            self.m = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            self.v = self.m.clone();
        }
        let same = self.m.len() == shapes.len()
            && self.m.iter().zip(shapes).all(|(t, s)| &t.shape == s);
        if !same {
            return Err(Error::Shape("Adam moments do not match the parameters".into()));
        }
        Ok(())
    }
}

/// One Adam update on free-standing tensors.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
    if params.len() != grads.len()
        || params.iter().zip(grads).any(|(p, g)| p.shape != g.shape)
    {
        return Err(Error::Shape("parameter and gradient shapes differ".into()));
    }
    state.ensure(&params.iter().map(|p| p.shape.clone()).collect::<Vec<_>>())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        for j in 0..p.data.len() {
            let gj = g.data[j];
            let m = &mut state.m[k].data[j];
            *m = state.beta1 * *m + (1.0 - state.beta1) * gj;
            let v = &mut state.v[k].data[j];
            *v = state.beta2 * *v + (1.0 - state.beta2) * gj * gj;
            p.data[j] -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor of [`relative_error`] inside [`grad_check`]: gradients
/// far below the finite-difference resolution are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares every analytic parameter gradient of the penalized objective
/// with a central difference of step `epsilon`, in Probe mode, and returns
/// the maximal relative error. Layer state is restored afterwards.
pub fn grad_check(
    net: &mut Network,
    input: &Tensor,
    labels: &[usize],
    epsilon: f64,
    lambda: f64,
) -> Result<f64> {
    let snapshot = net.clone();
    let k = net.n_outputs();
    let y = one_hot(labels, k)?;
    // Draws the dropout masks that the probes then reuse.
    net.forward(input, Mode::Probe)?;
    net.loss_and_grad(input, &y, lambda, Mode::Probe)?;
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.data.clone()).collect();
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = net.params()[pi].value.data[j];
            net.params_mut()[pi].value.data[j] = orig + epsilon;
            let up = net.probe_loss(input, &y, lambda)?;
            net.params_mut()[pi].value.data[j] = orig - epsilon;
            let down = net.probe_loss(input, &y, lambda)?;
            net.params_mut()[pi].value.data[j] = orig;
            let n = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(a, n, GRAD_CHECK_FLOOR));
        }
    }
    *net = snapshot;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::from_seed(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| StandardNormal.sample(&mut r)).collect(),
        )
        .unwrap()
    }

    fn single(spec: LayerSpec, input_shape: Vec<usize>) -> Network {
        Network::new(
            NetSpec {
                input_shape,
                layers: vec![spec],
            },
            1,
        )
        .unwrap()
    }

    fn set(net: &mut Network, idx: usize, values: &[f64]) {
        net.params_mut()[idx].value.data.copy_from_slice(values);
    }

    #[test]
    fn conv_hand_case_and_lengths() {
        let mut net = single(
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: 1,
                kernel: 2,
                stride: 1,
            },
            vec![1, 3],
        );
        set(&mut net, 0, &[1.0, 1.0]);
        let y = net
            .forward(&Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(), Mode::Train)
            .unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);

        let spec = LayerSpec::Conv1d {
            in_channels: 7,
            out_channels: 16,
            kernel: 10,
            stride: 4,
        };
        assert_eq!(spec.output_shape(&[7, 1500]).unwrap(), vec![16, 373]);
        assert!(spec.output_shape(&[7, 9]).is_err());
        let pool = LayerSpec::MaxPool1d { window: 2 };
        assert_eq!(pool.output_shape(&[16, 373]).unwrap(), vec![16, 186]);
    }

    #[test]
    fn conv_sum_gradient_matches_differences() {
        let mut net = single(
            LayerSpec::Conv1d {
                in_channels: 3,
                out_channels: 2,
                kernel: 4,
                stride: 3,
            },
            vec![3, 20],
        );
        let x = randn(&[2, 3, 20], 2);
        let y = net.forward(&x, Mode::Train).unwrap();
        net.zero_grads();
        net.backward(&Tensor::new(y.shape.clone(), vec![1.0; y.len()]).unwrap())
            .unwrap();
        let grads = net.params()[0].grad.data.clone();
        for (j, &a) in grads.iter().enumerate() {
            let orig = net.params()[0].value.data[j];
            let mut f = |v: f64| {
                net.params_mut()[0].value.data[j] = v;
                net.infer_sum(&x)
            };
            let n = (f(orig + 1e-6) - f(orig - 1e-6)) / 2e-6;
            net.params_mut()[0].value.data[j] = orig;
            assert!(relative_error(a, n, 1e-6) < 1e-6, "{a} vs {n}");
        }
    }

    impl Network {
        /// Sum of outputs using training-path arithmetic without caching.
        fn infer_sum(&self, x: &Tensor) -> f64 {
            let mut h = x.clone();
            for l in &self.layers {
                h = match l {
                    Layer::Conv1d(c) => c.compute(&h).unwrap(),
                    Layer::MaxPool1d(p) => p.compute(&h).unwrap().0,
                    _ => unreachable!(),
                };
            }
            h.data.iter().sum()
        }
    }

    #[test]
    fn batchnorm_cases() {
        let mut net = single(LayerSpec::BatchNorm1d { channels: 2 }, vec![2, 5]);
        let c = Tensor::new(vec![3, 2, 5], vec![4.2; 30]).unwrap();
        assert!(matches!(net.infer(&c), Err(Error::State(_))));
        let y = net.forward(&c, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-3));
        set(&mut net, 1, &[5.0, 5.0]);
        let y = net.forward(&c, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| (v - 5.0).abs() < 1e-3));
        set(&mut net, 1, &[0.0, 0.0]);

        let mut net = single(LayerSpec::BatchNorm1d { channels: 2 }, vec![2, 50]);
        let x = randn(&[4, 2, 50], 3);
        let y = net.forward(&x, Mode::Train).unwrap();
        net.infer(&x).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 2 + ch) * 50..][..50].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 200.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-9);
            // The ε in the denominator shrinks the variance by about ε/σ².
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
        let one = Tensor::zeros(&[1, 2, 1]);
        let mut tiny = single(LayerSpec::BatchNorm1d { channels: 2 }, vec![2, 1]);
        assert!(tiny.forward(&one, Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_moments_of_normalized_input() {
        let mut net = single(LayerSpec::BatchNorm1d { channels: 3 }, vec![3, 40]);
        let x = randn(&[5, 3, 40], 4);
        net.forward(&x, Mode::Train).unwrap();
        let Layer::BatchNorm1d(bn) = &net.layers[0] else {
            unreachable!()
        };
        let (xhat, inv_std) = bn.cache.as_ref().unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..5).flat_map(|b| xhat.data()[(b * 3 + ch) * 40..][..40].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            let var_x = 1.0 / inv_std[ch].powi(2) - BN_EPS;
            assert!(m.abs() < 1e-9);
            assert!((v * (var_x + BN_EPS) / var_x - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_relu_flatten() {
        let mut net = single(LayerSpec::MaxPool1d { window: 2 }, vec![1, 4]);
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(net.forward(&x, Mode::Train).unwrap().data(), &[3.0, 5.0]);
        let gx = net.backward(&Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 2.0]);
        let tie = Tensor::new(vec![1, 1, 4], vec![2.0, 2.0, 0.0, 0.0]).unwrap();
        net.forward(&tie, Mode::Train).unwrap();
        let gx = net.backward(&Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.0, 1.0, 0.0]);

        assert_eq!(relu(&Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap()).data(), &[0.0, 3.0]);
        let f = flatten(&Tensor::zeros(&[2, 3, 4]));
        assert_eq!(f.shape(), &[2, 12]);
    }

    #[test]
    fn dropout_cases() {
        let x = randn(&[2, 50], 5);
        let mut id = single(LayerSpec::Dropout { p: 0.0 }, vec![50]);
        assert_eq!(id.forward(&x, Mode::Train).unwrap(), x);
        assert_eq!(id.infer(&x).unwrap(), x);
        assert!(Network::new(
            NetSpec {
                input_shape: vec![3],
                layers: vec![LayerSpec::Dropout { p: 1.0 }]
            },
            0
        )
        .is_err());

        let mut d = single(LayerSpec::Dropout { p: 0.5 }, vec![4]);
        let x = Tensor::new(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut acc = [0.0; 4];
        let trials = 100_000;
        for _ in 0..trials {
            let y = d.forward(&x, Mode::Train).unwrap();
            for (a, v) in acc.iter_mut().zip(y.data()) {
                *a += v / trials as f64;
            }
        }
        for (a, v) in acc.iter().zip(x.data()) {
            assert!((a - v).abs() < 0.02 * v.abs(), "{a} vs {v}");
        }
        assert_eq!(d.infer(&x).unwrap(), x);
    }

    #[test]
    fn softmax_cases() {
        let z = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        assert_eq!(softmax(&z).unwrap().data(), &[0.25; 4]);
        let z = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax(&z).unwrap();
        for (a, b) in p.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((a - b).abs() < 5e-9);
        }
        let shifted = Tensor::new(vec![1, 3], vec![101.0, 102.0, 103.0]).unwrap();
        for (a, b) in softmax(&shifted).unwrap().data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let big = Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap();
        assert_eq!(softmax(&big).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn cce_cases() {
        let y = one_hot(&[2, 0], 4).unwrap();
        let uniform = Tensor::new(vec![2, 4], vec![0.25; 8]).unwrap();
        assert!((cce_loss(&uniform, &y).unwrap() - 4f64.ln()).abs() < 1e-12);
        let perfect = y.clone();
        assert!(cce_loss(&perfect, &y).unwrap() <= 1e-10);
        let bad = Tensor::new(vec![2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(cce_loss(&uniform, &bad), Err(Error::Config(_))));
        assert!(one_hot(&[4], 4).is_err());

        // Logit gradient against differences of the composed loss.
        let z = randn(&[3, 4], 6);
        let y = one_hot(&[1, 3, 0], 4).unwrap();
        let g = cce_softmax_grad(&softmax(&z).unwrap(), &y).unwrap();
        for j in 0..z.len() {
            let eval = |d: f64| {
                let mut zz = z.clone();
                zz.data_mut()[j] += d;
                cce_loss(&softmax(&zz).unwrap(), &y).unwrap()
            };
            let n = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!(relative_error(g.data()[j], n, 1e-6) < 1e-6);
        }
    }

    #[test]
    fn l2_cases() {
        assert_eq!(l2_penalty(&[&Tensor::zeros(&[3, 3])], 0.5), 0.0);
        let w = Tensor::new(vec![1], vec![3.0]).unwrap();
        assert_eq!(l2_penalty(&[&w], 1.0), 9.0);
        let net = Network::new(
            NetSpec {
                input_shape: vec![3],
                layers: vec![LayerSpec::Dense { d_in: 3, d_out: 2 }],
            },
            2,
        )
        .unwrap();
        let w: f64 = net.params()[0].value.data().iter().map(|v| v * v).sum();
        assert!((net.l2_penalty(0.1) - 0.1 * w).abs() < 1e-15);
    }

    #[test]
    fn adam_cases() {
        let mut st = AdamState::new(0.01);
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        adam_step(&mut st, &mut [&mut p], &[&zero]).unwrap();
        assert_eq!(p.data(), &[1.0, -1.0]);
        assert_eq!(st.step, 1);

        let mut st = AdamState::new(0.01);
        let g = Tensor::new(vec![2], vec![0.3, -7.0]).unwrap();
        adam_step(&mut st, &mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - (1.0 - 0.01)).abs() < 0.01 * 1e-6);
        assert!((p.data()[1] - (-1.0 + 0.01)).abs() < 0.01 * 1e-6);

        let mut st = AdamState::new(0.1);
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        for _ in 0..100 {
            let g = Tensor::new(vec![1], vec![2.0 * w.data()[0]]).unwrap();
            adam_step(&mut st, &mut [&mut w], &[&g]).unwrap();
        }
        assert!(w.data()[0].abs() < 0.05, "{}", w.data()[0]);
        assert_eq!(st.step, 100);
        assert!(st.v.iter().all(|t| t.data().iter().all(|&v| v >= 0.0)));
        assert!(adam_step(&mut st, &mut [&mut w], &[&zero]).is_err());
    }

    fn rnn_net(kind: CellKind, input: usize, hidden: usize, len: usize) -> Network {
        Network::new(
            NetSpec {
                input_shape: vec![input, len],
                layers: vec![
                    LayerSpec::Recurrent {
                        kind,
                        input,
                        hidden,
                    },
                    LayerSpec::Dense {
                        d_in: hidden,
                        d_out: 4,
                    },
                ],
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn vanilla_zero_input() {
        let mut net = rnn_net(CellKind::Vanilla, 3, 5, 6);
        let y = net.forward(&Tensor::zeros(&[2, 3, 6]), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_forget_gate_keeps_cell() {
        // Input 2, hidden 3: gate rows i, f, g, o of width 5 over [x; h].
        let mut net = rnn_net(CellKind::Lstm, 2, 3, 11);
        {
            let mut p = net.params_mut();
            let w = &mut p[0].value.data;
            w.fill(0.0);
            for j in 0..3 {
                // Channel 0 opens the input gate and writes g ≈ 1 at step 0.
                w[j * 5] = 20.0;
                w[(6 + j) * 5] = 5.0;
            }
            let b = &mut p[1].value.data;
            b.fill(0.0);
            b[0..3].fill(-10.0);
            b[3..6].fill(10.0);
        }
        let mut x = Tensor::zeros(&[1, 2, 11]);
        x.data_mut()[0] = 1.0;
        net.forward(&x, Mode::Train).unwrap();
        let Layer::Recurrent(r) = &net.layers[0] else {
            unreachable!()
        };
        let steps = &r.cache.as_ref().unwrap().1[0];
        let c0 = &steps[0].state;
        assert!(c0.iter().all(|v| *v > 0.9));
        let c10 = &steps[10].state;
        for (a, b) in c0.iter().zip(c10) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn recurrent_gradients() {
        for kind in [CellKind::Vanilla, CellKind::Lstm, CellKind::Gru] {
            let mut net = rnn_net(kind, 3, 4, 5);
            let x = randn(&[2, 3, 5], 8);
            let e = grad_check(&mut net, &x, &[1, 3], 1e-5, 0.0).unwrap();
            assert!(e < 1e-5, "{kind:?}: {e}");
        }
    }

    #[test]
    fn dense_softmax_gradient_with_penalty() {
        let mut net = Network::new(
            NetSpec {
                input_shape: vec![6],
                layers: vec![LayerSpec::Dense { d_in: 6, d_out: 4 }],
            },
            3,
        )
        .unwrap();
        let x = randn(&[5, 6], 9);
        for lambda in [0.0, 1e-3, 0.5] {
            let e = grad_check(&mut net, &x, &[0, 1, 2, 3, 1], 1e-6, lambda).unwrap();
            assert!(e < 1e-6, "{e}");
        }
        let empty = NetSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::Relu],
        };
        let mut net = Network::new(empty, 0).unwrap();
        assert_eq!(grad_check(&mut net, &randn(&[1, 4], 1), &[0], 1e-6, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn conv_stack_gradient() {
        let spec = NetSpec {
            input_shape: vec![3, 40],
            layers: vec![
                LayerSpec::Conv1d {
                    in_channels: 3,
                    out_channels: 4,
                    kernel: 5,
                    stride: 2,
                },
                LayerSpec::BatchNorm1d { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Dense { d_in: 36, d_out: 4 },
            ],
        };
        let mut net = Network::new(spec, 4).unwrap();
        let x = randn(&[3, 3, 40], 10);
        let before = net.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        let e = grad_check(&mut net, &x, &[0, 2, 3], 1e-5, 1e-2).unwrap();
        assert!(e < 1e-4, "{e}");
        let after = net.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = rnn_net(CellKind::Gru, 2, 3, 4);
        let spec = NetSpec {
            input_shape: vec![2, 12],
            layers: vec![
                LayerSpec::Conv1d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::BatchNorm1d { channels: 3 },
                LayerSpec::Flatten,
                LayerSpec::Dense { d_in: 30, d_out: 4 },
            ],
        };
        let mut cnn = Network::new(spec, 5).unwrap();
        cnn.forward(&randn(&[2, 2, 12], 1), Mode::Train).unwrap();
        for n in [&mut net, &mut cnn] {
            let bytes = n.to_bytes().unwrap();
            assert_eq!(&bytes[..8], b"SCUNET01");
            let back = Network::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.spec(), n.spec());
            let x = randn(&[1].iter().chain(&n.spec().input_shape).copied().collect::<Vec<_>>(), 2);
            assert_eq!(back.infer(&x).unwrap(), n.infer(&x).unwrap());
            let mut cut = bytes.clone();
            cut.pop();
            assert!(matches!(Network::from_bytes(&cut), Err(Error::Integrity(_))));
            let mut magic = bytes.clone();
            magic[0] = b'X';
            assert!(matches!(Network::from_bytes(&magic), Err(Error::Integrity(_))));
        }
    }
}
