//! The conditional noise predictor.
//!
//! ```text
//! x_ppg ─► fine encoder ────────────────┐
//!       └► coarse encoder ─► 1x1 proj ─(× lambda_ppg)─► + ─► f_ppg ─┐
//! y_t   ─► fine encoder (own weights) ─────────────────────► f_y ───┴► concat ─► + time embedding
//!       ─► bidirectional tanh RNN ─► per-position linear head ─► eps_hat
//! ```
//!
//! Forward and backward passes are written out by hand in `f64`. The
//! forward pass returns an [`Activations`] cache that the backward pass
//! consumes; parameters are never mutated here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("step {t} outside [1, {steps}]")]
    StepOutOfRange { t: usize, steps: usize },
}

/// Architecture hyper-parameters. Everything needed to rebuild the
/// parameter shapes lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fine_kernels: Vec<usize>,
    pub coarse_kernels: Vec<usize>,
    pub coarse_dilation: usize,
    pub branch_channels: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub lambda_ppg: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fine_kernels: vec![1, 3, 5, 7, 9, 11],
            coarse_kernels: vec![3, 5, 7, 9, 11],
            coarse_dilation: 8,
            branch_channels: 8,
            hidden: 64,
            time_dim: 64,
            lambda_ppg: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let err = |m: &str| Err(NnError::Config(m.to_string()));
        if self.fine_kernels.is_empty() || self.coarse_kernels.is_empty() {
            return err("kernel lists must be non-empty");
        }
        if self
            .fine_kernels
            .iter()
            .chain(&self.coarse_kernels)
            .any(|k| k % 2 == 0)
        {
            return err("kernel sizes must be odd");
        }
        if self.coarse_dilation < 2 {
            return err("coarse dilation must be > 1");
        }
        if self.branch_channels == 0 || self.hidden == 0 {
            return err("channel and hidden sizes must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return err("time embedding size must be even and positive");
        }
        if !self.lambda_ppg.is_finite() {
            return err("lambda_ppg must be finite");
        }
        Ok(())
    }

    /// Channels of each fine feature map, `K * branch_channels`.
    pub fn fine_channels(&self) -> usize {
        self.fine_kernels.len() * self.branch_channels
    }

    pub fn coarse_channels(&self) -> usize {
        self.coarse_kernels.len() * self.branch_channels
    }

    /// RNN input width `d = channels(f_ppg) + channels(f_y)`.
    pub fn input_dim(&self) -> usize {
        2 * self.fine_channels()
    }
}

/// `channels x len` activations, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_signal(x: &[f64]) -> Self {
        Self {
            channels: 1,
            len: x.len(),
            data: x.to_vec(),
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    /// Channel-wise concatenation.
    pub fn concat(parts: &[FeatureMap]) -> Result<Self, NnError> {
        let len = parts.first().map_or(0, |p| p.len);
        if parts.iter().any(|p| p.len != len) {
            return Err(NnError::Dimension("concat of unequal lengths".into()));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * len);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self { channels, len, data })
    }

    /// Position-major copy (`len x channels`).
    fn transposed(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for (i, v) in self.channel(c).iter().enumerate() {
                out[i * self.channels + c] = *v;
            }
        }
        out
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// One "same"-padded, optionally dilated 1-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    pub kernel: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out x in x kernel`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvBranch {
    pub fn zeros(kernel: usize, dilation: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            dilation,
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Input span seen by one output sample.
    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    #[inline]
    fn w(&self, o: usize, c: usize, k: usize) -> f64 {
        self.weight[(o * self.in_channels + c) * self.kernel + k]
    }

    /// Valid output index range for tap `k`, and the input shift.
    #[inline]
    fn tap_span(&self, k: usize, len: usize) -> (usize, usize, isize) {
        let r = (self.kernel / 2) as isize;
        let shift = (k as isize - r) * self.dilation as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift.max(0)).max(0) as usize;
        (lo.min(hi), hi, shift)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, NnError> {
        if x.channels != self.in_channels {
            return Err(NnError::Dimension(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        if self.kernel % 2 == 0 || self.dilation == 0 {
            return Err(NnError::Dimension("kernel must be odd, dilation >= 1".into()));
        }
        let len = x.len;
        let mut y = FeatureMap::zeros(self.out_channels, len);
        for o in 0..self.out_channels {
            let out = y.channel_mut(o);
            out.iter_mut().for_each(|v| *v = self.bias[o]);
            for c in 0..self.in_channels {
                let input = x.channel(c);
                for k in 0..self.kernel {
                    let (lo, hi, shift) = self.tap_span(k, len);
                    if lo >= hi {
                        continue;
                    }
                    let src = &input[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    axpy(&mut out[lo..hi], self.w(o, c, k), src);
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight and bias gradients; inputs are data, so no input
    /// gradient is produced.
    fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut ConvBranch) {
        let len = x.len;
        for o in 0..self.out_channels {
            let g = dy.channel(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for c in 0..self.in_channels {
                let input = x.channel(c);
                for k in 0..self.kernel {
                    let (lo, hi, shift) = self.tap_span(k, len);
                    if lo >= hi {
                        continue;
                    }
                    let src = &input[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    grad.weight[(o * self.in_channels + c) * self.kernel + k] += dot(&g[lo..hi], src);
                }
            }
        }
    }
}

/// Parallel convolution branches whose outputs are concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub branches: Vec<ConvBranch>,
}

impl Encoder {
    pub fn zeros(kernels: &[usize], dilation: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            branches: kernels
                .iter()
                .map(|&k| ConvBranch::zeros(k, dilation, in_channels, out_channels))
                .collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.out_channels).sum()
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, NnError> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(x))
            .collect::<Result<Vec<_>, _>>()?;
        FeatureMap::concat(&outs)
    }

    fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut Encoder) {
        let mut c0 = 0;
        for (b, g) in self.branches.iter().zip(&mut grad.branches) {
            let slice = FeatureMap {
                channels: b.out_channels,
                len: dy.len,
                data: dy.data[c0 * dy.len..(c0 + b.out_channels) * dy.len].to_vec(),
            };
            b.backward(x, &slice, g);
            c0 += b.out_channels;
        }
    }
}

/// Multi-scale fine encoder: dilation-1 branches, concatenated.
pub fn fine_encoder(x: &FeatureMap, p: &Encoder) -> Result<FeatureMap, NnError> {
    if p.branches.iter().any(|b| b.dilation != 1) {
        return Err(NnError::Config("fine branches must have dilation 1".into()));
    }
    p.forward(x)
}

/// Multi-scale coarse encoder: dilated branches, concatenated.
pub fn coarse_encoder(x: &FeatureMap, p: &Encoder) -> Result<FeatureMap, NnError> {
    if p.branches.iter().any(|b| b.dilation < 2) {
        return Err(NnError::Config("coarse branches must have dilation > 1".into()));
    }
    p.forward(x)
}

/// Pointwise (1x1) convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out x in`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Pointwise {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut y = FeatureMap::zeros(self.out_channels, x.len);
        for o in 0..self.out_channels {
            let out = y.channel_mut(o);
            out.iter_mut().for_each(|v| *v = self.bias[o]);
            for c in 0..self.in_channels {
                axpy(out, self.weight[o * self.in_channels + c], x.channel(c));
            }
        }
        y
    }

    fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut Pointwise) {
        for o in 0..self.out_channels {
            let g = dy.channel(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for c in 0..self.in_channels {
                grad.weight[o * self.in_channels + c] += dot(g, x.channel(c));
            }
        }
    }
}

/// Sinusoidal features of the diffusion step followed by a learned affine
/// map to the RNN input width; the result is added at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub out: usize,
    /// `dim x out`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TimeEmbedding {
    pub fn zeros(dim: usize, out: usize) -> Self {
        Self {
            dim,
            out,
            weight: vec![0.0; dim * out],
            bias: vec![0.0; out],
        }
    }

    pub fn sinusoid(&self, t: usize) -> Vec<f64> {
        sinusoidal_features(t, self.dim)
    }

    fn project(&self, features: &[f64]) -> Vec<f64> {
        let mut tau = self.bias.clone();
        for (k, f) in features.iter().enumerate() {
            axpy(&mut tau, *f, &self.weight[k * self.out..(k + 1) * self.out]);
        }
        tau
    }
}

/// `[sin(t w_0) .. sin(t w_{h-1}), cos(t w_0) .. cos(t w_{h-1})]` with
/// geometrically spaced `w_k = 10000^(-k/h)`, `h = dim/2`.
pub fn sinusoidal_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Vanilla bidirectional tanh RNN plus the per-position output head.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub input: usize,
    pub hidden: usize,
    /// `input x hidden`
    pub w_in_fwd: Vec<f64>,
    /// `hidden x hidden`
    pub w_hh_fwd: Vec<f64>,
    pub b_fwd: Vec<f64>,
    pub w_in_bwd: Vec<f64>,
    pub w_hh_bwd: Vec<f64>,
    pub b_bwd: Vec<f64>,
    /// `2 * hidden`, forward half first
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl RnnParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            w_in_fwd: vec![0.0; input * hidden],
            w_hh_fwd: vec![0.0; hidden * hidden],
            b_fwd: vec![0.0; hidden],
            w_in_bwd: vec![0.0; input * hidden],
            w_hh_bwd: vec![0.0; hidden * hidden],
            b_bwd: vec![0.0; hidden],
            head_w: vec![0.0; 2 * hidden],
            head_b: vec![0.0; 1],
        }
    }

    /// Hidden states for both directions over position-major inputs
    /// (`len x input`). Returns `(forward, backward)`, each `len x hidden`.
    pub fn run(&self, inputs: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
        let fwd = self.run_direction(inputs, len, &self.w_in_fwd, &self.w_hh_fwd, &self.b_fwd, false);
        let bwd = self.run_direction(inputs, len, &self.w_in_bwd, &self.w_hh_bwd, &self.b_bwd, true);
        (fwd, bwd)
    }

    fn run_direction(
        &self,
        inputs: &[f64],
        len: usize,
        w_in: &[f64],
        w_hh: &[f64],
        b: &[f64],
        reverse: bool,
    ) -> Vec<f64> {
        let (d, h) = (self.input, self.hidden);
        let mut states = vec![0.0; len * h];
        let mut pre = vec![0.0; h];
        for step in 0..len {
            let i = if reverse { len - 1 - step } else { step };
            pre.copy_from_slice(b);
            let x = &inputs[i * d..(i + 1) * d];
            for (c, xc) in x.iter().enumerate() {
                if *xc != 0.0 {
                    axpy(&mut pre, *xc, &w_in[c * h..(c + 1) * h]);
                }
            }
            if step > 0 {
                let prev = if reverse { i + 1 } else { i - 1 };
                let (lo, hi) = (prev * h, (prev + 1) * h);
                for m in 0..h {
                    let hm = states[lo + m];
                    axpy(&mut pre, hm, &w_hh[m * h..(m + 1) * h]);
                }
                debug_assert!(hi <= states.len());
            }
            for (s, p) in states[i * h..(i + 1) * h].iter_mut().zip(&pre) {
                *s = p.tanh();
            }
        }
        states
    }

    fn head(&self, fwd: &[f64], bwd: &[f64], len: usize) -> Vec<f64> {
        let h = self.hidden;
        let (wf, wb) = self.head_w.split_at(h);
        (0..len)
            .map(|i| {
                dot(wf, &fwd[i * h..(i + 1) * h]) + dot(wb, &bwd[i * h..(i + 1) * h]) + self.head_b[0]
            })
            .collect()
    }

    /// BPTT for one direction. `d_states` holds the upstream gradient on
    /// each hidden state (`len x hidden`); input gradients are added into
    /// `d_inputs`.
    #[allow(clippy::too_many_arguments)]
    fn backward_direction(
        &self,
        inputs: &[f64],
        states: &[f64],
        d_states: &[f64],
        len: usize,
        reverse: bool,
        w_in: &[f64],
        w_hh: &[f64],
        g_w_in: &mut [f64],
        g_w_hh: &mut [f64],
        g_b: &mut [f64],
        d_inputs: &mut [f64],
    ) {
        let (d, h) = (self.input, self.hidden);
        let mut carry = vec![0.0; h];
        let mut da = vec![0.0; h];
        for step in (0..len).rev() {
            let i = if reverse { len - 1 - step } else { step };
            let s = &states[i * h..(i + 1) * h];
            for j in 0..h {
                let g = d_states[i * h + j] + carry[j];
                da[j] = g * (1.0 - s[j] * s[j]);
            }
            axpy(g_b, 1.0, &da);
            let x = &inputs[i * d..(i + 1) * d];
            let dx = &mut d_inputs[i * d..(i + 1) * d];
            for c in 0..d {
                let row = &w_in[c * h..(c + 1) * h];
                dx[c] += dot(row, &da);
                if x[c] != 0.0 {
                    axpy(&mut g_w_in[c * h..(c + 1) * h], x[c], &da);
                }
            }
            if step > 0 {
                let prev = if reverse { i + 1 } else { i - 1 };
                let hp = &states[prev * h..(prev + 1) * h];
                for m in 0..h {
                    axpy(&mut g_w_hh[m * h..(m + 1) * h], hp[m], &da);
                    carry[m] = dot(&w_hh[m * h..(m + 1) * h], &da);
                }
            } else {
                carry.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Bidirectional RNN over a `d x L` feature map; returns `2h x L` with the
/// forward states in the first `h` channels.
pub fn birnn(features: &FeatureMap, p: &RnnParams) -> Result<FeatureMap, NnError> {
    if features.channels != p.input {
        return Err(NnError::Dimension(format!(
            "RNN expects {} input channels, got {}",
            p.input, features.channels
        )));
    }
    let len = features.len;
    let h = p.hidden;
    let (fwd, bwd) = p.run(&features.transposed(), len);
    let mut out = FeatureMap::zeros(2 * h, len);
    for i in 0..len {
        for j in 0..h {
            out.data[j * len + i] = fwd[i * h + j];
            out.data[(h + j) * len + i] = bwd[i * h + j];
        }
    }
    Ok(out)
}

/// Every learnable weight of the noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub fine_ppg: Encoder,
    pub coarse_ppg: Encoder,
    pub coarse_proj: Pointwise,
    pub fine_y: Encoder,
    pub time: TimeEmbedding,
    pub rnn: RnnParams,
}

/// Forward-pass cache consumed by [`ModelParams::backward`].
#[derive(Debug, Clone)]
pub struct Activations {
    pub t: usize,
    x_ppg: FeatureMap,
    y_t: FeatureMap,
    coarse: FeatureMap,
    time_features: Vec<f64>,
    /// position-major RNN inputs, time embedding included
    inputs: Vec<f64>,
    h_fwd: Vec<f64>,
    h_bwd: Vec<f64>,
    len: usize,
}

impl Activations {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward_states(&self) -> &[f64] {
        &self.h_fwd
    }

    pub fn backward_states(&self) -> &[f64] {
        &self.h_bwd
    }

    /// Position-major RNN input rows `F^i`.
    pub fn rnn_inputs(&self) -> &[f64] {
        &self.inputs
    }
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let ch = config.branch_channels;
        let d = config.input_dim();
        Ok(Self {
            fine_ppg: Encoder::zeros(&config.fine_kernels, 1, 1, ch),
            coarse_ppg: Encoder::zeros(&config.coarse_kernels, config.coarse_dilation, 1, ch),
            coarse_proj: Pointwise::zeros(config.coarse_channels(), config.fine_channels()),
            fine_y: Encoder::zeros(&config.fine_kernels, 1, 1, ch),
            time: TimeEmbedding::zeros(config.time_dim, d),
            rnn: RnnParams::zeros(d, config.hidden),
            config: config.clone(),
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. Weights are drawn
    /// in declared array order from one seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, NnError> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fans = p.fan_ins();
        for (array, fan) in p.arrays_mut().into_iter().zip(fans) {
            if let Some(fan) = fan {
                let n = array.len();
                *array = uniform_init(&mut rng, n, fan);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Fan-in for each weight array in declared order; `None` for biases.
    fn fan_ins(&self) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        for enc in [&self.fine_ppg, &self.coarse_ppg] {
            for b in &enc.branches {
                out.push(Some(b.in_channels * b.kernel));
                out.push(None);
            }
        }
        out.push(Some(self.coarse_proj.in_channels));
        out.push(None);
        for b in &self.fine_y.branches {
            out.push(Some(b.in_channels * b.kernel));
            out.push(None);
        }
        out.push(Some(self.time.dim));
        out.push(None);
        let (d, h) = (self.rnn.input, self.rnn.hidden);
        out.extend([Some(d), Some(h), None, Some(d), Some(h), None, Some(2 * h), None]);
        out
    }

    /// Names of the parameter arrays in declared (checkpoint) order.
    pub fn array_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (tag, enc) in [("fine_ppg", &self.fine_ppg), ("coarse_ppg", &self.coarse_ppg)] {
            for (i, b) in enc.branches.iter().enumerate() {
                names.push(format!("{tag}.{i}.k{}.weight", b.kernel));
                names.push(format!("{tag}.{i}.k{}.bias", b.kernel));
            }
        }
        names.push("coarse_proj.weight".into());
        names.push("coarse_proj.bias".into());
        for (i, b) in self.fine_y.branches.iter().enumerate() {
            names.push(format!("fine_y.{i}.k{}.weight", b.kernel));
            names.push(format!("fine_y.{i}.k{}.bias", b.kernel));
        }
        names.push("time.weight".into());
        names.push("time.bias".into());
        for n in [
            "rnn.w_in_fwd",
            "rnn.w_hh_fwd",
            "rnn.b_fwd",
            "rnn.w_in_bwd",
            "rnn.w_hh_bwd",
            "rnn.b_bwd",
            "head.weight",
            "head.bias",
        ] {
            names.push(n.into());
        }
        names
    }

    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = Vec::new();
        for enc in [&self.fine_ppg, &self.coarse_ppg] {
            for b in &enc.branches {
                out.push(&b.weight);
                out.push(&b.bias);
            }
        }
        out.push(&self.coarse_proj.weight);
        out.push(&self.coarse_proj.bias);
        for b in &self.fine_y.branches {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        out.push(&self.time.weight);
        out.push(&self.time.bias);
        let r = &self.rnn;
        out.extend([
            &r.w_in_fwd, &r.w_hh_fwd, &r.b_fwd, &r.w_in_bwd, &r.w_hh_bwd, &r.b_bwd, &r.head_w, &r.head_b,
        ]);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let Self {
            fine_ppg,
            coarse_ppg,
            coarse_proj,
            fine_y,
            time,
            rnn,
            ..
        } = self;
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for b in fine_ppg.branches.iter_mut().chain(coarse_ppg.branches.iter_mut()) {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut coarse_proj.weight);
        out.push(&mut coarse_proj.bias);
        for b in fine_y.branches.iter_mut() {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut time.weight);
        out.push(&mut time.bias);
        let RnnParams {
            w_in_fwd,
            w_hh_fwd,
            b_fwd,
            w_in_bwd,
            w_hh_bwd,
            b_bwd,
            head_w,
            head_b,
            ..
        } = rnn;
        out.extend([w_in_fwd, w_hh_fwd, b_fwd, w_in_bwd, w_hh_bwd, b_bwd, head_w, head_b]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// Flattened copy in declared order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().into_iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut offset = 0;
        for a in self.arrays_mut() {
            let n = a.len();
            a.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// `f_ppg = E_fine(x) + lambda_ppg * proj(E_coarse(x))`
    pub fn fuse_ppg(&self, x_ppg: &[f64]) -> Result<FeatureMap, NnError> {
        Ok(self.fuse_ppg_parts(&FeatureMap::from_signal(x_ppg))?.0)
    }

    fn fuse_ppg_parts(&self, x: &FeatureMap) -> Result<(FeatureMap, FeatureMap), NnError> {
        let mut fine = fine_encoder(x, &self.fine_ppg)?;
        let coarse = coarse_encoder(x, &self.coarse_ppg)?;
        let proj = self.coarse_proj.forward(&coarse);
        if proj.channels != fine.channels {
            return Err(NnError::Dimension(format!(
                "coarse projection gives {} channels, fine encoder {}",
                proj.channels, fine.channels
            )));
        }
        let lambda = self.config.lambda_ppg;
        for (f, c) in fine.data.iter_mut().zip(&proj.data) {
            *f += lambda * c;
        }
        Ok((fine, coarse))
    }

    /// Noise estimate for `y_t` at step `t` given the PPG condition.
    pub fn predict_noise(&self, y_t: &[f64], t: usize, x_ppg: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(y_t, t, x_ppg)?.0)
    }

    pub fn forward(&self, y_t: &[f64], t: usize, x_ppg: &[f64]) -> Result<(Vec<f64>, Activations), NnError> {
        if y_t.len() != x_ppg.len() {
            return Err(NnError::Dimension(format!(
                "y_t has {} samples, x_ppg {}",
                y_t.len(),
                x_ppg.len()
            )));
        }
        if t == 0 {
            return Err(NnError::StepOutOfRange { t, steps: 0 });
        }
        let len = y_t.len();
        let x_map = FeatureMap::from_signal(x_ppg);
        let y_map = FeatureMap::from_signal(y_t);
        let (f_ppg, coarse) = self.fuse_ppg_parts(&x_map)?;
        let f_y = fine_encoder(&y_map, &self.fine_y)?;
        let features = FeatureMap::concat(&[f_ppg, f_y])?;
        if features.channels != self.rnn.input {
            return Err(NnError::Dimension(format!(
                "fused input has {} channels, RNN expects {}",
                features.channels, self.rnn.input
            )));
        }
        let time_features = self.time.sinusoid(t);
        let tau = self.time.project(&time_features);
        let d = features.channels;
        let mut inputs = features.transposed();
        for row in inputs.chunks_exact_mut(d) {
            axpy(row, 1.0, &tau);
        }
        let (h_fwd, h_bwd) = self.rnn.run(&inputs, len);
        let out = self.rnn.head(&h_fwd, &h_bwd, len);
        Ok((
            out,
            Activations {
                t,
                x_ppg: x_map,
                y_t: y_map,
                coarse,
                time_features,
                inputs,
                h_fwd,
                h_bwd,
                len,
            },
        ))
    }

    /// Accumulates `d loss / d params` into `grads` given the upstream
    /// gradient on the predicted noise.
    pub fn backward(&self, d_out: &[f64], cache: &Activations, grads: &mut ModelParams) -> Result<(), NnError> {
        let len = cache.len;
        if d_out.len() != len {
            return Err(NnError::Dimension(format!(
                "upstream gradient has {} entries, cached forward pass {}",
                d_out.len(),
                len
            )));
        }
        let rnn = &self.rnn;
        let (d, h) = (rnn.input, rnn.hidden);

        // head
        let mut d_hf = vec![0.0; len * h];
        let mut d_hb = vec![0.0; len * h];
        {
            let g = &mut grads.rnn;
            let (wf, wb) = rnn.head_w.split_at(h);
            for (i, &go) in d_out.iter().enumerate() {
                g.head_b[0] += go;
                let (gf, gb) = g.head_w.split_at_mut(h);
                axpy(gf, go, &cache.h_fwd[i * h..(i + 1) * h]);
                axpy(gb, go, &cache.h_bwd[i * h..(i + 1) * h]);
                axpy(&mut d_hf[i * h..(i + 1) * h], go, wf);
                axpy(&mut d_hb[i * h..(i + 1) * h], go, wb);
            }
        }

        // recurrences
        let mut d_inputs = vec![0.0; len * d];
        {
            let g = &mut grads.rnn;
            rnn.backward_direction(
                &cache.inputs,
                &cache.h_fwd,
                &d_hf,
                len,
                false,
                &rnn.w_in_fwd,
                &rnn.w_hh_fwd,
                &mut g.w_in_fwd,
                &mut g.w_hh_fwd,
                &mut g.b_fwd,
                &mut d_inputs,
            );
            rnn.backward_direction(
                &cache.inputs,
                &cache.h_bwd,
                &d_hb,
                len,
                true,
                &rnn.w_in_bwd,
                &rnn.w_hh_bwd,
                &mut g.w_in_bwd,
                &mut g.w_hh_bwd,
                &mut g.b_bwd,
                &mut d_inputs,
            );
        }

        // time embedding: tau is broadcast over positions
        let mut d_tau = vec![0.0; d];
        for row in d_inputs.chunks_exact(d) {
            axpy(&mut d_tau, 1.0, row);
        }
        axpy(&mut grads.time.bias, 1.0, &d_tau);
        let out_dim = self.time.out;
        for (k, f) in cache.time_features.iter().enumerate() {
            axpy(&mut grads.time.weight[k * out_dim..(k + 1) * out_dim], *f, &d_tau);
        }

        // back to channel-major, split into f_ppg / f_y
        let fine_ch = self.config.fine_channels();
        let mut d_ppg = FeatureMap::zeros(fine_ch, len);
        let mut d_y = FeatureMap::zeros(fine_ch, len);
        for i in 0..len {
            let row = &d_inputs[i * d..(i + 1) * d];
            for c in 0..fine_ch {
                d_ppg.data[c * len + i] = row[c];
                d_y.data[c * len + i] = row[fine_ch + c];
            }
        }

        self.fine_y.backward(&cache.y_t, &d_y, &mut grads.fine_y);
        self.fine_ppg.backward(&cache.x_ppg, &d_ppg, &mut grads.fine_ppg);

        let lambda = self.config.lambda_ppg;
        let mut d_proj = d_ppg;
        d_proj.data.iter_mut().for_each(|v| *v *= lambda);
        self.coarse_proj.backward(&cache.coarse, &d_proj, &mut grads.coarse_proj);

        // d coarse = W_proj^T d_proj
        let pw = &self.coarse_proj;
        let mut d_coarse = FeatureMap::zeros(pw.in_channels, len);
        for o in 0..pw.out_channels {
            let g = d_proj.channel(o);
            for c in 0..pw.in_channels {
                let w = pw.weight[o * pw.in_channels + c];
                axpy(d_coarse.channel_mut(c), w, g);
            }
        }
        self.coarse_ppg.backward(&cache.x_ppg, &d_coarse, &mut grads.coarse_ppg);
        Ok(())
    }
}

/// Shapes are checked by the sampler before each call; a mismatch here is
/// a programming error.
impl crate::diffusion::Denoiser for ModelParams {
    fn predict(&self, y_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        self.predict_noise(y_t, t, cond)
            .unwrap_or_else(|e| panic!("noise predictor: {e}"))
    }
}

/// Central-difference gradient check.
///
/// `loss` evaluates the scalar objective at a flat parameter vector;
/// `analytic` is the gradient under test in the same order. When the
/// vector has more than `max_checked` entries a seeded random subset is
/// checked. Returns the worst relative error
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check_with<F>(
    point: &[f64],
    analytic: &[f64],
    mut loss: F,
    step: f64,
    floor: f64,
    max_checked: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    let n = point.len();
    let indices: Vec<usize> = if n <= max_checked {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, max_checked).into_vec()
    };
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}
