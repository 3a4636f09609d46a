//! Composite loss, optimizer, training loop and checkpoint format.
//!
//! Random draws come from one ChaCha8 stream seeded with `seed` (stream 1;
//! stream 0 initializes the weights). Per epoch the stream yields a
//! Fisher-Yates permutation of the training set, then for every example in
//! batch order one step `t` followed by `L` standard normals. The draws are
//! taken before a batch fans out to worker threads and gradients are summed
//! in example order, so thread scheduling never changes results.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{forward_diffuse, DiffusionError, NoiseSchedule, Sampler, ScheduleConfig};
use crate::dsp::{RealSpectrum, SegmentPair};
use crate::nn::{grad_check_with, ModelConfig, ModelParams, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (examples {indices:?}, steps {steps:?})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        indices: Vec<usize>,
        steps: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    /// Replaces both fine encoders' kernel lists when set.
    pub kernel_override: Option<Vec<usize>>,
    pub lambda_spec: f64,
    pub spectral_loss: bool,
    /// Clamp the clean estimate to [-1, 1] before the spectral term.
    pub clip_x0: bool,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Default inference settings stored alongside the weights.
    pub sampler: Sampler,
    pub nfe: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            kernel_override: None,
            lambda_spec: 0.01,
            spectral_loss: true,
            clip_x0: false,
            optimizer: AdamConfig::default(),
            batch_size: 32,
            epochs: 50,
            seed: 0,
            sampler: Sampler::Ddim,
            nfe: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.lambda_spec >= 0.0 && self.lambda_spec.is_finite()) {
            return err(format!("lambda_spec must be >= 0, got {}", self.lambda_spec));
        }
        if self.batch_size == 0 {
            return err("batch size must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return err(format!("bad optimizer settings {o:?}"));
        }
        self.resolved_model().validate()?;
        self.schedule.build()?;
        crate::diffusion::sampler_grid(self.sampler, self.schedule.steps, self.nfe)?;
        Ok(())
    }

    /// Spectral weight actually applied.
    pub fn effective_lambda_spec(&self) -> f64 {
        if self.spectral_loss {
            self.lambda_spec
        } else {
            0.0
        }
    }

    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(k) = &self.kernel_override {
            m.fine_kernels = k.clone();
        }
        m
    }
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64, TrainError> {
    if eps.len() != eps_hat.len() {
        return Err(TrainError::LengthMismatch(eps.len(), eps_hat.len()));
    }
    if eps.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.len() as f64)
}

/// Mean over all `L` DFT bins (both signs of frequency) of the squared
/// difference of magnitudes.
pub fn spectral_loss(y0_hat: &[f64], y0: &[f64]) -> Result<f64, TrainError> {
    Ok(SpectralLoss::new(y0.len()).value(y0_hat, y0)?.0)
}

/// Spectral loss with a cached transform; also yields the gradient.
#[derive(Debug, Clone)]
pub struct SpectralLoss {
    fft: RealSpectrum,
}

impl SpectralLoss {
    pub fn new(len: usize) -> Self {
        Self {
            fft: RealSpectrum::new(len),
        }
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.forward_complex(&mut buf);
        buf
    }

    fn check(&self, a: &[f64], b: &[f64]) -> Result<(), TrainError> {
        if a.len() != b.len() {
            return Err(TrainError::LengthMismatch(a.len(), b.len()));
        }
        if a.len() != self.fft.len() {
            return Err(TrainError::LengthMismatch(a.len(), self.fft.len()));
        }
        Ok(())
    }

    /// Loss and the spectra it was computed from.
    fn value(&self, y0_hat: &[f64], y0: &[f64]) -> Result<(f64, Vec<Complex<f64>>, Vec<f64>), TrainError> {
        self.check(y0_hat, y0)?;
        let n = y0.len();
        if n == 0 {
            return Ok((0.0, Vec::new(), Vec::new()));
        }
        let a = self.spectrum(y0_hat);
        let b = self.spectrum(y0);
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.norm() - y.norm()).collect();
        let loss = diffs.iter().map(|d| d * d).sum::<f64>() / n as f64;
        Ok((loss, a, diffs))
    }

    /// Loss and its gradient with respect to `y0_hat`.
    ///
    /// `dL/dx[n] = Re(sum_k c_k e^{-2 pi i k n / L})` with
    /// `c_k = (2/L) (|A_k| - |B_k|) conj(A_k) / |A_k|`; bins with `A_k = 0`
    /// contribute nothing (the subgradient at the kink).
    pub fn value_and_grad(&self, y0_hat: &[f64], y0: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        let (loss, a, diffs) = self.value(y0_hat, y0)?;
        let n = y0.len();
        let scale = 2.0 / n as f64;
        let mut c: Vec<Complex<f64>> = a
            .iter()
            .zip(&diffs)
            .map(|(ak, dk)| {
                let m = ak.norm();
                if m == 0.0 {
                    Complex::new(0.0, 0.0)
                } else {
                    ak.conj() * (scale * dk / m)
                }
            })
            .collect();
        self.fft.forward_complex(&mut c);
        Ok((loss, c.iter().map(|v| v.re).collect()))
    }
}

/// Noise and step drawn for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl ExampleDraw {
    pub fn sample(rng: &mut ChaCha8Rng, steps: usize, len: usize) -> Self {
        let t = rng.random_range(1..=steps);
        let eps = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Self { t, eps }
    }
}

/// Loss terms for one example or a batch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub diffusion: f64,
    pub spectral: f64,
    pub total: f64,
}

/// Everything needed to evaluate the composite objective besides weights.
#[derive(Debug, Clone)]
pub struct LossContext<'a> {
    pub schedule: &'a NoiseSchedule,
    pub lambda_spec: f64,
    pub clip_x0: bool,
    pub spectral: &'a SpectralLoss,
}

/// Composite loss for one example with pre-drawn `t` and noise. The
/// gradient is accumulated into `grads` scaled by `weight`.
pub fn example_loss(
    params: &ModelParams,
    pair: &SegmentPair,
    draw: &ExampleDraw,
    ctx: &LossContext<'_>,
    grads: Option<(&mut ModelParams, f64)>,
) -> Result<LossTerms, TrainError> {
    let y0 = &pair.resp;
    if pair.ppg.len() != y0.len() {
        return Err(TrainError::LengthMismatch(pair.ppg.len(), y0.len()));
    }
    let y_t = forward_diffuse(y0, draw.t, &draw.eps, ctx.schedule)?;
    let (eps_hat, cache) = params.forward(&y_t, draw.t, &pair.ppg)?;
    let diffusion = diffusion_loss(&draw.eps, &eps_hat)?;
    let len = y0.len() as f64;
    let mut d_eps: Vec<f64> = eps_hat
        .iter()
        .zip(&draw.eps)
        .map(|(h, e)| 2.0 * (h - e) / len)
        .collect();

    let mut spectral = 0.0;
    if ctx.lambda_spec > 0.0 {
        let ab = ctx.schedule.alpha_bar(draw.t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let raw: Vec<f64> = y_t.iter().zip(&eps_hat).map(|(y, e)| (y - sn * e) / sa).collect();
        let x0: Vec<f64> = if ctx.clip_x0 {
            raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
        } else {
            raw.clone()
        };
        let (value, g) = ctx.spectral.value_and_grad(&x0, y0)?;
        spectral = value;
        let chain = -ctx.lambda_spec * sn / sa;
        for ((d, gi), r) in d_eps.iter_mut().zip(&g).zip(&raw) {
            if !ctx.clip_x0 || r.abs() <= 1.0 {
                *d += chain * gi;
            }
        }
    }
    let total = diffusion + ctx.lambda_spec * spectral;
    if let Some((g, weight)) = grads {
        d_eps.iter_mut().for_each(|v| *v *= weight);
        params.backward(&d_eps, &cache, g)?;
    }
    Ok(LossTerms {
        diffusion,
        spectral,
        total,
    })
}

/// Batch-mean composite loss and its gradient.
///
/// Examples are evaluated in parallel; per-example gradients are summed in
/// index order.
pub fn total_loss(
    params: &ModelParams,
    batch: &[&SegmentPair],
    draws: &[ExampleDraw],
    ctx: &LossContext<'_>,
) -> Result<(LossTerms, ModelParams), TrainError> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(TrainError::LengthMismatch(batch.len(), draws.len()));
    }
    let weight = 1.0 / batch.len() as f64;
    let per_example: Vec<Result<(LossTerms, ModelParams), TrainError>> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(pair, draw)| {
            let mut g = params.zeros_like();
            let terms = example_loss(params, pair, draw, ctx, Some((&mut g, weight)))?;
            Ok((terms, g))
        })
        .collect();
    let mut grads = params.zeros_like();
    let mut sum = LossTerms::default();
    for r in per_example {
        let (terms, g) = r?;
        sum.diffusion += terms.diffusion;
        sum.spectral += terms.spectral;
        for (acc, part) in grads.arrays_mut().into_iter().zip(g.arrays()) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    let mean = LossTerms {
        diffusion: sum.diffusion * weight,
        spectral: sum.spectral * weight,
        total: 0.0,
    };
    Ok((
        LossTerms {
            total: mean.diffusion + ctx.lambda_spec * mean.spectral,
            ..mean
        },
        grads,
    ))
}

/// Worst relative error between the analytic batch gradient and central
/// differences of the batch loss (see [`grad_check_with`]).
pub fn grad_check(
    params: &ModelParams,
    batch: &[&SegmentPair],
    draws: &[ExampleDraw],
    ctx: &LossContext<'_>,
    step: f64,
) -> Result<f64, TrainError> {
    let (_, grads) = total_loss(params, batch, draws, ctx)?;
    let mut probe = params.clone();
    let mut failure = None;
    let err = grad_check_with(
        &params.to_flat(),
        &grads.to_flat(),
        |w| {
            probe.set_flat(w);
            match total_loss(&probe, batch, draws, ctx) {
                Ok((terms, _)) => terms.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        step,
        1e-6,
        4000,
        0,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: ModelParams,
    v: ModelParams,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &ModelParams) -> Self {
        Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let arrays = params
            .arrays_mut()
            .into_iter()
            .zip(grads.arrays())
            .zip(self.m.arrays_mut().into_iter().zip(self.v.arrays_mut()));
        for ((p, g), (m, v)) in arrays {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    #[serde(flatten)]
    pub loss: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossTerms,
    pub seconds: f64,
    /// Position of the training RNG stream after the epoch, in 32-bit words.
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
}

/// Where per-epoch checkpoints and the line-delimited log go.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("epoch-{epoch:03}.rdf"))
    }

    pub const LOG_FILE: &'static str = "train_log.jsonl";
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains a fresh model. Returned parameters are rounded to `f32`, the
/// checkpoint precision, so they equal what a reload of the final
/// checkpoint produces.
pub fn train(
    data: &[SegmentPair],
    config: &TrainConfig,
    output: &TrainOutput,
) -> Result<(ModelParams, TrainRecord), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let len = data[0].resp.len();
    if let Some(bad) = data.iter().find(|p| p.resp.len() != len || p.ppg.len() != len) {
        return Err(TrainError::LengthMismatch(len, bad.resp.len().max(bad.ppg.len())));
    }
    let schedule = config.schedule.build()?;
    let spectral = SpectralLoss::new(len);
    let ctx = LossContext {
        schedule: &schedule,
        lambda_spec: config.effective_lambda_spec(),
        clip_x0: config.clip_x0,
        spectral: &spectral,
    };
    let mut params = ModelParams::init(&config.resolved_model(), config.seed)?;
    let mut adam = Adam::new(config.optimizer.clone(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut log = match &output.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(TrainOutput::LOG_FILE);
            Some((BufWriter::new(File::create(&path).map_err(io_err(&path))?), path))
        }
        None => None,
    };

    let mut record = TrainRecord {
        seed: config.seed,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_sum = LossTerms::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let draws: Vec<ExampleDraw> = chunk
                .iter()
                .map(|_| ExampleDraw::sample(&mut rng, schedule.steps(), len))
                .collect();
            let batch: Vec<&SegmentPair> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = total_loss(&params, &batch, &draws, &ctx)?;
            if !loss.total.is_finite() || grads.arrays().iter().any(|a| a.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    indices: chunk.to_vec(),
                    steps: draws.iter().map(|d| d.t).collect(),
                });
            }
            adam.step(&mut params, &grads);
            let w = chunk.len() as f64;
            epoch_sum.diffusion += loss.diffusion * w;
            epoch_sum.spectral += loss.spectral * w;
            epoch_sum.total += loss.total * w;
            record.batches.push(BatchRecord { epoch, batch: b, loss });
        }
        let n = data.len() as f64;
        let entry = EpochRecord {
            epoch,
            loss: LossTerms {
                diffusion: epoch_sum.diffusion / n,
                spectral: epoch_sum.spectral / n,
                total: epoch_sum.total / n,
            },
            seconds: started.elapsed().as_secs_f64(),
            rng_word_pos: rng.get_word_pos(),
        };
        if let (Some((writer, path)), Some(dir)) = (&mut log, &output.dir) {
            let line = serde_json::to_string(&entry).expect("epoch record serializes");
            writeln!(writer, "{line}").and_then(|_| writer.flush()).map_err(io_err(path))?;
            save_checkpoint(&params, config, &TrainOutput::checkpoint_path(dir, epoch))?;
        }
        record.epochs.push(entry);
    }
    params.round_to_f32();
    Ok((params, record))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDF1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    /// Shapes of the stored weights; may differ from `train.model` when a
    /// kernel override was in effect.
    model: ModelConfig,
    train: TrainConfig,
    arrays: Vec<ArrayInfo>,
}

/// Layout: magic `RDF1`, little-endian `u32` metadata length, JSON
/// metadata, then every parameter array in declared order as
/// little-endian `f32`.
pub fn encode_checkpoint(params: &ModelParams, config: &TrainConfig) -> Vec<u8> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        model: params.config.clone(),
        train: config.clone(),
        arrays: params
            .array_names()
            .into_iter()
            .zip(params.arrays())
            .map(|(name, a)| ArrayInfo { name, len: a.len() })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut out = Vec::with_capacity(8 + meta.len() + 4 * params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for a in params.arrays() {
        for v in a {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, TrainConfig), CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let take = |from: usize, n: usize, what: &str| {
        bytes
            .get(from..from + n)
            .ok_or_else(|| CheckpointError::Truncated(format!("{what} needs {n} bytes at offset {from}")))
    };
    let meta_len = u32::from_le_bytes(take(4, 4, "metadata length")?.try_into().unwrap()) as usize;
    let raw_meta = take(8, meta_len, "metadata")?;
    let version: serde_json::Value =
        serde_json::from_slice(raw_meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let found = version
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Metadata("missing format_version".into()))? as u32;
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta: CheckpointMeta =
        serde_json::from_value(version).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let mut params = ModelParams::zeros(&meta.model).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let names = params.array_names();
    if names.len() != meta.arrays.len()
        || names
            .iter()
            .zip(params.arrays())
            .zip(&meta.arrays)
            .any(|((n, a), info)| *n != info.name || a.len() != info.len)
    {
        return Err(CheckpointError::Metadata(
            "array table does not match the model configuration".into(),
        ));
    }
    let mut offset = 8 + meta_len;
    for (a, info) in params.arrays_mut().into_iter().zip(&meta.arrays) {
        let raw = take(offset, 4 * info.len, &info.name)?;
        for (v, chunk) in a.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        offset += 4 * info.len;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Metadata(format!(
            "{} trailing bytes after parameters",
            bytes.len() - offset
        )));
    }
    Ok((params, meta.train))
}

pub fn save_checkpoint(params: &ModelParams, config: &TrainConfig, path: &Path) -> Result<(), CheckpointError> {
    let err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = File::create(path).map_err(err)?;
    f.write_all(&encode_checkpoint(params, config)).map_err(err)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainConfig), CheckpointError> {
    let err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    File::open(path).map_err(err)?.read_to_end(&mut bytes).map_err(err)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Scale;

    pub(crate) fn naive_dft_mag(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, v) in x.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn pair(len: usize, phase: f64) -> SegmentPair {
        let scale = Scale {
            offset: 0.0,
            span: 1.0,
            constant: false,
        };
        SegmentPair {
            subject_id: "s".into(),
            segment_index: 0,
            ppg: (0..len).map(|i| 0.5 + 0.4 * (i as f64 * 0.9 + phase).sin()).collect(),
            resp: (0..len).map(|i| (i as f64 * 0.4 + phase).sin()).collect(),
            ppg_scale: scale.clone(),
            resp_scale: scale,
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            fine_kernels: vec![3, 5],
            coarse_kernels: vec![3, 5],
            coarse_dilation: 2,
            branch_channels: 2,
            hidden: 4,
            time_dim: 8,
            lambda_ppg: 1.0,
        }
    }

    #[test]
    fn diffusion_loss_examples() {
        assert_eq!(diffusion_loss(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(diffusion_loss(&[1.0], &[0.0, 0.0]).is_err());
        let a: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut naive = 0.0;
        for i in 0..37 {
            naive += (a[i] - b[i]).powi(2);
        }
        assert!((diffusion_loss(&a, &b).unwrap() - naive / 37.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_loss_examples() {
        let y: Vec<f64> = (0..8).map(|n| (2.0 * std::f64::consts::PI * 3.0 * n as f64 / 8.0).cos()).collect();
        assert!(spectral_loss(&y, &y).unwrap().abs() < 1e-24);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!(spectral_loss(&neg, &y).unwrap().abs() < 1e-24);
        // bins 3 and 5 each have magnitude 4
        let got = spectral_loss(&[0.0; 8], &y).unwrap();
        assert!((got - (16.0 + 16.0) / 8.0).abs() < 1e-12);
        let oracle: f64 = naive_dft_mag(&y).iter().map(|m| m * m).sum::<f64>() / 8.0;
        assert!((got - oracle).abs() < 1e-12);
        assert!(spectral_loss(&[0.0; 7], &y).is_err());
    }

    #[test]
    fn spectral_gradient_matches_finite_differences() {
        let a: Vec<f64> = (0..15).map(|i| (i as f64 * 0.77).sin() + 0.1).collect();
        let b: Vec<f64> = (0..15).map(|i| (i as f64 * 0.31).cos()).collect();
        let s = SpectralLoss::new(15);
        let (_, g) = s.value_and_grad(&a, &b).unwrap();
        let err = grad_check_with(&a, &g, |x| s.value(x, &b).unwrap().0, 1e-6, 1e-8, usize::MAX, 0);
        assert!(err < 1e-6, "{err}");
    }

    fn fixture() -> (ModelParams, Vec<SegmentPair>, Vec<ExampleDraw>, NoiseSchedule) {
        let params = ModelParams::init(&tiny_config(), 3).unwrap();
        let data = vec![pair(16, 0.0), pair(16, 1.1)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = vec![ExampleDraw::sample(&mut rng, 4, 16), ExampleDraw::sample(&mut rng, 4, 16)];
        let schedule = NoiseSchedule::linear(4, 1e-4, 0.05).unwrap();
        (params, data, draws, schedule)
    }

    #[test]
    fn lambda_zero_is_diffusion_loss() {
        let (params, data, draws, schedule) = fixture();
        let spectral = SpectralLoss::new(16);
        let ctx = LossContext {
            schedule: &schedule,
            lambda_spec: 0.0,
            clip_x0: false,
            spectral: &spectral,
        };
        let batch: Vec<&SegmentPair> = data.iter().collect();
        let (terms, _) = total_loss(&params, &batch, &draws, &ctx).unwrap();
        let mut direct = 0.0;
        for (p, d) in data.iter().zip(&draws) {
            let y_t = forward_diffuse(&p.resp, d.t, &d.eps, &schedule).unwrap();
            let eps_hat = params.predict_noise(&y_t, d.t, &p.ppg).unwrap();
            direct += diffusion_loss(&d.eps, &eps_hat).unwrap() / 2.0;
        }
        assert!((terms.total - direct).abs() < 1e-12);
        assert_eq!(terms.total, terms.diffusion);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let (params, data, draws, schedule) = fixture();
        let spectral = SpectralLoss::new(16);
        let ctx = LossContext {
            schedule: &schedule,
            lambda_spec: 0.01,
            clip_x0: false,
            spectral: &spectral,
        };
        let batch: Vec<&SegmentPair> = data.iter().collect();
        let err = grad_check(&params, &batch, &draws, &ctx, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_gradient_step_is_identity() {
        let p = ModelParams::init(&tiny_config(), 1).unwrap();
        let mut q = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut q, &p.zeros_like());
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut p = ModelParams::init(&tiny_config(), 5).unwrap();
        p.round_to_f32();
        let cfg = TrainConfig {
            model: tiny_config(),
            ..Default::default()
        };
        let bytes = encode_checkpoint(&p, &cfg);
        let (q, c) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(c, cfg);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_checkpoint(&bad).unwrap_err().to_string(), "not a checkpoint");
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let needle = b"\"format_version\":1";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut other = bytes.clone();
        other[at + needle.len() - 1] = b'7';
        assert!(matches!(
            decode_checkpoint(&other),
            Err(CheckpointError::Version { found: 7, .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda_spec: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            sampler: Sampler::Ddpm,
            nfe: 6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(train(&[], &TrainConfig::default(), &TrainOutput::default()).is_err());
    }
}
