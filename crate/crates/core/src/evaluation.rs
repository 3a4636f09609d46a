//! Waveform reconstruction from sampled segments, windowed scoring and
//! benchmark tables.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{sample, sampler_grid, DiffusionError, NoiseSchedule, Sampler};
use crate::dsp::{estimate_rr, mae, DspError, Scale, SegmentPair};
use crate::nn::ModelParams;

/// Scoring window length.
pub const WINDOW_SECONDS: f64 = 60.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("segment index gap: expected {expected}, found {found}")]
    Gap { expected: usize, found: usize },
    #[error("{0} segments but {1} indices")]
    Count(usize, usize),
    #[error("prediction has {pred} samples, reference {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("{len} samples is shorter than one {window_s} s window at {fs} Hz")]
    TooShort { len: usize, fs: f64, window_s: f64 },
    #[error("invalid window: {0}")]
    Window(String),
    #[error("window {window}: {source}")]
    Readout {
        window: usize,
        #[source]
        source: DspError,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("no test segments for '{0}'")]
    NoSegments(String),
}

/// Concatenates segments ordered by `indices`, which must be consecutive.
pub fn reconstruct(segments: &[Vec<f64>], indices: &[usize]) -> Result<Vec<f64>, EvalError> {
    if segments.len() != indices.len() {
        return Err(EvalError::Count(segments.len(), indices.len()));
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by_key(|&i| indices[i]);
    let mut out = Vec::with_capacity(segments.iter().map(Vec::len).sum());
    for (n, &i) in order.iter().enumerate() {
        let expected = indices[order[0]] + n;
        if indices[i] != expected {
            return Err(EvalError::Gap {
                expected,
                found: indices[i],
            });
        }
        out.extend_from_slice(&segments[i]);
    }
    Ok(out)
}

/// Concatenation in source units using each segment's stored scale.
pub fn reconstruct_denormalized(
    segments: &[Vec<f64>],
    indices: &[usize],
    scales: &[Scale],
) -> Result<Vec<f64>, EvalError> {
    if scales.len() != segments.len() {
        return Err(EvalError::Count(segments.len(), scales.len()));
    }
    let restored: Vec<Vec<f64>> = segments.iter().zip(scales).map(|(s, sc)| sc.denormalize(s)).collect();
    reconstruct(&restored, indices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub window_index: usize,
    pub start_s: f64,
    pub rr_true: f64,
    pub rr_pred: f64,
    pub abs_error: f64,
}

/// Per-window readout of one sequence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub windows: Vec<WindowScore>,
    pub rr_mae: f64,
    pub waveform_mae: f64,
    pub samples: usize,
    /// Trailing samples not covered by any window.
    pub discarded_samples: usize,
}

/// Window placement. `hop_s = None` gives non-overlapping windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_s: f64,
    pub hop_s: Option<f64>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_s: WINDOW_SECONDS,
            hop_s: None,
        }
    }
}

/// Scores `pred` against `truth` in non-overlapping windows.
pub fn evaluate(pred: &[f64], truth: &[f64], fs: f64, window_s: f64) -> Result<SequenceScore, EvalError> {
    evaluate_windows(pred, truth, fs, WindowSpec { window_s, hop_s: None })
}

pub fn evaluate_windows(pred: &[f64], truth: &[f64], fs: f64, spec: WindowSpec) -> Result<SequenceScore, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let win = fs * spec.window_s;
    if !(win >= 1.0) || (win - win.round()).abs() > 1e-9 {
        return Err(EvalError::Window(format!(
            "{} s at {fs} Hz is not a whole number of samples",
            spec.window_s
        )));
    }
    let win = win.round() as usize;
    let hop = match spec.hop_s {
        None => win,
        Some(h) => {
            let hop = fs * h;
            if !(hop >= 1.0) || (hop - hop.round()).abs() > 1e-9 {
                return Err(EvalError::Window(format!("hop {h} s is not a whole number of samples")));
            }
            hop.round() as usize
        }
    };
    if pred.len() < win {
        return Err(EvalError::TooShort {
            len: pred.len(),
            fs,
            window_s: spec.window_s,
        });
    }
    let count = (pred.len() - win) / hop + 1;
    let windows = (0..count)
        .map(|w| {
            let range = w * hop..w * hop + win;
            let readout = |x: &[f64]| estimate_rr(x, fs).map_err(|source| EvalError::Readout { window: w, source });
            let rr_true = readout(&truth[range.clone()])?;
            let rr_pred = readout(&pred[range.clone()])?;
            Ok(WindowScore {
                window_index: w,
                start_s: range.start as f64 / fs,
                rr_true,
                rr_pred,
                abs_error: (rr_pred - rr_true).abs(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let covered = (count - 1) * hop + win;
    Ok(SequenceScore {
        rr_mae: windows.iter().map(|w| w.abs_error).sum::<f64>() / windows.len() as f64,
        waveform_mae: mae(pred, truth)?,
        samples: pred.len(),
        discarded_samples: pred.len() - covered,
        windows,
    })
}

/// Inference settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub sampler: Sampler,
    pub nfe: usize,
    pub spectral_loss: bool,
    pub window_s: f64,
    pub hop_s: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: String,
    #[serde(flatten)]
    pub score: SequenceScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalEcho,
    pub subjects: Vec<SubjectScore>,
    /// Mean absolute RR error over every window of every subject, in bpm.
    pub rr_mae: f64,
    /// Sample-weighted waveform MAE in normalized units.
    pub waveform_mae: f64,
}

impl EvalReport {
    pub fn new(config: EvalEcho, subjects: Vec<SubjectScore>) -> Self {
        let errors: Vec<f64> = subjects
            .iter()
            .flat_map(|s| s.score.windows.iter().map(|w| w.abs_error))
            .collect();
        let samples: usize = subjects.iter().map(|s| s.score.samples).sum();
        let rr_mae = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
        let waveform_mae = subjects
            .iter()
            .map(|s| s.score.waveform_mae * s.score.samples as f64)
            .sum::<f64>()
            / samples.max(1) as f64;
        Self {
            config,
            subjects,
            rr_mae,
            waveform_mae,
        }
    }

    /// Aligned text table, one row per window plus a summary line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "# sampler={} nfe={} spectral_loss={} window={}s waveform MAE in normalized units [-1, 1]",
            c.sampler, c.nfe, c.spectral_loss, c.window_s
        );
        let _ = writeln!(s, "{:<16} {:>6} {:>8} {:>8} {:>8}", "subject", "window", "rr_true", "rr_pred", "error");
        for sub in &self.subjects {
            for w in &sub.score.windows {
                let _ = writeln!(
                    s,
                    "{:<16} {:>6} {:>8.2} {:>8.2} {:>8.2}",
                    sub.subject_id, w.window_index, w.rr_true, w.rr_pred, w.abs_error
                );
            }
        }
        let _ = writeln!(
            s,
            "RR MAE {:.3} bpm, waveform MAE {:.4}",
            self.rr_mae, self.waveform_mae
        );
        s
    }
}

/// Seed of one segment's sampling chain; independent of evaluation order.
pub fn segment_seed(seed: u64, segment_index: usize) -> u64 {
    seed ^ (segment_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Samples a respiration estimate for every segment.
pub fn predict_segments(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    nfe: usize,
    segments: &[SegmentPair],
    seed: u64,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let steps = sampler_grid(sampler, schedule.steps(), nfe)?;
    segments
        .par_iter()
        .map(|seg| {
            Ok(sample(
                params,
                &seg.ppg,
                sampler,
                &steps,
                schedule,
                segment_seed(seed, seg.segment_index),
            )?)
        })
        .collect()
}

/// Samples, reconstructs and scores one subject's segments.
pub fn score_subject(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    nfe: usize,
    segments: &[SegmentPair],
    fs: f64,
    windows: WindowSpec,
    seed: u64,
) -> Result<(SubjectScore, Vec<f64>, Vec<f64>), EvalError> {
    let subject = segments.first().map(|s| s.subject_id.clone()).unwrap_or_default();
    if segments.is_empty() {
        return Err(EvalError::NoSegments(subject));
    }
    let preds = predict_segments(params, schedule, sampler, nfe, segments, seed)?;
    let indices: Vec<usize> = segments.iter().map(|s| s.segment_index).collect();
    let truth: Vec<Vec<f64>> = segments.iter().map(|s| s.resp.clone()).collect();
    let pred = reconstruct(&preds, &indices)?;
    let truth = reconstruct(&truth, &indices)?;
    let score = evaluate_windows(&pred, &truth, fs, windows)?;
    Ok((
        SubjectScore {
            subject_id: subject,
            score,
        },
        pred,
        truth,
    ))
}

/// Delimiter-separated overlay traces: `window,time_s,truth,pred`.
pub fn plot_columns(pred: &[f64], truth: &[f64], fs: f64, window_s: f64) -> Result<String, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let win = (fs * window_s).round().max(1.0) as usize;
    let mut s = String::from("window,time_s,truth,pred\n");
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        let _ = writeln!(s, "{},{:.4},{:.6},{:.6}", i / win, i as f64 / fs, t, p);
    }
    Ok(s)
}

/// One model variant to benchmark: a checkpoint per fold together with
/// that fold's held-out segments.
#[derive(Debug, Clone)]
pub struct BenchmarkEntry {
    pub label: String,
    pub folds: Vec<BenchmarkFold>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkFold {
    pub params: ModelParams,
    pub schedule: NoiseSchedule,
    pub test: Vec<SegmentPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub model: String,
    pub sampler: Sampler,
    pub nfe: usize,
    pub window_s: f64,
    pub rr_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn render(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>4} {:>7} {:>10}\n", "Model", "Sampler", "NFE", "Window", "RR Error");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>4} {:>6}s {:>10.2}",
                r.model, r.sampler, r.nfe, r.window_s, r.rr_error
            );
        }
        s
    }
}

/// Scores every entry under every `(sampler, nfe)` pair. The RR error of a
/// row pools the windows of all folds.
pub fn benchmark(
    entries: &[BenchmarkEntry],
    grid: &[(Sampler, usize)],
    fs: f64,
    windows: WindowSpec,
    seed: u64,
) -> Result<BenchmarkTable, EvalError> {
    let mut rows = Vec::new();
    for &(sampler, nfe) in grid {
        for entry in entries {
            let mut errors = Vec::new();
            for fold in &entry.folds {
                sampler_grid(sampler, fold.schedule.steps(), nfe)?;
                for subject in crate::signal_io::subjects(&fold.test) {
                    let mut segs: Vec<SegmentPair> =
                        fold.test.iter().filter(|s| s.subject_id == subject).cloned().collect();
                    segs.sort_by_key(|s| s.segment_index);
                    let (score, _, _) =
                        score_subject(&fold.params, &fold.schedule, sampler, nfe, &segs, fs, windows, seed)?;
                    errors.extend(score.score.windows.iter().map(|w| w.abs_error));
                }
            }
            rows.push(BenchmarkRow {
                model: entry.label.clone(),
                sampler,
                nfe,
                window_s: windows.window_s,
                rr_error: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
            });
        }
    }
    Ok(BenchmarkTable { rows })
}
