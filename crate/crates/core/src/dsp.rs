//! Deterministic signal processing for the preprocessing chain and the
//! respiratory-rate readout.
//!
//! ```text
//! raw (fs_in) ──► resample (30 Hz) ──► lowpass (1 Hz, zero phase)
//!             ──► segment (5 s) ──► normalize (PPG [0,1], resp [-1,1])
//! ```

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling rate every recording is brought to before segmentation.
pub const TARGET_FS: f64 = 30.0;
/// Low-pass cutoff applied to both channels.
pub const CUTOFF_HZ: f64 = 1.0;
/// Training segment duration.
pub const SEGMENT_SECONDS: f64 = 5.0;
/// Samples per training segment at [`TARGET_FS`].
pub const SEGMENT_LEN: usize = 150;
/// Upper edge of the respiratory-rate search band (45 breaths per minute).
pub const RR_MAX_HZ: f64 = 0.75;

pub const PPG_RANGE: Range = Range { lo: 0.0, hi: 1.0 };
pub const RESP_RANGE: Range = Range { lo: -1.0, hi: 1.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("upsampling from {fs_in} Hz to {fs_out} Hz is not supported")]
    Upsampling { fs_in: f64, fs_out: f64 },
    #[error("invalid sampling rate {0} Hz")]
    InvalidRate(f64),
    #[error("cannot express {fs_in} Hz -> {fs_out} Hz as a small rational ratio")]
    IrrationalRatio { fs_in: f64, fs_out: f64 },
    #[error("cutoff {cutoff} Hz outside (0, {nyquist}) Hz")]
    CutoffOutOfRange { cutoff: f64, nyquist: f64 },
    #[error("window of {fs} Hz x {window_s} s is not an integer number of samples")]
    FractionalWindow { fs: f64, window_s: f64 },
    #[error("empty signal")]
    Empty,
    #[error("window needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("no dominant frequency: window has no energy in the search band")]
    NoDominantFrequency,
    #[error("no frequency bin falls inside (0, {max_hz}] Hz for a window of {len} samples")]
    NoBinsInBand { len: usize, max_hz: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Closed target interval for min-max normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Affine map back to source units: `x = offset + span * y`.
///
/// `span == 0` only for segments flagged `constant`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub offset: f64,
    pub span: f64,
    pub constant: bool,
}

impl Scale {
    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| self.offset + self.span * v).collect()
    }
}

/// One aligned training example: a 5 s PPG window and its respiration target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPair {
    pub subject_id: String,
    pub segment_index: usize,
    pub ppg: Vec<f64>,
    pub resp: Vec<f64>,
    pub ppg_scale: Scale,
    pub resp_scale: Scale,
}

/// One-sided magnitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMagnitude {
    pub bins: Vec<f64>,
    pub bin_hz: f64,
    /// Length of the transformed signal.
    pub transform_len: usize,
}

impl SpectrumMagnitude {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Energy implied by the full two-sided spectrum, `sum |X_k|^2 / n`.
    pub fn two_sided_energy(&self) -> f64 {
        let n = self.transform_len;
        let mut acc = 0.0;
        for (k, m) in self.bins.iter().enumerate() {
            let mirrored = k != 0 && !(n % 2 == 0 && k == n / 2);
            let weight = if mirrored { 2.0 } else { 1.0 };
            acc += weight * m * m;
        }
        acc / n as f64
    }
}

/// Windowed-sinc low-pass prototype (Hamming window) with unit DC gain.
///
/// `cutoff` is in cycles per sample, `taps` must be odd.
pub fn hamming_lowpass(cutoff: f64, taps: usize) -> Vec<f64> {
    assert!(taps % 2 == 1, "taps must be odd");
    assert!(cutoff > 0.0 && cutoff < 0.5, "cutoff must be in (0, 1/2)");
    let center = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let x = n as f64 - center;
            let sinc = if x == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * x).sin() / (PI * x)
            };
            let window = if taps == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * PI * n as f64 / (taps - 1) as f64).cos()
            };
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Tap count for the 1 Hz style low-pass: a Hamming transition band one
/// cutoff wide, centred on the cutoff, so the passband runs to `cutoff/2`
/// and the stopband starts at `1.5 * cutoff`.
fn lowpass_taps(fs: f64, cutoff: f64) -> usize {
    let n = (3.3 * fs / cutoff).ceil() as usize;
    n | 1
}

fn rational_ratio(fs_in: f64, fs_out: f64) -> Option<(usize, usize)> {
    const SCALE: f64 = 1000.0;
    let a = (fs_in * SCALE).round();
    let b = (fs_out * SCALE).round();
    if (a - fs_in * SCALE).abs() > 1e-6 || (b - fs_out * SCALE).abs() > 1e-6 {
        return None;
    }
    let (a, b) = (a as u64, b as u64);
    let g = gcd(a, b);
    let (up, down) = ((b / g) as usize, (a / g) as usize);
    if up > 4096 || down > 4096 {
        return None;
    }
    Some((up, down))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rational-rate downsampling with an anti-aliasing low-pass at `fs_out / 2`.
///
/// Output length is `floor(len * fs_out / fs_in)`. Samples beyond either
/// end are treated as the edge value, so a constant input stays constant.
pub fn resample(signal: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>, DspError> {
    if !(fs_out > 0.0) || !fs_out.is_finite() {
        return Err(DspError::InvalidRate(fs_out));
    }
    if !(fs_in > 0.0) || !fs_in.is_finite() {
        return Err(DspError::InvalidRate(fs_in));
    }
    if fs_out > fs_in {
        return Err(DspError::Upsampling { fs_in, fs_out });
    }
    if fs_in == fs_out {
        return Ok(signal.to_vec());
    }
    let (up, down) = rational_ratio(fs_in, fs_out).ok_or(DspError::IrrationalRatio { fs_in, fs_out })?;
    if signal.is_empty() {
        return Ok(Vec::new());
    }

    let factor = up.max(down);
    let half = 10 * factor;
    let taps = 2 * half + 1;
    let h = hamming_lowpass(0.5 / factor as f64, taps);

    let out_len = signal.len() * up / down;
    let last = signal.len() as isize - 1;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let n = (m * down) as isize;
        // upsampled index n - j*up must lie within [-half, half]
        let j_lo = (n - half as isize).div_euclid(up as isize);
        let j_hi = (n + half as isize).div_euclid(up as isize);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for j in j_lo..=j_hi {
            let offset = n - j * up as isize;
            if offset.unsigned_abs() > half {
                continue;
            }
            let q = (half as isize + offset) as usize;
            let x = signal[j.clamp(0, last) as usize];
            acc += h[q] * x;
            norm += h[q];
        }
        // each polyphase branch is renormalized to unit DC gain
        out.push(acc / norm);
    }
    Ok(out)
}

/// Odd (point-symmetric) extension by `pad` samples on both ends.
fn odd_extend(signal: &[f64], pad: usize) -> Vec<f64> {
    let n = signal.len();
    let pad = pad.min(n.saturating_sub(1));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let first = signal[0];
    let last = signal[n - 1];
    for k in (1..=pad).rev() {
        ext.push(2.0 * first - signal[k]);
    }
    ext.extend_from_slice(signal);
    for k in 1..=pad {
        ext.push(2.0 * last - signal[n - 1 - k]);
    }
    ext
}

/// Causal FIR pass; samples before the start are held at the first value.
fn fir_causal(h: &[f64], x: &[f64]) -> Vec<f64> {
    let first = x[0];
    (0..x.len())
        .map(|n| {
            h.iter()
                .enumerate()
                .map(|(k, c)| c * if k <= n { x[n - k] } else { first })
                .sum()
        })
        .collect()
}

/// Zero-phase low-pass: Hamming windowed-sinc FIR applied forward then
/// backward over an odd-extended copy of the signal.
pub fn lowpass(signal: &[f64], fs: f64, cutoff: f64) -> Result<Vec<f64>, DspError> {
    if !(fs > 0.0) || !fs.is_finite() {
        return Err(DspError::InvalidRate(fs));
    }
    let nyquist = fs / 2.0;
    if !(cutoff > 0.0 && cutoff < nyquist) {
        return Err(DspError::CutoffOutOfRange { cutoff, nyquist });
    }
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let taps = lowpass_taps(fs, cutoff);
    let h = hamming_lowpass(cutoff / fs, taps);
    let pad = 3 * taps;
    let ext = odd_extend(signal, pad);
    let used_pad = (ext.len() - signal.len()) / 2;

    let mut y = fir_causal(&h, &ext);
    y.reverse();
    let mut y = fir_causal(&h, &y);
    y.reverse();
    Ok(y[used_pad..used_pad + signal.len()].to_vec())
}

/// Consecutive non-overlapping windows of `fs * window_s` samples. The
/// trailing remainder is dropped.
pub fn segment(signal: &[f64], fs: f64, window_s: f64) -> Result<Vec<Vec<f64>>, DspError> {
    let len = window_len(fs, window_s)?;
    Ok(signal.chunks_exact(len).map(<[f64]>::to_vec).collect())
}

pub(crate) fn window_len(fs: f64, window_s: f64) -> Result<usize, DspError> {
    let exact = fs * window_s;
    let len = exact.round();
    if (exact - len).abs() > 1e-9 || len < 1.0 {
        return Err(DspError::FractionalWindow { fs, window_s });
    }
    Ok(len as usize)
}

/// Min-max normalization onto `target`. Constant segments map to the target
/// midpoint with `span = 0` and the `constant` flag set.
pub fn normalize(segment: &[f64], target: Range) -> Result<(Vec<f64>, Scale), DspError> {
    if segment.is_empty() {
        return Err(DspError::Empty);
    }
    let (min, max) = segment
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max == min {
        let mid = target.midpoint();
        let scale = Scale {
            offset: min,
            span: 0.0,
            constant: true,
        };
        return Ok((vec![mid; segment.len()], scale));
    }
    let width = target.hi - target.lo;
    let range = max - min;
    let out = segment
        .iter()
        .map(|&v| {
            if v == max {
                target.hi
            } else {
                target.lo + (v - min) * width / range
            }
        })
        .collect();
    let span = range / width;
    Ok((
        out,
        Scale {
            offset: min - target.lo * span,
            span,
            constant: false,
        },
    ))
}

pub fn denormalize(normalized: &[f64], scale: &Scale) -> Vec<f64> {
    scale.denormalize(normalized)
}

/// Cached forward transform for a fixed length; shared by the spectral loss.
#[derive(Clone)]
pub struct RealSpectrum {
    len: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for RealSpectrum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealSpectrum").field("len", &self.len).finish()
    }
}

impl RealSpectrum {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        Self { len, fft }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of non-negative frequency bins, `floor(len/2) + 1`.
    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    /// Complex DFT of a real signal, non-negative frequencies only.
    pub fn forward(&self, signal: &[f64]) -> Vec<Complex<f64>> {
        assert_eq!(signal.len(), self.len);
        let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        buf.truncate(self.bins());
        buf
    }

    /// Full-length forward DFT of a complex buffer (used for gradients).
    pub fn forward_complex(&self, buf: &mut [Complex<f64>]) {
        self.fft.process(buf);
    }

    pub fn magnitude(&self, signal: &[f64]) -> Vec<f64> {
        self.forward(signal).iter().map(|c| c.norm()).collect()
    }
}

/// Magnitudes of the DFT for the `floor(len/2) + 1` non-negative frequencies.
pub fn fft_magnitude(signal: &[f64], fs: f64) -> Result<SpectrumMagnitude, DspError> {
    if signal.is_empty() {
        return Err(DspError::Empty);
    }
    if !(fs > 0.0) {
        return Err(DspError::InvalidRate(fs));
    }
    let bins = RealSpectrum::new(signal.len()).magnitude(signal);
    Ok(SpectrumMagnitude {
        bins,
        bin_hz: fs / signal.len() as f64,
        transform_len: signal.len(),
    })
}

/// Respiratory rate in breaths per minute: the largest-magnitude bin in
/// `(0, RR_MAX_HZ]`, lower frequency winning ties.
pub fn estimate_rr(window: &[f64], fs: f64) -> Result<f64, DspError> {
    estimate_rr_in_band(window, fs, RR_MAX_HZ)
}

pub fn estimate_rr_in_band(window: &[f64], fs: f64, max_hz: f64) -> Result<f64, DspError> {
    if window.len() < 2 {
        return Err(DspError::TooShort(window.len()));
    }
    let spec = fft_magnitude(window, fs)?;
    let top = ((max_hz / spec.bin_hz) + 1e-9).floor() as usize;
    let top = top.min(spec.len() - 1);
    if top < 1 {
        return Err(DspError::NoBinsInBand {
            len: window.len(),
            max_hz,
        });
    }
    let total: f64 = window.iter().map(|v| v.abs()).sum();
    let mut best = 0;
    let mut best_mag = 0.0;
    for k in 1..=top {
        if spec.bins[k] > best_mag {
            best = k;
            best_mag = spec.bins[k];
        }
    }
    if best == 0 || best_mag <= 1e-10 * total {
        return Err(DspError::NoDominantFrequency);
    }
    Ok(60.0 * best as f64 * spec.bin_hz)
}

pub fn mae(a: &[f64], b: &[f64]) -> Result<f64, DspError> {
    if a.len() != b.len() {
        return Err(DspError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(DspError::Empty);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Preprocessing parameters; the defaults are the 30 Hz / 1 Hz / 5 s chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_fs: f64,
    pub cutoff_hz: f64,
    pub window_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_fs: TARGET_FS,
            cutoff_hz: CUTOFF_HZ,
            window_s: SEGMENT_SECONDS,
        }
    }
}

/// resample -> lowpass -> segment -> normalize, applied to both channels.
pub fn preprocess(
    subject_id: &str,
    ppg: &[f64],
    resp: &[f64],
    fs: f64,
    config: &PreprocessConfig,
) -> Result<Vec<SegmentPair>, DspError> {
    if ppg.len() != resp.len() {
        return Err(DspError::LengthMismatch(ppg.len(), resp.len()));
    }
    let chain = |x: &[f64]| -> Result<Vec<Vec<f64>>, DspError> {
        let x = resample(x, fs, config.target_fs)?;
        let x = lowpass(&x, config.target_fs, config.cutoff_hz)?;
        segment(&x, config.target_fs, config.window_s)
    };
    let ppg_segments = chain(ppg)?;
    let resp_segments = chain(resp)?;
    ppg_segments
        .iter()
        .zip(&resp_segments)
        .enumerate()
        .map(|(index, (p, r))| {
            let (ppg, ppg_scale) = normalize(p, PPG_RANGE)?;
            let (resp, resp_scale) = normalize(r, RESP_RANGE)?;
            Ok(SegmentPair {
                subject_id: subject_id.to_string(),
                segment_index: index,
                ppg,
                resp,
                ppg_scale,
                resp_scale,
            })
        })
        .collect()
}
