//! Noise schedule, forward corruption and the DDPM / DDIM reverse samplers.
//!
//! Steps are 1-based: `t` runs over `1..=T` and `alpha_bar(0) == 1` stands
//! for the clean endpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("step {t} outside [1, {steps}]")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("noise must be zero at the final step t = 1")]
    NoiseAtFinalStep,
    #[error("step pair ({t} -> {t_prev}) is not strictly decreasing")]
    NonDecreasingSteps { t: usize, t_prev: usize },
    #[error("empty step list")]
    EmptySteps,
    #[error("{0}")]
    IncompatibleGrid(String),
}

/// Parameters that reconstruct a linear schedule exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `steps` steps.
    /// With a single step only `beta_start` is used.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule("T must be >= 1".into()));
        }
        if steps > 1 && !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta_start ({beta_start}) < beta_end ({beta_end}) < 1"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("T must be >= 1".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DiffusionError::InvalidSchedule(
                "betas must be strictly increasing".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            Err(DiffusionError::StepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Ancestral posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            0.0
        } else {
            self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
        }
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        Err(DiffusionError::LengthMismatch(a.len(), b.len()))
    } else {
        Ok(())
    }
}

/// `sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse(
    y0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_len(y0, eps)?;
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(y0.iter().zip(eps).map(|(y, e)| s * y + n * e).collect())
}

/// Single-step clean estimate `(y_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)`.
pub fn estimate_x0(
    y_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_len(y_t, eps_hat)?;
    schedule.check_step(t)?;
    Ok(estimate_x0_unchecked(y_t, schedule.alpha_bar(t), eps_hat))
}

pub(crate) fn estimate_x0_unchecked(y_t: &[f64], alpha_bar: f64, eps_hat: &[f64]) -> Vec<f64> {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    y_t.iter().zip(eps_hat).map(|(y, e)| (y - n * e) / s).collect()
}

/// One ancestral step `t -> t - 1`. `z` must be all zeros at `t == 1`.
pub fn ddpm_step(
    y_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
    z: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    check_len(y_t, eps_hat)?;
    check_len(y_t, z)?;
    schedule.check_step(t)?;
    if t == 1 && z.iter().any(|v| *v != 0.0) {
        return Err(DiffusionError::NoiseAtFinalStep);
    }
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let sigma = schedule.posterior_variance(t).sqrt();
    Ok(y_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((y, e), zi)| inv_sqrt_alpha * (y - coef * e) + sigma * zi)
        .collect())
}

/// Deterministic (eta = 0) implicit step `t -> t_prev`; `t_prev == 0` lands
/// on the clean estimate.
pub fn ddim_step(
    y_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_len(y_t, eps_hat)?;
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(DiffusionError::NonDecreasingSteps { t, t_prev });
    }
    let x0 = estimate_x0_unchecked(y_t, schedule.alpha_bar(t), eps_hat);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (s, n) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(x0.iter().zip(eps_hat).map(|(x, e)| s * x + n * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl std::fmt::Display for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampler::Ddpm => "ddpm",
            Sampler::Ddim => "ddim",
        })
    }
}

impl std::str::FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Sampler::Ddpm),
            "ddim" => Ok(Sampler::Ddim),
            other => Err(format!("unknown sampler '{other}' (expected ddpm or ddim)")),
        }
    }
}

/// Step grid for `nfe` function evaluations over a `steps`-step schedule:
/// `T, T - s, T - 2s, ...` with stride `s = floor(T / (nfe - 1))`, closed
/// by a final step at 1. `nfe == T` gives the full grid.
pub fn ddim_grid(steps: usize, nfe: usize) -> Result<Vec<usize>, DiffusionError> {
    if nfe == 0 || steps == 0 {
        return Err(DiffusionError::EmptySteps);
    }
    if nfe > steps {
        return Err(DiffusionError::IncompatibleGrid(format!(
            "NFE {nfe} exceeds the {steps}-step schedule"
        )));
    }
    if nfe == 1 {
        return Ok(vec![steps]);
    }
    let stride = steps / (nfe - 1);
    let mut grid: Vec<usize> = (0..nfe - 1).map(|i| steps - i * stride).collect();
    grid.push(1);
    grid.dedup();
    Ok(grid)
}

/// Step list for a sampler at a given NFE. Ancestral sampling only runs
/// on the full grid.
pub fn sampler_grid(sampler: Sampler, steps: usize, nfe: usize) -> Result<Vec<usize>, DiffusionError> {
    match sampler {
        Sampler::Ddim => ddim_grid(steps, nfe),
        Sampler::Ddpm if nfe == steps => Ok((1..=steps).rev().collect()),
        Sampler::Ddpm => Err(DiffusionError::IncompatibleGrid(format!(
            "DDPM sampling needs NFE equal to the schedule length ({steps}), got {nfe}"
        ))),
    }
}

/// A noise predictor conditioned on a side signal.
pub trait Denoiser {
    fn predict(&self, y_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64>;
}

impl<F> Denoiser for F
where
    F: Fn(&[f64], usize, &[f64]) -> Vec<f64>,
{
    fn predict(&self, y_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        self(y_t, t, cond)
    }
}

/// Reverse sampling from a seeded standard normal start.
///
/// Draw order: `y` at the first step, then (DDPM only) one noise vector per
/// step with `t > 1`.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &[f64],
    sampler: Sampler,
    steps: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>, DiffusionError> {
    if steps.is_empty() {
        return Err(DiffusionError::EmptySteps);
    }
    for &t in steps {
        schedule.check_step(t)?;
    }
    if let Some(w) = steps.windows(2).find(|w| w[1] >= w[0]) {
        return Err(DiffusionError::NonDecreasingSteps { t: w[0], t_prev: w[1] });
    }
    if sampler == Sampler::Ddpm && steps.windows(2).any(|w| w[0] - w[1] != 1) {
        return Err(DiffusionError::IncompatibleGrid(
            "DDPM sampling needs consecutive steps".into(),
        ));
    }
    let len = cond.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();

    for (i, &t) in steps.iter().enumerate() {
        let eps_hat = denoiser.predict(&y, t, cond);
        check_len(&y, &eps_hat)?;
        y = match sampler {
            Sampler::Ddim => {
                let t_prev = steps.get(i + 1).copied().unwrap_or(0);
                ddim_step(&y, t, t_prev, &eps_hat, schedule)?
            }
            Sampler::Ddpm => {
                let z: Vec<f64> = if t > 1 {
                    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
                } else {
                    vec![0.0; len]
                };
                let next = ddpm_step(&y, t, &eps_hat, schedule, &z)?;
                if t > 1 && i + 1 == steps.len() {
                    // grid stopped early: finish with the clean estimate
                    estimate_x0_unchecked(&y, schedule.alpha_bar(t), &eps_hat)
                } else {
                    next
                }
            }
        };
    }
    Ok(y)
}
