//! Diffusion-time bookkeeping: β schedules, cumulative products ᾱ and the
//! closed-form forward noising `x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε`.
//!
//! Step indices are 1-based (`t = 1..=T`, `t = T` is the noisiest level);
//! storage is 0-based, so `betas[t - 1]` holds β_t.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// β interpolated uniformly from `beta_start` to `beta_end`.
    Linear,
    /// √β interpolated uniformly (the latent-diffusion convention).
    ScaledLinear,
    /// Squared-cosine ᾱ curve; ignores the β bounds.
    Cosine,
}

/// Immutable β/ᾱ tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit β values, checking every invariant.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// β_t for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `1 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// ᾱ_{t−1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(if t == 1 { 1.0 } else { self.alpha_bars[t - 2] })
    }
}

/// Builds a T-step schedule directly on the sampling grid.
pub fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("step count must be at least 1".into()));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (steps - 1) as f64
        }
    };
    let betas = match kind {
        ScheduleKind::Linear | ScheduleKind::ScaledLinear => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(Error::Schedule(format!(
                    "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
                )));
            }
            if kind == ScheduleKind::Linear {
                (0..steps).map(|i| lerp(beta_start, beta_end, i)).collect()
            } else {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (0..steps).map(|i| lerp(a, b, i).powi(2)).collect()
            }
        }
        ScheduleKind::Cosine => cosine_betas(steps),
    };
    NoiseSchedule::from_betas(betas)
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    const OFFSET: f64 = 0.008;
    let f = |t: usize| {
        let u = (t as f64 / steps as f64 + OFFSET) / (1.0 + OFFSET);
        (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    (1..=steps)
        .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, 0.999))
        .collect()
}

/// Serializable schedule parameters.
///
/// With `train_steps = Some(N)` the β curve is defined on an N-step training
/// grid and ᾱ is read off at `T` uniformly spaced indices, the usual way a
/// 30-step sampler runs on a 1000-step model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub train_steps: Option<usize>,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    0.02
}

impl Default for ScheduleConfig {
    /// DDPM-style linear β on a 1000-step grid, sampled at 30 steps.
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 30,
            beta_start: 1e-4,
            beta_end: 0.02,
            train_steps: Some(1000),
        }
    }
}

impl ScheduleConfig {
    /// The latent-diffusion schedule (scaled-linear β from 0.00085 to 0.012
    /// over 1000 training steps) sampled at `steps` steps.
    pub fn latent_diffusion(steps: usize) -> Self {
        Self {
            kind: ScheduleKind::ScaledLinear,
            steps,
            beta_start: 0.00085,
            beta_end: 0.012,
            train_steps: Some(1000),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        let Some(train_steps) = self.train_steps else {
            return build_schedule(self.kind, self.steps, self.beta_start, self.beta_end);
        };
        if self.steps == 0 || self.steps > train_steps {
            return Err(Error::Schedule(format!(
                "cannot sample {} steps from a {train_steps}-step grid",
                self.steps
            )));
        }
        let train = build_schedule(self.kind, train_steps, self.beta_start, self.beta_end)?;
        let mut prev = 1.0;
        let betas = (1..=self.steps)
            .map(|i| {
                let idx = ((i * train_steps) as f64 / self.steps as f64).round() as usize;
                let ab = train.alpha_bars[idx.clamp(1, train_steps) - 1];
                let beta = 1.0 - ab / prev;
                prev = ab;
                beta
            })
            .collect();
        NoiseSchedule::from_betas(betas)
    }
}

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · eps`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: x0.len(),
            actual: eps.len(),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}
