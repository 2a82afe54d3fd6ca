//! Forward-process noise schedules.
//!
//! Step indices are 1-based: `t ∈ 1..=T`, with index 0 denoting clean data.
//! Cumulative tables follow the conventions `ᾱ_0 = 1` and `β̄_0 = 0`, so
//! `alpha_bar(0)` and `beta_bar(0)` are valid queries.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_STEPS: usize = 1000;

/// Serializable description of a schedule, as stored in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    Linear {
        #[serde(rename = "T")]
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Linear {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::Linear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(steps, beta_start, beta_end),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleSpec::Linear { steps, .. } => steps,
        }
    }
}

/// Precomputed coefficient tables of a forward process. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta[i] = beta_start + i·(beta_end − beta_start)/(T−1)` for `i = 0..T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!("T must be at least 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let span = beta_end - beta_start;
        let beta = (0..steps)
            .map(|i| beta_start + i as f64 * span / (steps - 1) as f64)
            .collect();
        Self::from_betas(
            ScheduleSpec::Linear {
                steps,
                beta_start,
                beta_end,
            },
            beta,
        )
    }

    fn from_betas(spec: ScheduleSpec, beta: Vec<f64>) -> Result<Self> {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_bar: Vec<f64> = alpha_bar.iter().map(|ab| 1.0 - ab).collect();
        if beta_bar.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule(
                "cumulative noise level left (0, 1); schedule underflows".into(),
            ));
        }
        Ok(Self {
            spec,
            beta,
            alpha,
            alpha_bar,
            beta_bar,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Panics unless `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Panics unless `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `β̄_t = 1 − ᾱ_t`, with `β̄_0 = 0`.
    pub fn beta_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.beta_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// One Markov forward transition `x_t = √α_t·x_{t−1} + √β_t·z`.
    pub fn forward_step<R: Rng + ?Sized>(
        &self,
        x_prev: &[f64],
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let z: Vec<f64> = x_prev.iter().map(|_| rng.sample(StandardNormal)).collect();
        self.forward_step_with_noise(x_prev, t, &z)
    }

    /// [`NoiseSchedule::forward_step`] with the Gaussian draw supplied.
    pub fn forward_step_with_noise(&self, x_prev: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        check_dim(x_prev.len(), z.len())?;
        if !crate::linalg::all_finite(x_prev) {
            return Err(Error::NonFinite {
                context: "forward_step input".into(),
            });
        }
        let (a, b) = (self.alpha(t).sqrt(), self.beta(t).sqrt());
        Ok(x_prev.iter().zip(z).map(|(x, z)| a * x + b * z).collect())
    }

    /// Closed-form marginal `x_t = √ᾱ_t·x_0 + √β̄_t·ε`.
    pub fn forward_marginal(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        check_dim(x0.len(), eps.len())?;
        let (a, b) = (self.alpha_bar(t).sqrt(), self.beta_bar(t).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }
}
