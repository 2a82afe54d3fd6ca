//! Score estimators behind one interface.
//!
//! Three realizations: the exact [`OracleField`] built from diffused mixture
//! marginals, a [`PerturbedField`] that adds a controlled error term to any
//! base field, and [`MlpField`], a small trained ε-prediction network.

mod mlp;
mod perturb;

use std::sync::Arc;

pub use mlp::{Mlp, MlpCache, MlpField, MlpGradients, MlpScoreModel, TimeEmbedding, TrainConfig};
pub use perturb::{PerturbationKind, PerturbationSpec, PerturbedField};

use crate::error::{check_dim, Error, Result};
use crate::mixture::{ClassPosterior, ConditionLabel, ConditionedMixtureFamily, GaussianMixture};
use crate::schedule::NoiseSchedule;

/// A time- and condition-dependent estimate of `∇_x log q(x_t | c)`.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    /// Whether `score_at(.., ConditionLabel::Null)` is meaningful.
    fn has_null_condition(&self) -> bool;

    fn score_at(&self, x: &[f64], t: usize, c: ConditionLabel) -> Result<Vec<f64>>;
}

impl<F: ScoreField + ?Sized> ScoreField for Arc<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn has_null_condition(&self) -> bool {
        (**self).has_null_condition()
    }

    fn score_at(&self, x: &[f64], t: usize, c: ConditionLabel) -> Result<Vec<f64>> {
        (**self).score_at(x, t, c)
    }
}

fn noise_scale(s: &NoiseSchedule, t: usize) -> Result<f64> {
    s.check_step(t)?;
    let bb = s.beta_bar(t);
    if bb <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta_bar[{t}] = 0; score/eps conversion undefined")));
    }
    Ok(bb.sqrt())
}

/// `s = −ε / √β̄_t`.
pub fn score_from_eps(eps: &[f64], s: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    let k = noise_scale(s, t)?;
    Ok(eps.iter().map(|e| -e / k).collect())
}

/// `ε = −√β̄_t · s`.
pub fn eps_from_score(score: &[f64], s: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    let k = noise_scale(s, t)?;
    Ok(score.iter().map(|v| -v * k).collect())
}

/// Exact scores of a conditioned mixture family under the forward process.
///
/// Diffused families are precomputed for every `t ∈ 0..=T`.
#[derive(Debug, Clone)]
pub struct OracleField {
    family: ConditionedMixtureFamily,
    schedule: NoiseSchedule,
    levels: Vec<ConditionedMixtureFamily>,
}

impl OracleField {
    pub fn new(family: ConditionedMixtureFamily, schedule: NoiseSchedule) -> Result<Self> {
        let levels = (0..=schedule.steps())
            .map(|t| family.diffused(&schedule, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            family,
            schedule,
            levels,
        })
    }

    pub fn family(&self) -> &ConditionedMixtureFamily {
        &self.family
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// The family's step-`t` marginals.
    pub fn level(&self, t: usize) -> Result<&ConditionedMixtureFamily> {
        self.levels.get(t).ok_or(Error::StepOutOfRange {
            t,
            max: self.schedule.steps(),
        })
    }

    pub fn marginal(&self, t: usize, c: ConditionLabel) -> Result<&GaussianMixture> {
        self.level(t)?.mixture(c)
    }

    /// Exact Bayes classifier `q(c | x_t)` with per-class log-probability gradients.
    pub fn classifier(&self, x: &[f64], t: usize) -> Result<ClassPosterior> {
        self.level(t)?.class_posterior(x)
    }
}

impl ScoreField for OracleField {
    fn dim(&self) -> usize {
        self.family.dim()
    }

    fn has_null_condition(&self) -> bool {
        true
    }

    fn score_at(&self, x: &[f64], t: usize, c: ConditionLabel) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        self.marginal(t, c)?.score(x)
    }
}
