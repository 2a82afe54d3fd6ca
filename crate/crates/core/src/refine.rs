//! Per-step inference-time refinement of the guided noise prediction.
//!
//! At each sampling step the guided prediction `ε^cfg` is iterated on the
//! objective `L = ‖ε^cfg − ε‖²` with a reference draw `ε ~ N(0, I)` before
//! the sampler consumes it. Sign, reference-draw policy, and stopping rule
//! are configurable.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, norm, norm_sq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineSign {
    /// `ε ← ε − η·∇L`.
    Descent,
    /// `ε ← ε + η·∇L`. Increases `L` geometrically; kept for comparison.
    Ascent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsMode {
    ResampleEachIter,
    FixedDraw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceRule {
    /// `|L_k − L_{k−1}| < threshold`.
    LossDelta,
    /// `‖∇L_k‖ < threshold`.
    GradNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub eta: f64,
    pub threshold: f64,
    pub max_iters: usize,
    pub sign: RefineSign,
    pub eps_mode: EpsMode,
    pub convergence_rule: ConvergenceRule,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            eta: 5e-2,
            threshold: 1e-3,
            max_iters: 50,
            sign: RefineSign::Descent,
            eps_mode: EpsMode::ResampleEachIter,
            convergence_rule: ConvergenceRule::LossDelta,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            errs.push(format!("refine.eta must be positive, got {}", self.eta));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            errs.push(format!("refine.threshold must be positive, got {}", self.threshold));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
        }
    }
}

/// Loss `L_k` (and `‖∇L_k‖`) recorded at each iteration before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub termination: Termination,
}

impl RefineTrace {
    pub fn iterations(&self) -> usize {
        self.losses.len()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// `‖ε^cfg − ε‖²`.
pub fn refine_objective(eps_cfg: &[f64], eps_ref: &[f64]) -> Result<f64> {
    check_dim(eps_cfg.len(), eps_ref.len())?;
    Ok(crate::linalg::dist_sq(eps_cfg, eps_ref))
}

/// `∇_{ε^cfg} L = 2(ε^cfg − ε)`.
pub fn refine_gradient(eps_cfg: &[f64], eps_ref: &[f64]) -> Result<Vec<f64>> {
    check_dim(eps_cfg.len(), eps_ref.len())?;
    Ok(eps_cfg.iter().zip(eps_ref).map(|(a, b)| 2.0 * (a - b)).collect())
}

/// Stopping test on the latest trace entry. An empty trace never converges,
/// and `LossDelta` needs at least two entries.
pub fn converged(trace: &RefineTrace, cfg: &RefineConfig) -> bool {
    match cfg.convergence_rule {
        ConvergenceRule::LossDelta => match trace.losses.as_slice() {
            [.., prev, last] => (last - prev).abs() < cfg.threshold,
            _ => false,
        },
        ConvergenceRule::GradNorm => trace
            .grad_norms
            .last()
            .is_some_and(|g| *g < cfg.threshold),
    }
}

fn draw<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs the refinement loop and returns the refined prediction with its trace.
///
/// Iteration `k` draws (or reuses) the reference `ε`, records `L_k`, checks
/// the stopping rule, and only then applies the update, so a converged run
/// returns the iterate whose loss was recorded last.
pub fn refine_loop<R: Rng + ?Sized>(
    eps_cfg: &[f64],
    cfg: &RefineConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, RefineTrace)> {
    if !all_finite(eps_cfg) {
        return Err(Error::NonFinite {
            context: "refinement input".into(),
        });
    }
    let mut eps = eps_cfg.to_vec();
    let mut trace = RefineTrace {
        losses: Vec::with_capacity(cfg.max_iters),
        grad_norms: Vec::with_capacity(cfg.max_iters),
        termination: Termination::MaxIters,
    };
    let step = match cfg.sign {
        RefineSign::Descent => -cfg.eta,
        RefineSign::Ascent => cfg.eta,
    };
    let mut fixed: Option<Vec<f64>> = None;
    for _ in 0..cfg.max_iters {
        let reference = match cfg.eps_mode {
            EpsMode::ResampleEachIter => draw(eps.len(), rng),
            EpsMode::FixedDraw => fixed.get_or_insert_with(|| draw(eps.len(), rng)).clone(),
        };
        let grad = refine_gradient(&eps, &reference)?;
        let loss = norm_sq(&crate::linalg::sub(&eps, &reference));
        trace.losses.push(loss);
        trace.grad_norms.push(norm(&grad));
        if !loss.is_finite() {
            return Err(Error::RefineDiverged { trace });
        }
        if converged(&trace, cfg) {
            trace.termination = Termination::Converged;
            break;
        }
        eps.iter_mut().zip(&grad).for_each(|(e, g)| *e += step * g);
    }
    Ok((eps, trace))
}
