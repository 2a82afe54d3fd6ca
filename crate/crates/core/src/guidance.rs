//! Guided scores and the optimal guidance weight.
//!
//! For probes `x_t` drawn from the step-`t` marginal of class `c`, write
//! `Δ = s(x_t, c) − s(x_t, ∅)` and `e = ∇log q(x_t|c) − s(x_t, c)`. The
//! deviation `L(ω) = mean ‖s^cfg_ω − ∇log q(x_t|c)‖² = mean ‖(ω−1)Δ − e‖²`
//! is an exact quadratic in `ω` whose minimizer is
//! `ω* = 1 + Σ⟨Δ, e⟩ / Σ⟨Δ, Δ⟩`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec::{rng_for, Execution, Stream};
use crate::linalg::{dot, norm_sq};
use crate::mixture::ConditionLabel;
use crate::score::{OracleField, ScoreField};

/// Probes with `‖Δ‖²` at or below this are treated as carrying no guidance signal.
pub const DEGENERACY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Cfg,
    Cg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    /// Ignored when `mode` is `None`.
    pub omega: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Cfg,
            omega: 1.0,
        }
    }
}

impl GuidanceSpec {
    pub fn none() -> Self {
        Self {
            mode: GuidanceMode::None,
            omega: 1.0,
        }
    }

    pub fn cfg(omega: f64) -> Self {
        Self {
            mode: GuidanceMode::Cfg,
            omega,
        }
    }

    pub fn cg(omega: f64) -> Self {
        Self {
            mode: GuidanceMode::Cg,
            omega,
        }
    }
}

/// One coordinate of `s_∅ + ω(s_c − s_∅)`, arranged as `s_c + (ω−1)(s_c − s_∅)`
/// so that `ω = 1` returns `s_c` bit for bit.
#[inline]
fn cfg_coordinate(cond: f64, null: f64, omega: f64) -> f64 {
    cond + (omega - 1.0) * (cond - null)
}

/// Classifier-free guidance `s_∅ + ω·(s_c − s_∅)`.
pub fn cfg_combine(s_cond: &[f64], s_null: &[f64], omega: f64) -> Result<Vec<f64>> {
    check_dim(s_cond.len(), s_null.len())?;
    Ok(s_cond
        .iter()
        .zip(s_null)
        .map(|(c, n)| cfg_coordinate(*c, *n, omega))
        .collect())
}

/// Classifier guidance `s_∅ + (ω+1)·∇log q(c|x_t)`.
pub fn cg_combine(s_null: &[f64], classifier_grad: &[f64], omega: f64) -> Result<Vec<f64>> {
    check_dim(s_null.len(), classifier_grad.len())?;
    Ok(s_null
        .iter()
        .zip(classifier_grad)
        .map(|(s, g)| s + (omega + 1.0) * g)
        .collect())
}

/// Evaluates guided scores for a field under a [`GuidanceSpec`].
///
/// Classifier guidance takes its classifier gradient from the exact Bayes
/// classifier of an [`OracleField`].
#[derive(Clone, Copy)]
pub struct Guide<'a> {
    pub field: &'a dyn ScoreField,
    pub classifier: Option<&'a OracleField>,
    pub spec: GuidanceSpec,
}

impl<'a> Guide<'a> {
    pub fn new(field: &'a dyn ScoreField, spec: GuidanceSpec) -> Self {
        Self {
            field,
            classifier: None,
            spec,
        }
    }

    pub fn with_classifier(mut self, classifier: &'a OracleField) -> Self {
        self.classifier = Some(classifier);
        self
    }

    pub fn check(&self) -> Result<()> {
        match self.spec.mode {
            GuidanceMode::None => Ok(()),
            GuidanceMode::Cfg if !self.field.has_null_condition() => Err(Error::NullConditionUnsupported),
            GuidanceMode::Cfg => Ok(()),
            GuidanceMode::Cg if self.classifier.is_none() => {
                Err(Error::MissingOracle("classifier guidance needs an analytic classifier"))
            }
            GuidanceMode::Cg if !self.field.has_null_condition() => Err(Error::NullConditionUnsupported),
            GuidanceMode::Cg => Ok(()),
        }
    }

    pub fn score(&self, x: &[f64], t: usize, c: ConditionLabel, omega: f64) -> Result<Vec<f64>> {
        match self.spec.mode {
            GuidanceMode::None => self.field.score_at(x, t, c),
            GuidanceMode::Cfg => {
                let s_cond = self.field.score_at(x, t, c)?;
                let s_null = self.field.score_at(x, t, ConditionLabel::Null)?;
                cfg_combine(&s_cond, &s_null, omega)
            }
            GuidanceMode::Cg => {
                let classifier = self
                    .classifier
                    .ok_or(Error::MissingOracle("classifier guidance needs an analytic classifier"))?;
                let s_null = self.field.score_at(x, t, ConditionLabel::Null)?;
                match c {
                    ConditionLabel::Null => Ok(s_null),
                    ConditionLabel::Class(k) => {
                        let post = classifier.classifier(x, t)?;
                        let grad = post.log_prob_gradients.get(k).ok_or_else(|| {
                            Error::InvalidArgument(format!("class {k} unknown to the classifier"))
                        })?;
                        cg_combine(&s_null, grad, omega)
                    }
                }
            }
        }
    }
}

/// Draws `n` probes from the step-`t` marginal of condition `c`.
pub fn draw_probes(
    oracle: &OracleField,
    c: ConditionLabel,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let marginal = oracle.marginal(t, c)?;
    let mut rng = rng_for(seed, Stream::Probes, t as u64);
    Ok((0..n).map(|_| marginal.sample(&mut rng)).collect())
}

/// Conditional, null, and true scores evaluated once at a fixed probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeScores {
    pub t: usize,
    pub cond: Vec<Vec<f64>>,
    pub null: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioReading {
    /// `⟨Δ, e⟩ / ⟨Δ, Δ⟩` per probe.
    InnerProduct,
    /// `Δ_i e_i / Δ_i²` per coordinate, masking coordinates below the floor.
    PerDimension,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OmegaEstimator {
    /// Ratio of sums; the exact argmin of the sampled `L(ω)`.
    LeastSquares,
    /// Mean over probes of the per-probe ratio.
    MeanOfRatios { reading: RatioReading },
    /// Brute-force argmin of `L(ω)` on `lo, lo + res, …, hi`.
    Grid { lo: f64, hi: f64, resolution: f64 },
}

impl OmegaEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            OmegaEstimator::LeastSquares => "least_squares",
            OmegaEstimator::MeanOfRatios { .. } => "mean_of_ratios",
            OmegaEstimator::Grid { .. } => "grid",
        }
    }

    pub fn mean_of_ratios() -> Self {
        OmegaEstimator::MeanOfRatios {
            reading: RatioReading::InnerProduct,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaEstimate {
    pub value: f64,
    pub estimator: OmegaEstimator,
    pub sample_count: usize,
    pub t: usize,
    /// Set for grid estimates only.
    pub grid_resolution: Option<f64>,
}

impl ProbeScores {
    pub fn evaluate(
        probes: &[Vec<f64>],
        field: &dyn ScoreField,
        oracle: &dyn ScoreField,
        c: ConditionLabel,
        t: usize,
        exec: Execution,
    ) -> Result<Self> {
        if probes.is_empty() {
            return Err(Error::EmptyInput("probe set"));
        }
        if !field.has_null_condition() {
            return Err(Error::NullConditionUnsupported);
        }
        let rows = exec.try_map(probes.len(), |i| {
            let x = &probes[i];
            Ok::<_, Error>((
                field.score_at(x, t, c)?,
                field.score_at(x, t, ConditionLabel::Null)?,
                oracle.score_at(x, t, c)?,
            ))
        })?;
        let mut out = ProbeScores {
            t,
            cond: Vec::with_capacity(rows.len()),
            null: Vec::with_capacity(rows.len()),
            truth: Vec::with_capacity(rows.len()),
        };
        for (a, b, c) in rows {
            out.cond.push(a);
            out.null.push(b);
            out.truth.push(c);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    /// `mean ‖s_∅ + ω(s_c − s_∅) − ∇log q(x_t|c)‖²` over the probes.
    pub fn l_of_omega(&self, omega: f64) -> f64 {
        let mut total = 0.0;
        for ((c, n), q) in self.cond.iter().zip(&self.null).zip(&self.truth) {
            let mut sq = 0.0;
            for i in 0..c.len() {
                let d = cfg_coordinate(c[i], n[i], omega) - q[i];
                sq += d * d;
            }
            total += sq;
        }
        total / self.len() as f64
    }

    fn deltas_and_errors(&self) -> impl Iterator<Item = (Vec<f64>, Vec<f64>)> + '_ {
        self.cond.iter().zip(&self.null).zip(&self.truth).map(|((c, n), q)| {
            (crate::linalg::sub(c, n), crate::linalg::sub(q, c))
        })
    }

    fn degenerate(&self) -> Error {
        Error::DegenerateGuidance {
            t: self.t,
            n_probes: self.len(),
            floor: DEGENERACY_FLOOR,
        }
    }

    pub fn omega_star(&self, estimator: &OmegaEstimator, exec: Execution) -> Result<OmegaEstimate> {
        if self.is_empty() {
            return Err(Error::EmptyInput("probe set"));
        }
        let informative = self
            .cond
            .iter()
            .zip(&self.null)
            .any(|(c, n)| crate::linalg::dist_sq(c, n) > DEGENERACY_FLOOR);
        if !informative {
            return Err(self.degenerate());
        }
        let mut grid_resolution = None;
        let value = match *estimator {
            OmegaEstimator::LeastSquares => {
                let (mut num, mut den) = (0.0, 0.0);
                for (delta, e) in self.deltas_and_errors() {
                    num += dot(&delta, &e);
                    den += norm_sq(&delta);
                }
                1.0 + num / den
            }
            OmegaEstimator::MeanOfRatios { reading } => {
                let (mut sum, mut count) = (0.0, 0usize);
                for (delta, e) in self.deltas_and_errors() {
                    match reading {
                        RatioReading::InnerProduct => {
                            let dd = norm_sq(&delta);
                            if dd > DEGENERACY_FLOOR {
                                sum += dot(&delta, &e) / dd;
                                count += 1;
                            }
                        }
                        RatioReading::PerDimension => {
                            for (d, ei) in delta.iter().zip(&e) {
                                if d * d > DEGENERACY_FLOOR {
                                    sum += ei / d;
                                    count += 1;
                                }
                            }
                        }
                    }
                }
                if count == 0 {
                    return Err(self.degenerate());
                }
                1.0 + sum / count as f64
            }
            OmegaEstimator::Grid { lo, hi, resolution } => {
                if !(hi > lo && resolution > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "grid needs lo < hi and resolution > 0, got [{lo}, {hi}] step {resolution}"
                    )));
                }
                grid_resolution = Some(resolution);
                let n = ((hi - lo) / resolution).round() as usize;
                let values = exec.map(n + 1, |i| {
                    let omega = lo + (hi - lo) * (i as f64 / n as f64);
                    (omega, self.l_of_omega(omega))
                });
                values
                    .into_iter()
                    .fold((f64::NAN, f64::INFINITY), |best, (w, l)| if l < best.1 { (w, l) } else { best })
                    .0
            }
        };
        Ok(OmegaEstimate {
            value,
            estimator: *estimator,
            sample_count: self.len(),
            t: self.t,
            grid_resolution,
        })
    }
}

/// `L(ω)` for a probe set; see [`ProbeScores::l_of_omega`].
pub fn l_of_omega(
    probes: &[Vec<f64>],
    field: &dyn ScoreField,
    oracle: &dyn ScoreField,
    c: ConditionLabel,
    t: usize,
    omega: f64,
) -> Result<f64> {
    Ok(ProbeScores::evaluate(probes, field, oracle, c, t, Execution::Sequential)?.l_of_omega(omega))
}

/// `ω*` for a probe set; see [`ProbeScores::omega_star`].
pub fn omega_star(
    probes: &[Vec<f64>],
    field: &dyn ScoreField,
    oracle: &dyn ScoreField,
    c: ConditionLabel,
    t: usize,
    estimator: &OmegaEstimator,
) -> Result<OmegaEstimate> {
    ProbeScores::evaluate(probes, field, oracle, c, t, Execution::default())?
        .omega_star(estimator, Execution::default())
}
