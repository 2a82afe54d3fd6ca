//! Reverse-process samplers: DDPM ancestral steps, deterministic DDIM, and a
//! Langevin predictor-corrector.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec::{rng_for, Execution, Stream};
use crate::gap::{mean_coefficient, pointwise_gap};
use crate::guidance::{Guide, GuidanceSpec};
use crate::linalg::{all_finite, norm};
use crate::mixture::ConditionLabel;
use crate::refine::{refine_loop, RefineConfig, RefineTrace};
use crate::schedule::NoiseSchedule;
use crate::score::{eps_from_score, score_from_eps, ScoreField};

/// Upper bound on the Langevin step size `δ`. Applied when the heuristic
/// overshoots, including the zero-score case.
pub const LANGEVIN_MAX_STEP: f64 = 1.0;

pub const DEFAULT_SNR: f64 = 0.16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    PcLangevin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Number of reverse steps; `None` uses every step of the schedule.
    pub steps: Option<usize>,
    pub corrector_iters: usize,
    pub snr_target: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            steps: None,
            corrector_iters: 1,
            snr_target: DEFAULT_SNR,
        }
    }
}

impl SamplerConfig {
    pub fn ddpm() -> Self {
        Self::default()
    }

    pub fn ddim() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            ..Self::default()
        }
    }

    pub fn pc_langevin(corrector_iters: usize, snr_target: f64) -> Self {
        Self {
            kind: SamplerKind::PcLangevin,
            steps: None,
            corrector_iters,
            snr_target,
        }
    }

    pub fn validate(&self, schedule_steps: usize) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if let Some(n) = self.steps {
            if n == 0 || n > schedule_steps {
                errs.push(format!("sampler.steps must be in 1..={schedule_steps}, got {n}"));
            }
        }
        if self.kind == SamplerKind::PcLangevin && self.corrector_iters == 0 {
            errs.push("sampler.corrector_iters must be >= 1 for pc_langevin".into());
        }
        if !(self.snr_target >= 0.0 && self.snr_target.is_finite()) {
            errs.push(format!("sampler.snr_target must be finite and >= 0, got {}", self.snr_target));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Descending visit order. `n` evenly spaced steps from `T` down to `1`
/// (only `T` when `n = 1`).
pub fn timesteps(schedule_steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > schedule_steps {
        return Err(Error::InvalidArgument(format!(
            "cannot take {n} sampling steps from a schedule of {schedule_steps}"
        )));
    }
    if n == 1 {
        return Ok(vec![schedule_steps]);
    }
    let span = (schedule_steps - 1) as f64;
    Ok((0..n)
        .rev()
        .map(|i| 1 + (span * i as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

fn check_pair(s: &NoiseSchedule, t: usize, t_prev: usize) -> Result<()> {
    s.check_step(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("previous step {t_prev} must precede {t}")));
    }
    Ok(())
}

/// `x̂_0 = (x_t − √β̄_t·ε)/√ᾱ_t`.
pub fn predict_x0(s: &NoiseSchedule, t: usize, x_t: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    s.check_step(t)?;
    check_dim(x_t.len(), eps.len())?;
    let (a, b) = (s.alpha_bar(t).sqrt(), s.beta_bar(t).sqrt());
    Ok(x_t.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect())
}

/// `μ̃ = √ᾱ_{t'}·x̂_0 + √β̄_{t'}·(x_t − √ᾱ_t·x̂_0)/√β̄_t` with `t' < t`.
pub fn mu_tilde_between(
    s: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    x_t: &[f64],
    x0_hat: &[f64],
) -> Result<Vec<f64>> {
    check_pair(s, t, t_prev)?;
    check_dim(x_t.len(), x0_hat.len())?;
    let (ap, bp) = (s.alpha_bar(t_prev).sqrt(), s.beta_bar(t_prev).sqrt());
    let (a, b) = (s.alpha_bar(t).sqrt(), s.beta_bar(t).sqrt());
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .map(|(x, x0)| ap * x0 + bp * (x - a * x0) / b)
        .collect())
}

/// [`mu_tilde_between`] for consecutive steps.
pub fn mu_tilde(s: &NoiseSchedule, t: usize, x_t: &[f64], x0_hat: &[f64]) -> Result<Vec<f64>> {
    s.check_step(t)?;
    mu_tilde_between(s, t, t - 1, x_t, x0_hat)
}

/// Posterior standard deviation between `t` and `t' < t`:
/// `σ² = (β̄_{t'}/β̄_t)·(1 − ᾱ_t/ᾱ_{t'})`, which is `(β̄_{t−1}/β̄_t)·β_t` for `t' = t − 1`.
pub fn posterior_sigma(s: &NoiseSchedule, t: usize, t_prev: usize) -> Result<f64> {
    check_pair(s, t, t_prev)?;
    let beta = if t_prev + 1 == t {
        s.beta(t)
    } else {
        1.0 - s.alpha_bar(t) / s.alpha_bar(t_prev)
    };
    Ok((s.beta_bar(t_prev) / s.beta_bar(t) * beta).sqrt())
}

/// `√ᾱ_{t'}·x̂_0 + √(β̄_{t'} − σ²)·ε + σ·z` for any `0 ≤ σ² ≤ β̄_{t'}`.
///
/// With the posterior `σ` this has the mean and variance of
/// `q(x_{t'} | x_t, x̂_0)`; with `σ = 0` it is the DDIM map.
pub fn ancestral_step(
    s: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    x_t: &[f64],
    eps: &[f64],
    sigma: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_pair(s, t, t_prev)?;
    check_dim(x_t.len(), z.len())?;
    let bp = s.beta_bar(t_prev);
    if !(sigma >= 0.0 && sigma * sigma <= bp * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} outside [0, sqrt(beta_bar[{t_prev}])]")));
    }
    let x0 = predict_x0(s, t, x_t, eps)?;
    let ap = s.alpha_bar(t_prev).sqrt();
    let c = (bp - sigma * sigma).max(0.0).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .zip(z)
        .map(|((x0, e), z)| ap * x0 + c * e + sigma * z)
        .collect())
}

/// Ancestral step from `t` to `t_prev` with the posterior `σ` and noise `z`.
/// Deterministic when `t_prev = 0`.
pub fn ddpm_step_with_noise(
    s: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    x_t: &[f64],
    eps: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    let sigma = posterior_sigma(s, t, t_prev)?;
    if sigma == 0.0 {
        return ddim_step_between(s, t, t_prev, x_t, eps);
    }
    ancestral_step(s, t, t_prev, x_t, eps, sigma, z)
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One DDPM step from `t` to `t − 1`. No noise is drawn at `t = 1`.
pub fn ddpm_step<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    t: usize,
    x_t: &[f64],
    eps: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    s.check_step(t)?;
    if t == 1 {
        return ddim_step_between(s, 1, 0, x_t, eps);
    }
    let z = normal_vec(x_t.len(), rng);
    ddpm_step_with_noise(s, t, t - 1, x_t, eps, &z)
}

/// Deterministic (η = 0) step: [`mu_tilde_between`] at the predicted `x̂_0`.
pub fn ddim_step_between(s: &NoiseSchedule, t: usize, t_prev: usize, x_t: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    let x0 = predict_x0(s, t, x_t, eps)?;
    mu_tilde_between(s, t, t_prev, x_t, &x0)
}

pub fn ddim_step(s: &NoiseSchedule, t: usize, x_t: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    s.check_step(t)?;
    ddim_step_between(s, t, t - 1, x_t, eps)
}

/// Step size `δ = 2·(snr·‖z‖/‖score‖)²`, capped at [`LANGEVIN_MAX_STEP`].
pub fn langevin_step_size(snr: f64, z_norm: f64, score_norm: f64) -> f64 {
    if snr == 0.0 {
        return 0.0;
    }
    if score_norm == 0.0 {
        return LANGEVIN_MAX_STEP;
    }
    (2.0 * (snr * z_norm / score_norm).powi(2)).min(LANGEVIN_MAX_STEP)
}

/// One corrector sweep `x + δ·score + √(2δ)·z` with a supplied noise draw.
pub fn langevin_update(x: &[f64], score: &[f64], z: &[f64], snr: f64) -> Result<Vec<f64>> {
    check_dim(x.len(), score.len())?;
    check_dim(x.len(), z.len())?;
    let delta = langevin_step_size(snr, norm(z), norm(score));
    let k = (2.0 * delta).sqrt();
    Ok(x.iter()
        .zip(score)
        .zip(z)
        .map(|((x, s), z)| x + delta * s + k * z)
        .collect())
}

/// Runs `iters` Langevin sweeps at fixed `t` on the score of `field`.
pub fn langevin_correct<R: Rng + ?Sized>(
    field: &dyn ScoreField,
    x: &[f64],
    t: usize,
    c: ConditionLabel,
    snr_target: f64,
    iters: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if iters == 0 {
        return Err(Error::InvalidArgument("langevin_correct needs iters >= 1".into()));
    }
    let mut x = x.to_vec();
    for _ in 0..iters {
        let score = field.score_at(&x, t, c)?;
        let z = normal_vec(x.len(), rng);
        x = langevin_update(&x, &score, &z, snr_target)?;
    }
    Ok(x)
}

/// Langevin sweeps driven by a guided score; noise draws are appended to `noise`.
fn guided_langevin<R: Rng + ?Sized>(
    guide: &Guide<'_>,
    x: &[f64],
    t: usize,
    c: ConditionLabel,
    omega: f64,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    for _ in 0..cfg.corrector_iters {
        let score = guide.score(&x, t, c, omega)?;
        let z = normal_vec(x.len(), rng);
        x = langevin_update(&x, &score, &z, cfg.snr_target)?;
    }
    Ok(x)
}

/// Score error at the state the sampler actually visited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepGap {
    /// `‖s_used − ∇log q(x_t|c)‖²`.
    pub pointwise: f64,
    /// `‖μ* − μ_used‖² = c_t²·pointwise`.
    pub mean_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub omega: f64,
    /// Guided prediction before refinement.
    pub eps_guided: Vec<f64>,
    /// Prediction consumed by the step function.
    pub eps_used: Vec<f64>,
    /// State after the corrector; the step function's input when present.
    pub corrected: Option<Vec<f64>>,
    /// Predictor noise; `None` when the step is deterministic.
    pub noise: Option<Vec<f64>>,
    /// Index into [`Trajectory::refine_traces`].
    pub refine: Option<usize>,
    pub gap: Option<StepGap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub chain: u64,
    pub condition: ConditionLabel,
    pub guidance: GuidanceSpec,
    pub sampler: SamplerConfig,
    /// `x_T, …, x_0` in visit order.
    pub states: Vec<Vec<f64>>,
    pub steps: Vec<StepRecord>,
    pub refine_traces: Vec<RefineTrace>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    /// The state fed to the step function at record `i`.
    pub fn step_input(&self, i: usize) -> &[f64] {
        self.steps[i].corrected.as_deref().unwrap_or(&self.states[i])
    }
}

/// Everything a chain needs besides its seed.
#[derive(Clone, Copy)]
pub struct ChainSetup<'a> {
    pub schedule: &'a NoiseSchedule,
    pub guide: Guide<'a>,
    pub sampler: SamplerConfig,
    pub refine: Option<RefineConfig>,
    pub condition: ConditionLabel,
    /// When present, records per-step gap terms against this field.
    pub oracle: Option<&'a dyn ScoreField>,
    /// Per-step weights indexed by `t` (length `T + 1`), overriding the spec's weight.
    pub omega_schedule: Option<&'a [f64]>,
}

impl<'a> ChainSetup<'a> {
    pub fn new(schedule: &'a NoiseSchedule, guide: Guide<'a>, sampler: SamplerConfig, condition: ConditionLabel) -> Self {
        Self {
            schedule,
            guide,
            sampler,
            refine: None,
            condition,
            oracle: None,
            omega_schedule: None,
        }
    }

    fn omega_at(&self, t: usize) -> f64 {
        self.omega_schedule
            .and_then(|w| w.get(t).copied())
            .unwrap_or(self.guide.spec.omega)
    }

    fn check(&self) -> Result<()> {
        self.guide.check()?;
        self.sampler
            .validate(self.schedule.steps())
            .map_err(Error::Config)?;
        if let Some(r) = &self.refine {
            r.validate().map_err(Error::Config)?;
        }
        if let Some(w) = self.omega_schedule {
            if w.len() != self.schedule.steps() + 1 {
                return Err(Error::InvalidArgument(format!(
                    "omega schedule has {} entries, expected {}",
                    w.len(),
                    self.schedule.steps() + 1
                )));
            }
        }
        if let Some(o) = self.oracle {
            check_dim(self.guide.field.dim(), o.dim())?;
        }
        Ok(())
    }
}

/// Runs one reverse chain from `x_T ~ N(0, I)`.
///
/// Predictor and corrector noise come from the chain stream of `(seed,
/// chain)`; refinement draws from a separate stream, so toggling refinement
/// leaves the chain's own noise unchanged.
pub fn sample_chain(setup: &ChainSetup<'_>, seed: u64, chain: u64) -> Result<Trajectory> {
    setup.check()?;
    let s = setup.schedule;
    let c = setup.condition;
    let n = setup.sampler.steps.unwrap_or(s.steps());
    let ts = timesteps(s.steps(), n)?;
    let mut rng = rng_for(seed, Stream::Chain, chain);
    let mut refine_rng = rng_for(seed, Stream::Refine, chain);
    let dim = setup.guide.field.dim();

    let mut traj = Trajectory {
        seed,
        chain,
        condition: c,
        guidance: setup.guide.spec,
        sampler: setup.sampler,
        states: Vec::with_capacity(ts.len() + 1),
        steps: Vec::with_capacity(ts.len()),
        refine_traces: Vec::new(),
    };
    traj.states.push(normal_vec(dim, &mut rng));

    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let record = (|| {
            let omega = setup.omega_at(t);
            let x_in = traj.states.last().expect("initial state");
            let corrected = match setup.sampler.kind {
                SamplerKind::PcLangevin => Some(guided_langevin(
                    &setup.guide,
                    x_in,
                    t,
                    c,
                    omega,
                    &setup.sampler,
                    &mut rng,
                )?),
                _ => None,
            };
            let x = corrected.as_deref().unwrap_or(x_in);
            let score = setup.guide.score(x, t, c, omega)?;
            let eps_guided = eps_from_score(&score, s, t)?;
            let (eps_used, refine) = match &setup.refine {
                Some(cfg) => {
                    let (e, trace) = refine_loop(&eps_guided, cfg, &mut refine_rng)?;
                    traj.refine_traces.push(trace);
                    (e, Some(traj.refine_traces.len() - 1))
                }
                None => (eps_guided.clone(), None),
            };
            let noise = match setup.sampler.kind {
                SamplerKind::Ddim => None,
                _ if t_prev == 0 => None,
                _ => Some(normal_vec(dim, &mut rng)),
            };
            let x_prev = apply_step(s, setup.sampler.kind, t, t_prev, x, &eps_used, noise.as_deref())?;
            if !all_finite(&x_prev) {
                return Err(Error::NonFinite {
                    context: "sampler state".into(),
                });
            }
            let gap = match setup.oracle {
                Some(oracle) => {
                    let used = score_from_eps(&eps_used, s, t)?;
                    let pointwise = pointwise_gap(oracle, &used, x, t, c)?;
                    let k = mean_coefficient(s, t, t_prev)?;
                    Some(StepGap {
                        pointwise,
                        mean_deviation: k * k * pointwise,
                    })
                }
                None => None,
            };
            Ok((
                StepRecord {
                    t,
                    t_prev,
                    omega,
                    eps_guided,
                    eps_used,
                    corrected,
                    noise,
                    refine,
                    gap,
                },
                x_prev,
            ))
        })()
        .map_err(|e: Error| e.at_step(t))?;
        traj.steps.push(record.0);
        traj.states.push(record.1);
    }
    Ok(traj)
}

fn apply_step(
    s: &NoiseSchedule,
    kind: SamplerKind,
    t: usize,
    t_prev: usize,
    x: &[f64],
    eps: &[f64],
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    match (kind, noise) {
        (SamplerKind::Ddim, _) | (_, None) => ddim_step_between(s, t, t_prev, x, eps),
        (_, Some(z)) => ddpm_step_with_noise(s, t, t_prev, x, eps, z),
    }
}

/// Recomputes every `x_{t−1}` from the recorded inputs, `eps_used`, and noise.
pub fn replay(s: &NoiseSchedule, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(traj.steps.len());
    for (i, r) in traj.steps.iter().enumerate() {
        let x = traj.step_input(i);
        out.push(apply_step(s, traj.sampler.kind, r.t, r.t_prev, x, &r.eps_used, r.noise.as_deref())?);
    }
    Ok(out)
}

/// Runs chains `0..n` of `seed`; output order is chain order under either strategy.
pub fn sample_chains(setup: &ChainSetup<'_>, seed: u64, n: usize, exec: Execution) -> Result<Vec<Trajectory>> {
    setup.check()?;
    exec.try_map(n, |i| sample_chain(setup, seed, i as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::SimRng;
    use crate::guidance::GuidanceSpec;
    use crate::mixture::{ConditionedMixtureFamily, GaussianMixture};
    use crate::refine::{EpsMode, RefineConfig};
    use crate::score::{OracleField, PerturbationSpec, PerturbedField};
    use rand::SeedableRng;
    use std::sync::Arc;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-3, 0.2).unwrap()
    }

    fn gaussian_oracle(steps: usize, b0: f64, b1: f64, mean: f64, var: f64) -> OracleField {
        let fam = ConditionedMixtureFamily::new(vec![1.0], vec![GaussianMixture::gaussian(vec![mean], vec![var]).unwrap()]).unwrap();
        OracleField::new(fam, NoiseSchedule::linear(steps, b0, b1).unwrap()).unwrap()
    }

    #[test]
    fn timesteps_are_even_and_cover_both_ends() {
        assert_eq!(timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(timesteps(100, 4).unwrap(), vec![100, 67, 34, 1]);
        assert_eq!(timesteps(100, 1).unwrap(), vec![100]);
        assert_eq!(timesteps(1000, 2).unwrap(), vec![1000, 1]);
        assert!(timesteps(10, 11).is_err());
        assert!(timesteps(10, 0).is_err());
        for n in 2..=37 {
            let ts = timesteps(37, n).unwrap();
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
            assert_eq!((ts[0], ts[n - 1]), (37, 1));
        }
    }

    #[test]
    fn mu_tilde_terminal_and_zero_noise_ray() {
        let s = sched();
        let x0 = [0.7, -1.3];
        let xt = [4.0, 2.0];
        assert_eq!(mu_tilde(&s, 1, &xt, &x0).unwrap(), x0.to_vec());
        let t = 20;
        let ray: Vec<f64> = x0.iter().map(|v| s.alpha_bar(t).sqrt() * v).collect();
        let m = mu_tilde(&s, t, &ray, &x0).unwrap();
        for (m, v) in m.iter().zip(x0) {
            assert!((m - s.alpha_bar(t - 1).sqrt() * v).abs() < 1e-12);
        }
        assert!(mu_tilde(&s, 0, &xt, &x0).is_err());
        assert!(mu_tilde(&s, 51, &xt, &x0).is_err());
    }

    #[test]
    fn mu_tilde_matches_expanded_form() {
        // μ̃ = A·x_0 + B·x_t with A = √ᾱ_{t−1} − √(β̄_{t−1}ᾱ_t/β̄_t), B = √(β̄_{t−1}/β̄_t)
        let s = sched();
        let mut rng = SimRng::seed_from_u64(11);
        for _ in 0..100 {
            let t = rng.random_range(1..=50);
            let x0 = [rng.random_range(-3.0..3.0)];
            let xt = [rng.random_range(-3.0..3.0)];
            let (ab, bb) = (s.alpha_bar(t), s.beta_bar(t));
            let (abp, bbp) = (s.alpha_bar(t - 1), s.beta_bar(t - 1));
            let a = abp.sqrt() - (bbp * ab / bb).sqrt();
            let b = (bbp / bb).sqrt();
            let want = a * x0[0] + b * xt[0];
            let got = mu_tilde(&s, t, &xt, &x0).unwrap()[0];
            assert!((got - want).abs() < 1e-12, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn x0_prediction_inverts_the_forward_marginal() {
        let s = sched();
        let x0 = [1.25, -0.5, 3.0];
        let eps = [0.3, -1.1, 0.05];
        for t in [1, 10, 50] {
            let xt = s.forward_marginal(&x0, t, &eps).unwrap();
            let back = predict_x0(&s, t, &xt, &eps).unwrap();
            for (a, b) in back.iter().zip(x0) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ddpm_at_first_step_is_x0_prediction() {
        let s = sched();
        let xt = [0.4, 0.9];
        let eps = [1.0, -2.0];
        let mut rng = SimRng::seed_from_u64(0);
        let got = ddpm_step(&s, 1, &xt, &eps, &mut rng).unwrap();
        assert_eq!(got, predict_x0(&s, 1, &xt, &eps).unwrap());
        let mut rng2 = SimRng::seed_from_u64(0);
        // no draw was consumed
        assert_eq!(rng.random::<u64>(), rng2.random::<u64>());
    }

    #[test]
    fn ddpm_and_ddim_share_the_mean_path() {
        let s = sched();
        let xt = [0.4, -0.9];
        let eps = [0.2, 0.3];
        for (t, tp) in [(1, 0), (2, 1), (25, 24), (50, 49), (50, 10)] {
            let d = ddim_step_between(&s, t, tp, &xt, &eps).unwrap();
            let p = ancestral_step(&s, t, tp, &xt, &eps, 0.0, &[5.0, -5.0]).unwrap();
            for (a, b) in d.iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(posterior_sigma(&s, 1, 0).unwrap(), 0.0);
        let t = 30;
        let want = (s.beta_bar(t - 1) / s.beta_bar(t) * s.beta(t)).sqrt();
        assert!((posterior_sigma(&s, t, t - 1).unwrap() - want).abs() < 1e-15);
        let skip = posterior_sigma(&s, 30, 10).unwrap();
        assert!(skip > want && skip * skip <= s.beta_bar(10));
        assert!(ancestral_step(&s, 30, 29, &xt, &eps, 1.0, &xt).is_err());
    }

    #[test]
    fn ddim_with_zero_eps_rescales_state() {
        let s = sched();
        let xt = [1.5, -2.0];
        let t = 17;
        let got = ddim_step(&s, t, &xt, &[0.0, 0.0]).unwrap();
        let x0: Vec<f64> = xt.iter().map(|x| x / s.alpha_bar(t).sqrt()).collect();
        let via_mu = mu_tilde(&s, t, &xt, &x0).unwrap();
        for ((g, m), x) in got.iter().zip(&via_mu).zip(xt) {
            assert!((g - m).abs() < 1e-12);
            assert!((g - (s.alpha_bar(t - 1) / s.alpha_bar(t)).sqrt() * x).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_variance_is_reproduced_by_the_ddpm_step() {
        // with ε equal to the true noise, x_{t−1} | x_0 has variance β̄_{t−1}
        let s = sched();
        let t = 20;
        let x0 = [0.5];
        let mut rng = SimRng::seed_from_u64(5);
        let n = 100_000;
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..n {
            let e = [rng.sample::<f64, _>(StandardNormal)];
            let xt = s.forward_marginal(&x0, t, &e).unwrap();
            let xp = ddpm_step(&s, t, &xt, &e, &mut rng).unwrap()[0];
            m += xp;
            v += xp * xp;
        }
        m /= n as f64;
        v = v / n as f64 - m * m;
        let want_m = s.alpha_bar(t - 1).sqrt() * 0.5;
        let want_v = s.beta_bar(t - 1);
        assert!((m - want_m).abs() < 4.0 * (want_v / n as f64).sqrt());
        assert!((v - want_v).abs() < 4.0 * want_v * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn langevin_limits() {
        let x = [0.3, -0.2];
        let z = [1.0, 2.0];
        let zero = [0.0, 0.0];
        let got = langevin_update(&x, &zero, &z, 0.16).unwrap();
        let k = (2.0 * LANGEVIN_MAX_STEP).sqrt();
        assert_eq!(got, vec![0.3 + k, -0.2 + 2.0 * k]);
        assert_eq!(langevin_update(&x, &[1.0, 1.0], &z, 0.0).unwrap(), x.to_vec());
        assert_eq!(langevin_step_size(0.0, 1.0, 0.0), 0.0);
        assert!((langevin_step_size(0.1, 2.0, 4.0) - 2.0 * 0.05f64.powi(2)).abs() < 1e-15);
        assert_eq!(langevin_step_size(10.0, 5.0, 1.0), LANGEVIN_MAX_STEP);
    }

    #[test]
    fn langevin_correct_requires_an_iteration() {
        let o = gaussian_oracle(10, 1e-3, 0.1, 0.0, 1.0);
        let mut rng = SimRng::seed_from_u64(0);
        assert!(langevin_correct(&o, &[0.0], 3, ConditionLabel::Class(0), 0.16, 0, &mut rng).is_err());
    }

    /// N(0, I) target: `∇log p = −x` at every `t`.
    struct StandardNormalField(usize);

    impl ScoreField for StandardNormalField {
        fn dim(&self) -> usize {
            self.0
        }
        fn has_null_condition(&self) -> bool {
            true
        }
        fn score_at(&self, x: &[f64], _: usize, _: ConditionLabel) -> Result<Vec<f64>> {
            Ok(x.iter().map(|v| -v).collect())
        }
    }

    #[test]
    fn langevin_keeps_standard_normal_stationary() {
        // The per-chain step-size heuristic has an O(1/d + δ) variance bias,
        // so the check runs in high dimension with a small snr.
        let d = 2048;
        let field = StandardNormalField(d);
        let chains = 128;
        let results = Execution::default().map(chains, |i| {
            let mut rng = rng_for(3, Stream::Chain, i as u64);
            let x0 = normal_vec(d, &mut rng);
            langevin_correct(&field, &x0, 1, ConditionLabel::Null, 0.03, 600, &mut rng).unwrap()
        });
        let n = (chains * d) as f64;
        let sum: f64 = results.iter().flatten().sum();
        let sq: f64 = results.iter().flatten().map(|v| v * v).sum();
        let mean = sum / n;
        let var = sq / n - mean * mean;
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "var {var}");
    }

    fn setup_for<'a>(o: &'a OracleField, field: &'a dyn ScoreField, guidance: GuidanceSpec, sampler: SamplerConfig) -> ChainSetup<'a> {
        ChainSetup::new(o.schedule(), Guide::new(field, guidance).with_classifier(o), sampler, ConditionLabel::Class(0))
    }

    fn final_moments(traj: &[Trajectory]) -> (f64, f64) {
        let xs: Vec<f64> = traj.iter().map(|c| c.final_state()[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
    }

    /// Exact output moments of the DDPM chain on N(μ, v) data with exact scores:
    /// each step is affine in `x_t` plus independent noise.
    fn ddpm_pushforward(s: &NoiseSchedule, mu: f64, v: f64) -> (f64, f64) {
        let (mut m, mut var) = (0.0, 1.0);
        for t in (1..=s.steps()).rev() {
            let (ab, bb, abp, bbp) = (s.alpha_bar(t), s.beta_bar(t), s.alpha_bar(t - 1), s.beta_bar(t - 1));
            let ke = bb.sqrt() / (ab * v + bb);
            let sig2 = bbp / bb * s.beta(t);
            let ce = (bbp - sig2).sqrt();
            let a = abp.sqrt() * (1.0 - bb.sqrt() * ke) / ab.sqrt() + ce * ke;
            let b = abp.sqrt() * bb.sqrt() * ke * mu - ce * ke * ab.sqrt() * mu;
            m = a * m + b;
            var = a * a * var + sig2;
        }
        (m, var)
    }

    #[test]
    fn ddpm_oracle_chain_matches_exact_pushforward() {
        // a coarse schedule has a visible discretization bias in the variance
        let o = gaussian_oracle(100, 1e-3, 0.2, 1.5, 2.0);
        let (pm, pv) = ddpm_pushforward(o.schedule(), 1.5, 2.0);
        assert!((pv - 2.0).abs() > 0.1);
        let setup = setup_for(&o, &o, GuidanceSpec::none(), SamplerConfig::ddpm());
        let chains = sample_chains(&setup, 21, 10_000, Execution::default()).unwrap();
        let (mean, var) = final_moments(&chains);
        let n = chains.len() as f64;
        assert!((mean - pm).abs() < 4.0 * (pv / n).sqrt(), "mean {mean} vs {pm}");
        assert!((var - pv).abs() < 4.0 * pv * (2.0 / n).sqrt(), "var {var} vs {pv}");
    }

    #[test]
    fn ddpm_oracle_chain_matches_gaussian_data() {
        let o = gaussian_oracle(1000, 1e-4, 0.02, 1.5, 2.0);
        let setup = setup_for(&o, &o, GuidanceSpec::none(), SamplerConfig::ddpm());
        let chains = sample_chains(&setup, 22, 10_000, Execution::default()).unwrap();
        let (mean, var) = final_moments(&chains);
        let n = chains.len() as f64;
        assert!((mean - 1.5).abs() < 4.0 * (2.0 / n).sqrt(), "mean {mean}");
        assert!((var - 2.0).abs() < 4.0 * 2.0 * (2.0 / n).sqrt(), "var {var}");
    }

    #[test]
    fn trajectory_shape_and_self_certification() {
        let o = gaussian_oracle(40, 1e-3, 0.3, 0.0, 1.0);
        let pert = PerturbedField::new(Arc::new(o.clone()), PerturbationSpec::constant(0.5, 1)).unwrap();
        let refine = RefineConfig {
            eps_mode: EpsMode::FixedDraw,
            ..RefineConfig::default()
        };
        for sampler in [
            SamplerConfig::ddpm(),
            SamplerConfig::ddim(),
            SamplerConfig::pc_langevin(2, 0.16),
            SamplerConfig { steps: Some(7), ..SamplerConfig::ddim() },
            SamplerConfig { steps: Some(9), ..SamplerConfig::ddpm() },
        ] {
            let mut setup = setup_for(&o, &pert, GuidanceSpec::cfg(2.0), sampler);
            setup.refine = Some(refine);
            setup.oracle = Some(&o);
            let traj = sample_chain(&setup, 4, 0).unwrap();
            let n = sampler.steps.unwrap_or(40);
            assert_eq!(traj.states.len(), n + 1);
            assert_eq!(traj.steps.len(), n);
            assert_eq!(traj.refine_traces.len(), n);
            let replayed = replay(o.schedule(), &traj).unwrap();
            assert_eq!(&replayed[..], &traj.states[1..]);
            assert!(traj.steps.iter().all(|r| r.gap.is_some()));
            assert_eq!(traj.steps.last().unwrap().t_prev, 0);
        }
    }

    #[test]
    fn ddim_chains_are_deterministic_and_parallel_safe() {
        let f = ConditionedMixtureFamily::preset("bimodal-1d").unwrap();
        let o = OracleField::new(f, NoiseSchedule::linear(30, 1e-3, 0.3).unwrap()).unwrap();
        let setup = setup_for(&o, &o, GuidanceSpec::cfg(3.0), SamplerConfig::ddim());
        let a = sample_chains(&setup, 9, 16, Execution::Sequential).unwrap();
        let b = sample_chains(&setup, 9, 16, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.steps.iter().all(|r| r.noise.is_none())));
    }

    #[test]
    fn unit_weight_cfg_equals_unguided_sampling() {
        let f = ConditionedMixtureFamily::preset("ring-2d").unwrap();
        let o = OracleField::new(f, NoiseSchedule::linear(30, 1e-3, 0.3).unwrap()).unwrap();
        let pert = PerturbedField::new(Arc::new(o.clone()), PerturbationSpec::constant(0.7, 2)).unwrap();
        for sampler in [SamplerConfig::ddpm(), SamplerConfig::ddim()] {
            let a = sample_chain(&setup_for(&o, &pert, GuidanceSpec::none(), sampler), 5, 3).unwrap();
            let b = sample_chain(&setup_for(&o, &pert, GuidanceSpec::cfg(1.0), sampler), 5, 3).unwrap();
            assert_eq!(a.states, b.states);
        }
    }

    #[test]
    fn zero_iteration_refinement_is_a_no_op() {
        let f = ConditionedMixtureFamily::preset("bimodal-1d").unwrap();
        let o = OracleField::new(f, NoiseSchedule::linear(30, 1e-3, 0.3).unwrap()).unwrap();
        let plain = setup_for(&o, &o, GuidanceSpec::cfg(2.0), SamplerConfig::ddpm());
        let mut refined = plain;
        refined.refine = Some(RefineConfig {
            max_iters: 0,
            ..RefineConfig::default()
        });
        let a = sample_chain(&plain, 1, 0).unwrap();
        let b = sample_chain(&refined, 1, 0).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn oracle_without_guidance_has_no_gap() {
        let f = ConditionedMixtureFamily::preset("ring-2d").unwrap();
        let o = OracleField::new(f, NoiseSchedule::linear(30, 1e-3, 0.3).unwrap()).unwrap();
        let mut setup = setup_for(&o, &o, GuidanceSpec::none(), SamplerConfig::ddpm());
        setup.oracle = Some(&o);
        let traj = sample_chain(&setup, 2, 0).unwrap();
        let total: f64 = traj.steps.iter().map(|r| r.gap.unwrap().pointwise).sum();
        assert!(total < 1e-10, "{total}");
    }

    #[test]
    fn errors_carry_the_step() {
        let o = gaussian_oracle(10, 1e-3, 0.1, 0.0, 1.0);
        let setup = setup_for(&o, &o, GuidanceSpec::cg(1.0), SamplerConfig::ddpm());
        let mut bad = setup;
        bad.guide = Guide::new(&o, GuidanceSpec::cg(1.0));
        assert!(matches!(sample_chain(&bad, 0, 0), Err(Error::MissingOracle(_))));
        let mut bad_steps = setup;
        bad_steps.sampler.steps = Some(11);
        assert!(matches!(sample_chain(&bad_steps, 0, 0), Err(Error::Config(_))));
        // refinement that diverges surfaces with its step
        let mut diverge = setup;
        diverge.refine = Some(RefineConfig {
            eta: 1e200,
            max_iters: 10,
            ..RefineConfig::default()
        });
        match sample_chain(&diverge, 0, 0) {
            Err(Error::AtStep { t: 10, source }) => assert!(matches!(*source, Error::RefineDiverged { .. })),
            other => panic!("unexpected {other:?}"),
        }
    }
}
