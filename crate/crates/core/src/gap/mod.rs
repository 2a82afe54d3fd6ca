//! Training-inference gap along realized trajectories, and sample-quality metrics.

mod metrics;

pub use metrics::{knn_precision_recall, mmd_rbf, noise_floor, sliced_wasserstein, PrecisionRecall};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;
use crate::linalg::dist_sq;
use crate::mixture::ConditionLabel;
use crate::sampler::{mu_tilde_between, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::score::{score_from_eps, ScoreField};

/// `‖score − ∇log q(x_t|c)‖²` against an exact oracle.
pub fn pointwise_gap(oracle: &dyn ScoreField, score: &[f64], x: &[f64], t: usize, c: ConditionLabel) -> Result<f64> {
    let truth = oracle.score_at(x, t, c)?;
    check_dim(truth.len(), score.len())?;
    Ok(dist_sq(score, &truth))
}

/// Affine coefficient of the score in the reverse mean between `t` and `t_prev`:
/// `c = (√ᾱ_{t'} − √(β̄_{t'}ᾱ_t/β̄_t))·β̄_t/√ᾱ_t`.
pub fn mean_coefficient(s: &NoiseSchedule, t: usize, t_prev: usize) -> Result<f64> {
    s.check_step(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("previous step {t_prev} must precede {t}")));
    }
    let (ab, bb) = (s.alpha_bar(t), s.beta_bar(t));
    let (abp, bbp) = (s.alpha_bar(t_prev), s.beta_bar(t_prev));
    Ok((abp.sqrt() - (bbp * ab / bb).sqrt()) * bb / ab.sqrt())
}

/// Reverse mean with the score substituted for the noise prediction.
fn mean_from_score(s: &NoiseSchedule, t: usize, x_t: &[f64], score: &[f64]) -> Result<Vec<f64>> {
    let (a, bb) = (s.alpha_bar(t).sqrt(), s.beta_bar(t));
    let x0: Vec<f64> = x_t.iter().zip(score).map(|(x, g)| (x + bb * g) / a).collect();
    mu_tilde_between(s, t, t - 1, x_t, &x0)
}

/// `‖μ*_t − μ_t‖²` with both means evaluated from their scores. Equals
/// `mean_coefficient(s, t, t−1)² · ‖guided − oracle‖²`.
pub fn mean_deviation(s: &NoiseSchedule, t: usize, x_t: &[f64], guided_score: &[f64], oracle_score: &[f64]) -> Result<f64> {
    s.check_step(t)?;
    check_dim(x_t.len(), guided_score.len())?;
    check_dim(x_t.len(), oracle_score.len())?;
    let a = mean_from_score(s, t, x_t, oracle_score)?;
    let b = mean_from_score(s, t, x_t, guided_score)?;
    Ok(dist_sq(&a, &b))
}

/// One sampling step of a [`GapReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub t: usize,
    /// Mean over chains of the pointwise gap at the visited state.
    pub gap: f64,
    /// Probe deviation `L(1)`.
    pub l1: Option<f64>,
    /// Probe deviation at the weight the sampler used.
    pub l_used: Option<f64>,
    pub omega_star: Option<f64>,
    pub n_probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub entries: Vec<GapEntry>,
    pub accumulated_gap: f64,
    pub n_chains: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub accumulated_gap: f64,
    pub n_chains: usize,
    pub seeds: Vec<u64>,
}

/// Per-step pointwise gaps of one trajectory, recomputed from `eps_used`.
pub fn step_gaps(s: &NoiseSchedule, traj: &Trajectory, oracle: &dyn ScoreField) -> Result<Vec<(usize, f64)>> {
    if traj.states.len() != traj.steps.len() + 1 {
        return Err(Error::MissingRecord(format!(
            "{} states for {} step records",
            traj.states.len(),
            traj.steps.len()
        )));
    }
    traj.steps
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.eps_used.is_empty() {
                return Err(Error::MissingRecord(format!("eps_used at t={}", r.t)));
            }
            let score = score_from_eps(&r.eps_used, s, r.t)?;
            Ok((r.t, pointwise_gap(oracle, &score, traj.step_input(i), r.t, traj.condition)?))
        })
        .collect()
}

/// Gap report of a single trajectory.
pub fn accumulated_gap(s: &NoiseSchedule, traj: &Trajectory, oracle: &dyn ScoreField) -> Result<GapReport> {
    GapReport::from_trajectories(s, std::slice::from_ref(traj), oracle, Execution::Sequential)
}

impl GapReport {
    /// Averages per-step gaps over chains that share a visit order.
    pub fn from_trajectories(
        s: &NoiseSchedule,
        trajs: &[Trajectory],
        oracle: &dyn ScoreField,
        exec: Execution,
    ) -> Result<Self> {
        let first = trajs.first().ok_or(Error::EmptyInput("trajectory set"))?;
        let per_chain = exec.try_map(trajs.len(), |i| step_gaps(s, &trajs[i], oracle))?;
        let ts: Vec<usize> = first.steps.iter().map(|r| r.t).collect();
        let mut sums = vec![0.0; ts.len()];
        for chain in &per_chain {
            if chain.len() != ts.len() || chain.iter().zip(&ts).any(|((a, _), b)| a != b) {
                return Err(Error::InvalidArgument("trajectories visit different steps".into()));
            }
            for (acc, (_, g)) in sums.iter_mut().zip(chain) {
                *acc += g;
            }
        }
        let n = trajs.len() as f64;
        let entries: Vec<GapEntry> = ts
            .iter()
            .zip(sums)
            .map(|(&t, sum)| GapEntry {
                t,
                gap: sum / n,
                l1: None,
                l_used: None,
                omega_star: None,
                n_probes: 0,
            })
            .collect();
        let mut seeds: Vec<u64> = trajs.iter().map(|t| t.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        Ok(Self::from_entries(entries, trajs.len(), seeds))
    }

    pub fn from_entries(entries: Vec<GapEntry>, n_chains: usize, seeds: Vec<u64>) -> Self {
        let accumulated_gap = entries.iter().map(|e| e.gap).sum();
        Self {
            entries,
            accumulated_gap,
            n_chains,
            seeds,
        }
    }

    /// Entries `range` as a report of their own.
    pub fn segment(&self, range: std::ops::Range<usize>) -> Self {
        Self::from_entries(self.entries[range].to_vec(), self.n_chains, self.seeds.clone())
    }

    /// Joins consecutive segments of the same chains.
    pub fn concat(&self, later: &GapReport) -> Result<Self> {
        if self.n_chains != later.n_chains || self.seeds != later.seeds {
            return Err(Error::InvalidArgument("segments come from different chains".into()));
        }
        let mut entries = self.entries.clone();
        entries.extend(later.entries.iter().cloned());
        Ok(Self::from_entries(entries, self.n_chains, self.seeds.clone()))
    }

    /// Attaches probe-based deviations for step `t`.
    pub fn set_probe_terms(&mut self, t: usize, l1: f64, l_used: f64, omega_star: Option<f64>, n_probes: usize) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.t == t)
            .ok_or_else(|| Error::MissingRecord(format!("no gap entry for t={t}")))?;
        e.l1 = Some(l1);
        e.l_used = Some(l_used);
        e.omega_star = omega_star;
        e.n_probes = n_probes;
        Ok(())
    }

    pub fn summary(&self) -> GapSummary {
        GapSummary {
            accumulated_gap: self.accumulated_gap,
            n_chains: self.n_chains,
            seeds: self.seeds.clone(),
        }
    }

    /// Columns `t,gap,L1,Lw,omega_star,n_probes`; absent values are empty.
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|v| format!("{v:e}")).unwrap_or_default()
        }
        let mut out = String::from("t,gap,L1,Lw,omega_star,n_probes\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{:e},{},{},{},{}",
                e.t,
                e.gap,
                opt(e.l1),
                opt(e.l_used),
                opt(e.omega_star),
                e.n_probes
            );
        }
        out
    }
}
