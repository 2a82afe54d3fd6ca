//! Diagonal Gaussian mixtures with closed-form densities, scores, diffused
//! marginals and an exact Bayes classifier.
//!
//! A Gaussian mixture stays a Gaussian mixture under the forward process:
//! at step `t` each component `N(μ, diag(v))` becomes
//! `N(√ᾱ_t·μ, diag(ᾱ_t·v + β̄_t))`. That makes `∇ log q(x_t | c)` exactly
//! computable at every step, which is what the score oracle is built on.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::linalg::log_sum_exp;
use crate::schedule::NoiseSchedule;

/// Floor applied to posterior probabilities before they are divided by or logged.
pub const RESPONSIBILITY_FLOOR: f64 = 1e-300;

/// A class index or the null condition `∅`.
///
/// Serialized as a JSON integer for classes and `null` for `∅`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConditionLabel {
    Class(usize),
    Null,
}

impl ConditionLabel {
    pub fn is_null(self) -> bool {
        matches!(self, ConditionLabel::Null)
    }
}

impl std::fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConditionLabel::Class(c) => write!(f, "{c}"),
            ConditionLabel::Null => f.write_str("null"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureParts {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl TryFrom<MixtureParts> for GaussianMixture {
    type Error = Error;

    fn try_from(p: MixtureParts) -> Result<Self> {
        GaussianMixture::new(p.weights, p.means, p.variances)
    }
}

impl From<GaussianMixture> for MixtureParts {
    fn from(m: GaussianMixture) -> Self {
        MixtureParts {
            weights: m.weights,
            means: m.means,
            variances: m.variances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureParts", into = "MixtureParts")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    /// Per component: `−½ Σ_i ln(2π v_i)`.
    log_norms: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidMixture("mixture needs at least one component".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{k} weights but {} means and {} variances",
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("zero-dimensional components".into()));
        }
        if means.iter().chain(&variances).any(|v| v.len() != dim) {
            return Err(Error::InvalidMixture("components disagree on dimension".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidMixture("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        if variances.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidMixture("variances must be positive".into()));
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::InvalidMixture("means must be finite".into()));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let log_norms = variances
            .iter()
            .map(|v| v.iter().map(|vi| -0.5 * (2.0 * PI * vi).ln()).sum())
            .collect();
        Ok(Self {
            weights,
            means,
            variances,
            log_weights,
            log_norms,
            dim,
        })
    }

    /// Single diagonal Gaussian.
    pub fn gaussian(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// `ln w_k + ln N(x; μ_k, Σ_k)` for every component.
    fn joint_log_terms(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_components())
            .map(|k| {
                let quad: f64 = x
                    .iter()
                    .zip(&self.means[k])
                    .zip(&self.variances[k])
                    .map(|((xi, mi), vi)| (xi - mi) * (xi - mi) / vi)
                    .sum();
                self.log_weights[k] + self.log_norms[k] - 0.5 * quad
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(log_sum_exp(&self.joint_log_terms(x)))
    }

    /// Posterior component probabilities `r_k(x)`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let terms = self.joint_log_terms(x);
        let lse = log_sum_exp(&terms);
        Ok(terms.iter().map(|l| (l - lse).exp()).collect())
    }

    /// `∇_x log q(x) = Σ_k r_k(x)·Σ_k⁻¹(μ_k − x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x)?;
        let mut out = vec![0.0; self.dim];
        for (k, rk) in r.iter().enumerate() {
            for (i, o) in out.iter_mut().enumerate() {
                *o += rk * (self.means[k][i] - x[i]) / self.variances[k][i];
            }
        }
        Ok(out)
    }

    /// Marginal of the forward process started from this mixture, at step `t`
    /// (`t = 0` returns the mixture unchanged).
    pub fn diffused(&self, s: &NoiseSchedule, t: usize) -> Result<Self> {
        if t > s.steps() {
            return Err(Error::StepOutOfRange { t, max: s.steps() });
        }
        if t == 0 {
            return Ok(self.clone());
        }
        let (ab, bb) = (s.alpha_bar(t), s.beta_bar(t));
        let root = ab.sqrt();
        let means = self
            .means
            .iter()
            .map(|m| m.iter().map(|v| root * v).collect())
            .collect();
        let variances = self
            .variances
            .iter()
            .map(|v| v.iter().map(|vi| ab * vi + bb).collect())
            .collect();
        Self::new(self.weights.clone(), means, variances)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = pick_index(&self.weights, rng.random::<f64>());
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, mi) in out.iter_mut().zip(m) {
                *o += w * mi;
            }
        }
        out
    }

    /// Per-coordinate variance of the mixture.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut out = vec![0.0; self.dim];
        for k in 0..self.n_components() {
            for i in 0..self.dim {
                let d = self.means[k][i] - mean[i];
                out[i] += self.weights[k] * (self.variances[k][i] + d * d);
            }
        }
        out
    }
}

/// Inverse-CDF index selection; `u ∈ [0, 1)`.
fn pick_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Exact class posterior at a point: `q(c|x)` and `∇_x log q(c|x)` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub probabilities: Vec<f64>,
    pub log_prob_gradients: Vec<Vec<f64>>,
}

/// On-disk layout of a family file. See `docs/schemas.md`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyFile {
    priors: Vec<f64>,
    classes: Vec<GaussianMixture>,
}

/// One Gaussian mixture per class plus class priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FamilyFile", into = "FamilyFile")]
pub struct ConditionedMixtureFamily {
    priors: Vec<f64>,
    classes: Vec<GaussianMixture>,
    unconditional: GaussianMixture,
}

impl TryFrom<FamilyFile> for ConditionedMixtureFamily {
    type Error = Error;

    fn try_from(f: FamilyFile) -> Result<Self> {
        ConditionedMixtureFamily::new(f.priors, f.classes)
    }
}

impl From<ConditionedMixtureFamily> for FamilyFile {
    fn from(f: ConditionedMixtureFamily) -> Self {
        FamilyFile {
            priors: f.priors,
            classes: f.classes,
        }
    }
}

impl ConditionedMixtureFamily {
    pub fn new(priors: Vec<f64>, classes: Vec<GaussianMixture>) -> Result<Self> {
        if classes.is_empty() || priors.len() != classes.len() {
            return Err(Error::InvalidMixture(format!(
                "{} priors for {} classes",
                priors.len(),
                classes.len()
            )));
        }
        let dim = classes[0].dim();
        if classes.iter().any(|c| c.dim() != dim) {
            return Err(Error::InvalidMixture("classes disagree on dimension".into()));
        }
        if priors.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidMixture("class priors must be positive".into()));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("class priors sum to {total}, not 1")));
        }
        let unconditional = Self::union(&priors, &classes)?;
        Ok(Self {
            priors,
            classes,
            unconditional,
        })
    }

    fn union(priors: &[f64], classes: &[GaussianMixture]) -> Result<GaussianMixture> {
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut variances = Vec::new();
        for (p, class) in priors.iter().zip(classes) {
            weights.extend(class.weights.iter().map(|w| p * w));
            means.extend(class.means.iter().cloned());
            variances.extend(class.variances.iter().cloned());
        }
        // Renormalize away rounding drift from the products.
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        GaussianMixture::new(weights, means, variances)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.unconditional.dim()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn class(&self, c: usize) -> Result<&GaussianMixture> {
        self.classes.get(c).ok_or_else(|| {
            Error::InvalidArgument(format!("class {c} out of range (K = {})", self.classes.len()))
        })
    }

    pub fn unconditional(&self) -> &GaussianMixture {
        &self.unconditional
    }

    /// Mixture for a condition; `∅` selects the unconditional mixture.
    pub fn mixture(&self, c: ConditionLabel) -> Result<&GaussianMixture> {
        match c {
            ConditionLabel::Class(k) => self.class(k),
            ConditionLabel::Null => Ok(&self.unconditional),
        }
    }

    pub fn diffused(&self, s: &NoiseSchedule, t: usize) -> Result<Self> {
        let classes = self
            .classes
            .iter()
            .map(|m| m.diffused(s, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            priors: self.priors.clone(),
            classes,
            unconditional: self.unconditional.diffused(s, t)?,
        })
    }

    /// Exact Bayes posterior over classes at `x` (no diffusion applied).
    pub fn class_posterior(&self, x: &[f64]) -> Result<ClassPosterior> {
        check_dim(self.dim(), x.len())?;
        let log_joint = self
            .classes
            .iter()
            .zip(&self.priors)
            .map(|(m, p)| Ok(p.ln() + m.log_density(x)?))
            .collect::<Result<Vec<f64>>>()?;
        let lse = log_sum_exp(&log_joint);
        let probabilities = log_joint
            .iter()
            .map(|l| (l - lse).exp().max(RESPONSIBILITY_FLOOR))
            .collect();
        let s_uncond = self.unconditional.score(x)?;
        let log_prob_gradients = self
            .classes
            .iter()
            .map(|m| {
                let s_c = m.score(x)?;
                Ok(s_c.iter().zip(&s_uncond).map(|(a, b)| a - b).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(ClassPosterior {
            probabilities,
            log_prob_gradients,
        })
    }

    /// `q(c | x_t)` and `∇_{x_t} log q(c | x_t)` under the step-`t` marginals.
    pub fn classifier(&self, s: &NoiseSchedule, x: &[f64], t: usize) -> Result<ClassPosterior> {
        self.diffused(s, t)?.class_posterior(x)
    }

    /// `log q(c | x_t)`, evaluated directly from densities.
    pub fn log_posterior(&self, s: &NoiseSchedule, x: &[f64], t: usize, c: usize) -> Result<f64> {
        let d = self.diffused(s, t)?;
        let log_joint = d
            .classes
            .iter()
            .zip(&d.priors)
            .map(|(m, p)| Ok(p.ln() + m.log_density(x)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(log_joint[c] - log_sum_exp(&log_joint))
    }

    /// Draws `x_0 ~ q(x_0 | c)`; for `∅` the class is drawn from the priors.
    pub fn sample<R: Rng + ?Sized>(&self, c: ConditionLabel, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.mixture(c)?.sample(rng))
    }

    /// Draws a labelled pair `(x_0, c)` from the joint.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let c = pick_index(&self.priors, rng.random::<f64>());
        (self.classes[c].sample(rng), c)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("family serializes")
    }

    /// SHA-256 of the compact JSON form; identifies a family in manifests.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_string().as_bytes()))
    }

    /// Built-in fixtures: `bimodal-1d`, `gaussian-1d`, `ring-2d`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "bimodal-1d" => Self::new(
                vec![0.5, 0.5],
                vec![
                    GaussianMixture::gaussian(vec![-2.0], vec![0.5])?,
                    GaussianMixture::gaussian(vec![2.0], vec![0.5])?,
                ],
            ),
            "gaussian-1d" => Self::new(
                vec![1.0],
                vec![GaussianMixture::gaussian(vec![1.5], vec![2.0])?],
            ),
            "ring-2d" => {
                // Eight components on a radius-2 circle; even angles form class 0.
                let comp = |k: usize| {
                    let a = k as f64 * PI / 4.0;
                    vec![2.0 * a.cos(), 2.0 * a.sin()]
                };
                let class = |offset: usize| {
                    GaussianMixture::new(
                        vec![0.25; 4],
                        (0..4).map(|j| comp(2 * j + offset)).collect(),
                        vec![vec![0.04, 0.04]; 4],
                    )
                };
                Self::new(vec![0.5, 0.5], vec![class(0)?, class(1)?])
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown family preset '{other}' (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }
}

pub const PRESETS: [&str; 3] = ["bimodal-1d", "gaussian-1d", "ring-2d"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{rng_for, Stream};

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = crate::linalg::norm(&crate::linalg::sub(a, b));
        diff / crate::linalg::norm(a).max(crate::linalg::norm(b)).max(1.0)
    }

    #[test]
    fn standard_normal_density_and_score() {
        let m = GaussianMixture::gaussian(vec![0.0], vec![1.0]).unwrap();
        assert!((m.log_density(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert_eq!(m.score(&[2.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn symmetric_pair() {
        let single = GaussianMixture::gaussian(vec![1.5], vec![0.7]).unwrap();
        let pair = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.5], vec![1.5]], vec![vec![0.7]; 2])
            .unwrap();
        // both terms equal at 0, so the mixture density equals either one
        assert!((pair.log_density(&[0.0]).unwrap() - single.log_density(&[0.0]).unwrap()).abs() < 1e-14);
        assert_eq!(pair.score(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn log_density_matches_direct_summation() {
        let f = ConditionedMixtureFamily::preset("ring-2d").unwrap();
        let m = f.unconditional();
        let mut rng = rng_for(3, Stream::Data, 0);
        for _ in 0..200 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let naive: f64 = (0..m.n_components())
                .map(|k| {
                    let mut dens = m.weights()[k];
                    for i in 0..2 {
                        let v = m.variances()[k][i];
                        let d = x[i] - m.means()[k][i];
                        dens *= (-0.5 * d * d / v).exp() / (2.0 * PI * v).sqrt();
                    }
                    dens
                })
                .sum();
            if naive > 1e-250 {
                assert!((m.log_density(&x).unwrap() - naive.ln()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let f = ConditionedMixtureFamily::preset("ring-2d").unwrap();
        let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
        let mut rng = rng_for(4, Stream::Data, 0);
        for i in 0..100 {
            let t = rng.random_range(0..=100);
            let m = f.unconditional().diffused(&s, t).unwrap();
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.5..2.5)).collect();
            let fd = central_diff(|p| m.log_density(p).unwrap(), &x, 1e-5);
            let g = m.score(&x).unwrap();
            assert!(rel_err(&g, &fd) < 1e-5, "probe {i}: {g:?} vs {fd:?}");
        }
    }

    #[test]
    fn diffusion_limits() {
        let f = ConditionedMixtureFamily::preset("bimodal-1d").unwrap();
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(&f.unconditional().diffused(&s, 0).unwrap(), f.unconditional());
        let end = f.unconditional().diffused(&s, 1000).unwrap();
        for (m, v) in end.means().iter().zip(end.variances()) {
            assert!(m[0].abs() < 0.02 && (v[0] - 1.0).abs() < 1e-4);
        }
        assert!(f.unconditional().diffused(&s, 1001).is_err());
    }

    #[test]
    fn degenerate_component_sample() {
        let m = GaussianMixture::gaussian(vec![0.3, -4.0], vec![1e-12, 1e-12]).unwrap();
        let x = m.sample(&mut rng_for(99, Stream::Data, 0));
        assert!((x[0] - 0.3).abs() < 1e-5 && (x[1] + 4.0).abs() < 1e-5);
    }

    #[test]
    fn sampling_is_deterministic_and_matches_weights() {
        let m = GaussianMixture::new(
            vec![0.2, 0.3, 0.5],
            vec![vec![-10.0], vec![0.0], vec![10.0]],
            vec![vec![0.01]; 3],
        )
        .unwrap();
        let a = m.sample(&mut rng_for(1, Stream::Data, 0));
        let b = m.sample(&mut rng_for(1, Stream::Data, 0));
        assert_eq!(a[0].to_bits(), b[0].to_bits());

        let n = 100_000;
        let mut rng = rng_for(2, Stream::Data, 0);
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let x = m.sample(&mut rng)[0];
            counts[if x < -5.0 { 0 } else if x < 5.0 { 1 } else { 2 }] += 1;
        }
        for (c, w) in counts.iter().zip(m.weights()) {
            let p = *c as f64 / n as f64;
            let se = (w * (1.0 - w) / n as f64).sqrt();
            assert!((p - w).abs() < 4.0 * se, "{p} vs {w}");
        }
    }

    #[test]
    fn classifier_edge_cases() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
        let single = ConditionedMixtureFamily::preset("gaussian-1d").unwrap();
        let post = single.classifier(&s, &[0.7], 10).unwrap();
        assert_eq!(post.probabilities, vec![1.0]);
        assert!(post.log_prob_gradients[0][0].abs() < 1e-15);

        let sym = ConditionedMixtureFamily::preset("bimodal-1d").unwrap();
        let post = sym.classifier(&s, &[0.0], 20).unwrap();
        assert!((post.probabilities[0] - 0.5).abs() < 1e-15);
        assert!((post.probabilities[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn classifier_gradient_and_bayes_identities() {
        let f = ConditionedMixtureFamily::preset("ring-2d").unwrap();
        let s = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap();
        let mut rng = rng_for(6, Stream::Data, 0);
        for _ in 0..100 {
            let t = rng.random_range(1..=100);
            let c = rng.random_range(0..2);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.5..2.5)).collect();
            let post = f.classifier(&s, &x, t).unwrap();
            let fd = central_diff(|p| f.log_posterior(&s, p, t, c).unwrap(), &x, 1e-5);
            assert!(rel_err(&post.log_prob_gradients[c], &fd) < 1e-5);

            let d = f.diffused(&s, t).unwrap();
            let s_u = d.unconditional().score(&x).unwrap();
            let mut mixed = vec![0.0; 2];
            for k in 0..2 {
                let s_k = d.class(k).unwrap().score(&x).unwrap();
                for i in 0..2 {
                    mixed[i] += post.probabilities[k] * s_k[i];
                    // decomposition: ∇log q(x|c) = ∇log q(x) + ∇log q(c|x)
                    assert!((s_k[i] - (s_u[i] + post.log_prob_gradients[k][i])).abs() < 1e-8);
                }
            }
            for i in 0..2 {
                assert!((mixed[i] - s_u[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn validation_errors() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![vec![0.0]; 2], vec![vec![1.0]; 2]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![0.0]]).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![0.0, 1.0]], vec![vec![1.0]; 2]).is_err());
        let m = GaussianMixture::gaussian(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(m.score(&[0.0, 1.0]), Err(Error::DimensionMismatch { expected: 1, got: 2 })));
        assert!(ConditionedMixtureFamily::preset("nope").is_err());
    }

    #[test]
    fn family_file_roundtrip() {
        let f = ConditionedMixtureFamily::preset("ring-2d").unwrap();
        let json = f.to_json_string();
        let back = ConditionedMixtureFamily::from_json_str(&json).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.content_hash(), f.content_hash());

        let text = r#"{"priors":[1.0],"classes":[{"weights":[1.0],"means":[[0.0]],"variances":[[1.0]]}]}"#;
        assert!(ConditionedMixtureFamily::from_json_str(text).is_ok());
        let bad = r#"{"priors":[1.0],"classes":[{"weights":[0.5],"means":[[0.0]],"variances":[[1.0]]}]}"#;
        assert!(ConditionedMixtureFamily::from_json_str(bad).is_err());
    }

    #[test]
    fn condition_label_serialization() {
        assert_eq!(serde_json::to_string(&ConditionLabel::Class(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&ConditionLabel::Null).unwrap(), "null");
        assert_eq!(serde_json::from_str::<ConditionLabel>("null").unwrap(), ConditionLabel::Null);
        assert_eq!(serde_json::from_str::<ConditionLabel>("1").unwrap(), ConditionLabel::Class(1));
    }
}
