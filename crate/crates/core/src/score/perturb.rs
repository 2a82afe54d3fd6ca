use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ScoreField;
use crate::error::{Error, Result};
use crate::exec::{mix_seed, SimRng};
use crate::mixture::ConditionLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// `e = scale · v̂_c`, a seeded unit direction per class, independent of `x` and `t`.
    ConstantVector,
    /// `e = scale · z`, `z ~ N(0, I)` drawn from a generator keyed on `(x, t, c, seed)`.
    ScaledGaussianField,
    /// `e = scale · s_base(x, t, c)`: a multiplicative over- or under-estimate.
    ScaledScoreDirection,
}

/// Injected score error `e_{t,c}`. Only class-conditional queries are
/// perturbed; the null channel passes through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub scale: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn constant(scale: f64, seed: u64) -> Self {
        Self {
            kind: PerturbationKind::ConstantVector,
            scale,
            seed,
        }
    }
}

const NULL_TAG: u64 = u64::MAX;

fn condition_tag(c: ConditionLabel) -> u64 {
    match c {
        ConditionLabel::Class(k) => k as u64,
        ConditionLabel::Null => NULL_TAG,
    }
}

pub struct PerturbedField {
    base: Arc<dyn ScoreField>,
    spec: PerturbationSpec,
}

impl PerturbedField {
    pub fn new(base: Arc<dyn ScoreField>, spec: PerturbationSpec) -> Result<Self> {
        if !(spec.scale >= 0.0 && spec.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "perturbation scale must be finite and >= 0, got {}",
                spec.scale
            )));
        }
        Ok(Self { base, spec })
    }

    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }

    /// Unit direction used by [`PerturbationKind::ConstantVector`] for class `c`.
    pub fn direction(&self, c: ConditionLabel) -> Vec<f64> {
        let mut rng = SimRng::seed_from_u64(mix_seed(&[self.spec.seed, condition_tag(c), 0xD1]));
        loop {
            let v: Vec<f64> = (0..self.base.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = crate::linalg::norm(&v);
            if n > 1e-8 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    /// The error term `e(x, t, c)`; zero for the null condition.
    pub fn error_at(&self, x: &[f64], t: usize, c: ConditionLabel, base: &[f64]) -> Vec<f64> {
        let scale = self.spec.scale;
        if c.is_null() || scale == 0.0 {
            return vec![0.0; x.len()];
        }
        match self.spec.kind {
            PerturbationKind::ConstantVector => crate::linalg::scale(&self.direction(c), scale),
            PerturbationKind::ScaledGaussianField => {
                let mut words = vec![self.spec.seed, t as u64, condition_tag(c)];
                words.extend(x.iter().map(|v| v.to_bits()));
                let mut rng = SimRng::seed_from_u64(mix_seed(&words));
                (0..x.len())
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            PerturbationKind::ScaledScoreDirection => crate::linalg::scale(base, scale),
        }
    }
}

impl ScoreField for PerturbedField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn has_null_condition(&self) -> bool {
        self.base.has_null_condition()
    }

    fn score_at(&self, x: &[f64], t: usize, c: ConditionLabel) -> Result<Vec<f64>> {
        let base = self.base.score_at(x, t, c)?;
        if self.spec.scale == 0.0 || c.is_null() {
            return Ok(base);
        }
        let e = self.error_at(x, t, c, &base);
        Ok(base.iter().zip(&e).map(|(b, e)| b + e).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{rng_for, Stream};
    use crate::mixture::ConditionedMixtureFamily;
    use crate::schedule::NoiseSchedule;
    use crate::score::OracleField;
    use rand::Rng;

    fn oracle() -> Arc<dyn ScoreField> {
        let f = ConditionedMixtureFamily::preset("ring-2d").unwrap();
        Arc::new(OracleField::new(f, NoiseSchedule::linear(50, 1e-3, 0.1).unwrap()).unwrap())
    }

    fn probe(rng: &mut SimRng) -> ([f64; 2], usize, ConditionLabel) {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        (x, rng.random_range(1..=50), ConditionLabel::Class(rng.random_range(0..2)))
    }

    #[test]
    fn zero_scale_is_identity_for_every_kind_and_seed() {
        let base = oracle();
        let mut rng = rng_for(0, Stream::Probes, 0);
        for kind in [
            PerturbationKind::ConstantVector,
            PerturbationKind::ScaledGaussianField,
            PerturbationKind::ScaledScoreDirection,
        ] {
            let a = PerturbedField::new(base.clone(), PerturbationSpec { kind, scale: 0.0, seed: 1 }).unwrap();
            let b = PerturbedField::new(base.clone(), PerturbationSpec { kind, scale: 0.0, seed: 2 }).unwrap();
            for _ in 0..50 {
                let (x, t, c) = probe(&mut rng);
                let want = base.score_at(&x, t, c).unwrap();
                assert_eq!(a.score_at(&x, t, c).unwrap(), want);
                assert_eq!(b.score_at(&x, t, c).unwrap(), want);
            }
        }
    }

    #[test]
    fn constant_vector_has_exact_norm_and_ignores_x() {
        let base = oracle();
        let p = PerturbedField::new(base.clone(), PerturbationSpec::constant(0.5, 9)).unwrap();
        let mut rng = rng_for(1, Stream::Probes, 0);
        let (_, t, c) = probe(&mut rng);
        let mut first: Option<Vec<f64>> = None;
        for _ in 0..20 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let e: Vec<f64> = crate::linalg::sub(&p.score_at(&x, t, c).unwrap(), &base.score_at(&x, t, c).unwrap());
            assert!((crate::linalg::norm(&e) - 0.5).abs() < 1e-12);
            if let Some(f) = &first {
                for (a, b) in e.iter().zip(f) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            first = Some(e);
        }
        // the null channel is untouched
        let x = [0.3, 0.1];
        assert_eq!(
            p.score_at(&x, t, ConditionLabel::Null).unwrap(),
            base.score_at(&x, t, ConditionLabel::Null).unwrap()
        );
    }

    #[test]
    fn gaussian_field_is_reproducible_and_centred() {
        let base = oracle();
        let spec = PerturbationSpec {
            kind: PerturbationKind::ScaledGaussianField,
            scale: 1.0,
            seed: 4,
        };
        let p = PerturbedField::new(base.clone(), spec).unwrap();
        let q = PerturbedField::new(base, spec).unwrap();
        let mut rng = rng_for(2, Stream::Probes, 0);
        let n = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let (x, t, c) = probe(&mut rng);
            let e = p.error_at(&x, t, c, &[0.0, 0.0]);
            assert_eq!(e, q.error_at(&x, t, c, &[0.0, 0.0]));
            sum[0] += e[0];
            sum[1] += e[1];
        }
        let se = 1.0 / (n as f64).sqrt();
        for s in sum {
            assert!((s / n as f64).abs() < 4.0 * se);
        }
    }

    #[test]
    fn score_direction_scales_the_base() {
        let base = oracle();
        let spec = PerturbationSpec {
            kind: PerturbationKind::ScaledScoreDirection,
            scale: 0.25,
            seed: 0,
        };
        let p = PerturbedField::new(base.clone(), spec).unwrap();
        let x = [1.0, -0.4];
        let b = base.score_at(&x, 7, ConditionLabel::Class(1)).unwrap();
        let got = p.score_at(&x, 7, ConditionLabel::Class(1)).unwrap();
        for (g, b) in got.iter().zip(&b) {
            assert!((g - 1.25 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn negative_scale_rejected() {
        assert!(PerturbedField::new(oracle(), PerturbationSpec::constant(-0.1, 0)).is_err());
    }
}
