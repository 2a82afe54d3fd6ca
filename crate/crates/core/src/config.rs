//! Experiment configuration: defaults, a JSON file (plain config or a run
//! manifest), dotted `key=value` overrides, then an explicit seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::guidance::{GuidanceMode, GuidanceSpec, OmegaEstimator};
use crate::mixture::{ConditionLabel, ConditionedMixtureFamily, PRESETS};
use crate::refine::RefineConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::ScheduleSpec;
use crate::score::{PerturbationSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySource {
    Preset(String),
    /// JSON family file, relative paths resolved against the working directory.
    Path(PathBuf),
}

impl Default for FamilySource {
    fn default() -> Self {
        FamilySource::Preset("bimodal-1d".into())
    }
}

impl FamilySource {
    pub fn load(&self) -> Result<ConditionedMixtureFamily> {
        match self {
            FamilySource::Preset(name) => ConditionedMixtureFamily::preset(name),
            FamilySource::Path(p) => ConditionedMixtureFamily::load(p),
        }
    }

    pub fn name(&self) -> String {
        match self {
            FamilySource::Preset(name) => name.clone(),
            FamilySource::Path(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    /// Exact diffused-mixture scores.
    #[default]
    Oracle,
    /// Exact scores plus an injected error on class-conditional queries.
    Perturbed { perturbation: PerturbationSpec },
    /// A checkpoint written by `train`.
    Mlp { checkpoint: PathBuf },
}

/// Where the sampler's guidance weight comes from at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OmegaPlan {
    /// `guidance.omega` at every step.
    #[default]
    Fixed,
    /// `ω*(t)` estimated from probes of the step-`t` conditional marginal.
    Optimal { estimator: OmegaEstimator },
}

/// `enabled` plus the refinement parameters, flattened into one table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub config: RefineConfig,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            enabled: false,
            config: RefineConfig::default(),
        }
    }
}

impl RefineSection {
    pub fn active(&self) -> Option<RefineConfig> {
        self.enabled.then_some(self.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub t_values: Vec<usize>,
    pub omega_lo: f64,
    pub omega_hi: f64,
    /// Spacing of the brute-force grid estimator.
    pub resolution: f64,
    /// Points on each emitted `L(ω)` curve.
    pub curve_points: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            t_values: vec![1, 100, 200, 300, 400, 500],
            omega_lo: -2.0,
            omega_hi: 6.0,
            resolution: 1e-3,
            curve_points: 161,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub projections: usize,
    pub mmd_bandwidth: f64,
    pub knn_k: usize,
    /// Independent data-vs-data draws used to calibrate the distance noise floor.
    pub floor_resamples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            projections: 50,
            mmd_bandwidth: 1.0,
            knn_k: 3,
            floor_resamples: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub family: FamilySource,
    pub field: FieldSpec,
    pub condition: ConditionLabel,
    pub guidance: GuidanceSpec,
    pub omega_plan: OmegaPlan,
    pub sampler: SamplerConfig,
    pub refine: RefineSection,
    pub chains: usize,
    /// Probes per step for `ω*` and `L(ω)`.
    pub probes: usize,
    /// Independent master seeds for `refine-compare`.
    pub seeds: usize,
    /// Chains whose full trajectories are written out (capped at `chains`).
    pub trajectory_chains: usize,
    pub sweep: SweepConfig,
    pub metrics: MetricsConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleSpec::default(),
            family: FamilySource::default(),
            field: FieldSpec::default(),
            condition: ConditionLabel::Class(0),
            guidance: GuidanceSpec::default(),
            omega_plan: OmegaPlan::default(),
            sampler: SamplerConfig::default(),
            refine: RefineSection::default(),
            chains: 1000,
            probes: 2000,
            seeds: 20,
            trajectory_chains: 4,
            sweep: SweepConfig::default(),
            metrics: MetricsConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Parses `value` as JSON, falling back to a plain string.
fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` inside `root`, creating intermediate objects.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed override key '{key}'"));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(format!("'{}' is not a table", parts[..i].join(".")));
            }
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

impl ExperimentConfig {
    /// Reads a config file. A run manifest is accepted and its config block used.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let value = match value {
            Value::Object(ref m) if m.contains_key("format_version") && m.contains_key("config") => {
                crate::persist::check_manifest_version(&value)?;
                m["config"].clone()
            }
            v => v,
        };
        serde_json::from_value(value).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(&self)?;
        let mut errs = Vec::new();
        for s in sets {
            match s.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = set_dotted(&mut value, k.trim(), parse_override_value(v.trim())) {
                        errs.push(e);
                    }
                }
                None => errs.push(format!("override '{s}' is not key=value")),
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(vec![format!("after overrides: {e}")]))
    }

    /// Defaults, then `file`, then `sets`, then `seed`; validated.
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let base = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        let mut cfg = base.with_overrides(sets)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(Error::Config)?;
        Ok(cfg)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let steps = match self.schedule.build() {
            Ok(s) => Some(s.steps()),
            Err(e) => {
                errs.push(format!("schedule: {e}"));
                None
            }
        };
        match &self.family {
            FamilySource::Preset(name) if !PRESETS.contains(&name.as_str()) => {
                errs.push(format!("family.preset '{name}' unknown (known: {})", PRESETS.join(", ")));
            }
            FamilySource::Path(p) if !p.is_file() => {
                errs.push(format!("family.path {} does not exist", p.display()));
            }
            _ => {}
        }
        if let FieldSpec::Perturbed { perturbation } = &self.field {
            if !(perturbation.scale >= 0.0 && perturbation.scale.is_finite()) {
                errs.push(format!("field.perturbation.scale must be finite and >= 0, got {}", perturbation.scale));
            }
        }
        if !self.guidance.omega.is_finite() {
            errs.push("guidance.omega must be finite".into());
        }
        if self.guidance.mode == GuidanceMode::Cg && matches!(self.field, FieldSpec::Mlp { .. }) {
            errs.push("classifier guidance needs the analytic classifier of an oracle-based field".into());
        }
        if let Some(t) = steps {
            if let Err(e) = self.sampler.validate(t) {
                errs.extend(e);
            }
            for &tv in &self.sweep.t_values {
                if tv == 0 || tv > t {
                    errs.push(format!("sweep.t_values entry {tv} outside 1..={t}"));
                }
            }
        }
        if let OmegaPlan::Optimal { estimator } = self.omega_plan {
            if self.guidance.mode != GuidanceMode::Cfg {
                errs.push("omega_plan optimal applies to guidance.mode cfg only".into());
            }
            if let OmegaEstimator::Grid { lo, hi, resolution } = estimator {
                if !(hi > lo && resolution > 0.0) {
                    errs.push("omega_plan grid needs lo < hi and resolution > 0".into());
                }
            }
        }
        if self.refine.enabled {
            if let Err(e) = self.refine.config.validate() {
                errs.extend(e);
            }
        }
        for (name, v) in [("chains", self.chains), ("probes", self.probes), ("seeds", self.seeds)] {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        let sw = &self.sweep;
        if !(sw.omega_hi > sw.omega_lo && sw.resolution > 0.0) {
            errs.push("sweep needs omega_lo < omega_hi and resolution > 0".into());
        }
        if sw.curve_points < 2 {
            errs.push("sweep.curve_points must be >= 2".into());
        }
        let m = &self.metrics;
        if m.projections == 0 || m.knn_k == 0 || m.floor_resamples < 2 {
            errs.push("metrics needs projections >= 1, knn_k >= 1, floor_resamples >= 2".into());
        }
        if !(m.mmd_bandwidth > 0.0 && m.mmd_bandwidth.is_finite()) {
            errs.push("metrics.mmd_bandwidth must be positive".into());
        }
        let tr = &self.train;
        if tr.batch_size == 0 || !(tr.lr > 0.0) || !(0.0..1.0).contains(&tr.momentum) || !(0.0..=1.0).contains(&tr.p_uncond) {
            errs.push("train needs batch_size >= 1, lr > 0, momentum in [0, 1), p_uncond in [0, 1]".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
