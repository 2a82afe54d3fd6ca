//! The five experiment workflows behind the command-line subcommands.
//!
//! Each workflow resolves its inputs into a [`Lab`], writes the run manifest
//! into the output directory, computes, writes CSV/JSON/SVG artifacts, and
//! finally rewrites the manifest with every output's content hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::config::{ExperimentConfig, FieldSpec, OmegaPlan};
use crate::error::{Error, Result};
use crate::exec::{rng_for, Execution, Stream};
use crate::gap::{knn_precision_recall, mmd_rbf, noise_floor, sliced_wasserstein, GapEntry, GapReport};
use crate::guidance::{draw_probes, Guide, GuidanceMode, GuidanceSpec, OmegaEstimator, ProbeScores, RatioReading};
use crate::mixture::{ConditionLabel, ConditionedMixtureFamily};
use crate::persist::{self, RunManifest};
use crate::plot::{self, Series};
use crate::refine::RefineConfig;
use crate::sampler::{sample_chain, timesteps, ChainSetup, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::score::{MlpField, MlpScoreModel, OracleField, PerturbedField, ScoreField};

pub const MANIFEST_FILE: &str = "manifest.json";

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn json_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Output directory plus the manifest that inventories it.
pub struct Workspace {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Workspace {
    /// Writes the manifest (with an empty inventory) before any output.
    pub fn create(dir: &Path, command: &str, cfg: &ExperimentConfig, family_sha256: String) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ws = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest::new(command, cfg, family_sha256),
        };
        ws.save()?;
        Ok(ws)
    }

    fn save(&self) -> Result<()> {
        persist::save_manifest(&self.manifest, self.dir.join(MANIFEST_FILE))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        persist::write_file(self.dir.join(rel), contents)?;
        self.manifest.record_output(&self.dir, rel)
    }

    pub fn finish(self) -> Result<RunManifest> {
        self.save()?;
        Ok(self.manifest)
    }
}

/// Resolved inputs shared by every workflow.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub family: ConditionedMixtureFamily,
    pub oracle: Arc<OracleField>,
    pub field: Arc<dyn ScoreField>,
    pub exec: Execution,
}

impl Lab {
    pub fn new(cfg: &ExperimentConfig, exec: Execution) -> Result<Self> {
        cfg.validate().map_err(Error::Config)?;
        let schedule = cfg.schedule.build()?;
        let family = cfg.family.load()?;
        family
            .mixture(cfg.condition)
            .map_err(|e| Error::Config(vec![format!("condition {}: {e}", cfg.condition)]))?;
        let oracle = Arc::new(OracleField::new(family.clone(), schedule.clone())?);
        let field: Arc<dyn ScoreField> = match &cfg.field {
            FieldSpec::Oracle => oracle.clone(),
            FieldSpec::Perturbed { perturbation } => Arc::new(PerturbedField::new(oracle.clone(), *perturbation)?),
            FieldSpec::Mlp { checkpoint } => {
                if !checkpoint.is_file() {
                    return Err(Error::Config(vec![format!("checkpoint {} does not exist", checkpoint.display())]));
                }
                let (model, spec) = persist::load_checkpoint(checkpoint)?;
                if spec != cfg.schedule {
                    return Err(Error::Config(vec![format!(
                        "checkpoint {} was trained on schedule {:?}, config uses {:?}",
                        checkpoint.display(),
                        spec,
                        cfg.schedule
                    )]));
                }
                if model.data_dim() != family.dim() || model.n_classes() != family.n_classes() {
                    return Err(Error::Config(vec![format!(
                        "checkpoint {} is for dim {} with {} classes, family has dim {} with {} classes",
                        checkpoint.display(),
                        model.data_dim(),
                        model.n_classes(),
                        family.dim(),
                        family.n_classes()
                    )]));
                }
                Arc::new(MlpField::new(model, schedule.clone()))
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            schedule,
            family,
            oracle,
            field,
            exec,
        })
    }

    pub fn condition(&self) -> ConditionLabel {
        self.cfg.condition
    }

    /// Steps the configured sampler visits, in visiting order.
    pub fn visited_steps(&self) -> Result<Vec<usize>> {
        timesteps(
            self.schedule.steps(),
            self.cfg.sampler.steps.unwrap_or(self.schedule.steps()),
        )
    }

    fn guide(&self, spec: GuidanceSpec) -> Guide<'_> {
        let g = Guide::new(&*self.field, spec);
        if spec.mode == GuidanceMode::Cg {
            g.with_classifier(&self.oracle)
        } else {
            g
        }
    }

    pub fn probe_scores(&self, t: usize, seed: u64) -> Result<ProbeScores> {
        let probes = draw_probes(&self.oracle, self.condition(), t, self.cfg.probes, seed)?;
        ProbeScores::evaluate(&probes, &*self.field, &*self.oracle, self.condition(), t, self.exec)
    }

    /// Probe terms at each step in `ts`. With `estimator` set the step uses
    /// `ω*(t)` (falling back to 1 where the guidance direction vanishes);
    /// otherwise it uses `fixed_omega` and `ω*` is reported by least squares.
    pub fn probe_pass(
        &self,
        ts: &[usize],
        seed: u64,
        estimator: Option<OmegaEstimator>,
        fixed_omega: f64,
    ) -> Result<Vec<ProbeStep>> {
        ts.iter()
            .map(|&t| {
                let ps = self.probe_scores(t, seed)?;
                let est = estimator.unwrap_or(OmegaEstimator::LeastSquares);
                let star = match ps.omega_star(&est, self.exec) {
                    Ok(e) => Some(e.value),
                    Err(Error::DegenerateGuidance { .. }) => None,
                    Err(e) => return Err(e.at_step(t)),
                };
                let omega_used = match estimator {
                    Some(_) => star.unwrap_or(1.0),
                    None => fixed_omega,
                };
                Ok(ProbeStep {
                    t,
                    omega_used,
                    omega_star: star,
                    l1: ps.l_of_omega(1.0),
                    l_used: ps.l_of_omega(omega_used),
                    n_probes: ps.len(),
                })
            })
            .collect()
    }

    /// Length `T + 1` weight table indexed by `t`.
    pub fn omega_table(&self, steps: &[ProbeStep]) -> Vec<f64> {
        let mut w = vec![1.0; self.schedule.steps() + 1];
        for s in steps {
            w[s.t] = s.omega_used;
        }
        w
    }

    /// Runs `cfg.chains` chains of `seed` and reduces each to a summary as it finishes.
    pub fn run_chains(&self, seed: u64, arm: &Arm) -> Result<Vec<ChainSummary>> {
        let setup = self.setup(arm);
        self.exec
            .try_map(self.cfg.chains, |i| sample_chain(&setup, seed, i as u64).map(|t| ChainSummary::of(&t)))
    }

    pub fn trajectory(&self, seed: u64, arm: &Arm, chain: u64) -> Result<Trajectory> {
        sample_chain(&self.setup(arm), seed, chain)
    }

    fn setup<'a>(&'a self, arm: &'a Arm) -> ChainSetup<'a> {
        let mut setup = ChainSetup::new(&self.schedule, self.guide(arm.guidance), self.cfg.sampler, self.condition());
        setup.refine = arm.refine;
        setup.oracle = Some(&*self.oracle);
        setup.omega_schedule = arm.omega_table.as_deref();
        setup
    }

    /// `n` fresh draws from the target condition.
    pub fn data_draws(&self, seed: u64, index: u64, n: usize) -> Result<Vec<Vec<f64>>> {
        let mut rng = rng_for(seed, Stream::Data, index);
        (0..n).map(|_| self.family.sample(self.condition(), &mut rng)).collect()
    }

    /// Distances from `samples` to fresh data, with a resampling noise floor for the sliced distance.
    pub fn sample_metrics(&self, samples: &[Vec<f64>], seed: u64) -> Result<SampleMetrics> {
        let m = &self.cfg.metrics;
        let n = samples.len();
        let data = self.data_draws(seed, 0, n)?;
        let sw = sliced_wasserstein(samples, &data, m.projections, &mut rng_for(seed, Stream::Metric, 0), self.exec)?;
        let floor_values = (0..m.floor_resamples as u64)
            .map(|k| {
                let a = self.data_draws(seed, 1 + 2 * k, n)?;
                let b = self.data_draws(seed, 2 + 2 * k, n)?;
                sliced_wasserstein(&a, &b, m.projections, &mut rng_for(seed, Stream::Metric, 1 + k), self.exec)
            })
            .collect::<Result<Vec<f64>>>()?;
        let pr = if m.knn_k < n {
            Some(knn_precision_recall(samples, &data, m.knn_k, self.exec)?)
        } else {
            None
        };
        Ok(SampleMetrics {
            n_samples: n,
            mean: moments(samples).0,
            variance: moments(samples).1,
            data_mean: moments(&data).0,
            data_variance: moments(&data).1,
            sliced_wasserstein: sw,
            sw_noise_floor: noise_floor(&floor_values)?,
            mmd: mmd_rbf(samples, &data, m.mmd_bandwidth, self.exec)?,
            precision: pr.map(|p| p.precision),
            recall: pr.map(|p| p.recall),
        })
    }
}

/// Per-coordinate mean and unbiased variance.
pub fn moments(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs.first().map_or(0, Vec::len);
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for x in xs {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m).powi(2) / (n - 1.0).max(1.0);
        }
    }
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub n_samples: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub data_mean: Vec<f64>,
    pub data_variance: Vec<f64>,
    pub sliced_wasserstein: f64,
    pub sw_noise_floor: f64,
    pub mmd: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeStep {
    pub t: usize,
    pub omega_used: f64,
    pub omega_star: Option<f64>,
    pub l1: f64,
    pub l_used: f64,
    pub n_probes: usize,
}

/// One sampling configuration: guidance, optional weight table, optional refinement.
#[derive(Debug, Clone)]
pub struct Arm {
    pub name: &'static str,
    pub guidance: GuidanceSpec,
    pub omega_table: Option<Vec<f64>>,
    pub refine: Option<RefineConfig>,
}

/// What the workflows keep from a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummary {
    pub final_state: Vec<f64>,
    pub steps: Vec<usize>,
    pub gaps: Vec<f64>,
    pub mean_deviations: Vec<f64>,
    /// `(L_0, L_final, iterations)` per refined step.
    pub refine: Vec<(f64, f64, usize)>,
}

impl ChainSummary {
    pub fn of(t: &Trajectory) -> Self {
        let gap = |f: fn(&crate::sampler::StepGap) -> f64| t.steps.iter().map(|r| r.gap.as_ref().map_or(f64::NAN, f)).collect();
        Self {
            final_state: t.final_state().to_vec(),
            steps: t.steps.iter().map(|r| r.t).collect(),
            gaps: gap(|g| g.pointwise),
            mean_deviations: gap(|g| g.mean_deviation),
            refine: t
                .refine_traces
                .iter()
                .map(|tr| {
                    (
                        tr.initial_loss().unwrap_or(f64::NAN),
                        tr.final_loss().unwrap_or(f64::NAN),
                        tr.iterations(),
                    )
                })
                .collect(),
        }
    }
}

/// Chain-averaged per-step gaps as a report; chains are reduced in order.
pub fn gap_report(chains: &[ChainSummary], seed: u64) -> Result<GapReport> {
    let first = chains.first().ok_or(Error::EmptyInput("chain set"))?;
    let mut sums = vec![0.0; first.steps.len()];
    for c in chains {
        if c.steps != first.steps {
            return Err(Error::InvalidArgument("chains visit different steps".into()));
        }
        for (s, g) in sums.iter_mut().zip(&c.gaps) {
            *s += g;
        }
    }
    let n = chains.len() as f64;
    let entries = first
        .steps
        .iter()
        .zip(sums)
        .map(|(&t, s)| GapEntry {
            t,
            gap: s / n,
            l1: None,
            l_used: None,
            omega_star: None,
            n_probes: 0,
        })
        .collect();
    Ok(GapReport::from_entries(entries, chains.len(), vec![seed]))
}

fn family_hash(lab: &Lab) -> String {
    lab.family.content_hash()
}

fn estimator_label(e: &OmegaEstimator) -> String {
    match e {
        OmegaEstimator::MeanOfRatios { reading } => format!(
            "{}/{}",
            e.name(),
            match reading {
                RatioReading::InnerProduct => "inner_product",
                RatioReading::PerDimension => "per_dimension",
            }
        ),
        _ => e.name().to_string(),
    }
}

fn coord_header(prefix: &str, d: usize) -> String {
    (0..d).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

fn coords(x: &[f64]) -> String {
    x.iter().map(|v| num(*v)).collect::<Vec<_>>().join(",")
}

fn sample_plot(title: &str, generated: &[Vec<f64>], data: &[Vec<f64>]) -> String {
    match generated.first().map_or(1, Vec::len) {
        1 => {
            let g: Vec<f64> = generated.iter().map(|x| x[0]).collect();
            let d: Vec<f64> = data.iter().map(|x| x[0]).collect();
            plot::histogram(title, "x", &[("generated", &g), ("data", &d)], 60)
        }
        _ => {
            let pts = |xs: &[Vec<f64>]| xs.iter().map(|x| (x[0], x[1])).collect();
            plot::scatter(title, "x0", "x1", &[Series::new("generated", pts(generated)), Series::new("data", pts(data))])
        }
    }
}

/// The weight plan of the config as an arm, with its probe pass.
fn configured_arm(lab: &Lab, seed: u64, ts: &[usize]) -> Result<(Arm, Option<Vec<ProbeStep>>)> {
    let g = lab.cfg.guidance;
    let estimator = match lab.cfg.omega_plan {
        OmegaPlan::Optimal { estimator } => Some(estimator),
        OmegaPlan::Fixed => None,
    };
    let probes = if g.mode == GuidanceMode::Cfg {
        Some(lab.probe_pass(ts, seed, estimator, g.omega)?)
    } else {
        None
    };
    let omega_table = match (&probes, estimator) {
        (Some(p), Some(_)) => Some(lab.omega_table(p)),
        _ => None,
    };
    Ok((
        Arm {
            name: "configured",
            guidance: g,
            omega_table,
            refine: lab.cfg.refine.active(),
        },
        probes,
    ))
}

fn omega_csv(steps: &[ProbeStep], seed: u64) -> String {
    let mut out = String::from("t,omega_used,omega_star,L1,Lw,n_probes,seed\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.t,
            num(s.omega_used),
            opt_num(s.omega_star),
            num(s.l1),
            num(s.l_used),
            s.n_probes,
            seed
        );
    }
    out
}

/// Trains an ε-predictor on the configured family and writes its checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    cfg.field = FieldSpec::Oracle;
    let lab = Lab::new(&cfg, exec)?;
    let mut ws = Workspace::create(out, "train", &cfg, family_hash(&lab))?;
    let tc = &cfg.train;
    let mut model = MlpScoreModel::new(
        lab.family.dim(),
        lab.family.n_classes(),
        &tc.hidden,
        lab.schedule.steps(),
        cfg.seed,
        tc.p_uncond,
    )?;
    let mut rng = rng_for(cfg.seed, Stream::Training, 0);
    let losses = model.train(&lab.family, &lab.schedule, tc, &mut rng)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i + 1, num(*l));
    }
    ws.write("model.ckpt", persist::checkpoint_to_string(&model, &cfg.schedule)?)?;
    ws.write("train_loss.csv", csv)?;
    let pts = losses.iter().enumerate().map(|(i, l)| ((i + 1) as f64, *l)).collect();
    ws.write(
        "train_loss.svg",
        plot::line_chart("training loss", "step", "mean squared ε error", &[Series::new("loss", pts)]),
    )?;
    ws.finish()
}

/// Samples `chains` chains, writing final samples, a few full trajectories, and distribution metrics.
pub fn cmd_sample(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> Result<RunManifest> {
    let lab = Lab::new(cfg, exec)?;
    let mut ws = Workspace::create(out, "sample", cfg, family_hash(&lab))?;
    let seed = cfg.seed;
    let ts = lab.visited_steps()?;
    let (arm, probes) = match cfg.omega_plan {
        OmegaPlan::Optimal { .. } => configured_arm(&lab, seed, &ts)?,
        OmegaPlan::Fixed => (
            Arm {
                name: "configured",
                guidance: cfg.guidance,
                omega_table: None,
                refine: cfg.refine.active(),
            },
            None,
        ),
    };
    let chains = lab.run_chains(seed, &arm)?;
    let samples: Vec<Vec<f64>> = chains.iter().map(|c| c.final_state.clone()).collect();
    let d = lab.family.dim();

    let mut csv = format!("chain,{}\n", coord_header("x", d));
    for (i, x) in samples.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", coords(x));
    }
    ws.write("samples.csv", csv)?;
    if let Some(p) = &probes {
        ws.write("omega_schedule.csv", omega_csv(p, seed))?;
    }
    for chain in 0..cfg.trajectory_chains.min(cfg.chains) as u64 {
        let traj = lab.trajectory(seed, &arm, chain)?;
        ws.write(&format!("trajectories/chain_{chain:04}.csv"), trajectory_csv(&traj))?;
    }
    let metrics = lab.sample_metrics(&samples, seed)?;
    ws.write("sample_metrics.json", json_pretty(&metrics)?)?;
    let data = lab.data_draws(seed, 0, samples.len())?;
    ws.write("samples.svg", sample_plot("generated vs data", &samples, &data))?;
    ws.finish()
}

/// Per-step rows: visited state, weight, both noise predictions, and gap.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let d = traj.final_state().len();
    let mut out = format!(
        "t,t_prev,omega,{},{},{},{},refine_iters,gap,mean_deviation\n",
        coord_header("x_in", d),
        coord_header("x_out", d),
        coord_header("eps_guided", d),
        coord_header("eps_used", d)
    );
    for (i, r) in traj.steps.iter().enumerate() {
        let iters = r.refine.map(|k| traj.refine_traces[k].iterations().to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.t_prev,
            num(r.omega),
            coords(traj.step_input(i)),
            coords(&traj.states[i + 1]),
            coords(&r.eps_guided),
            coords(&r.eps_used),
            iters,
            opt_num(r.gap.map(|g| g.pointwise)),
            opt_num(r.gap.map(|g| g.mean_deviation)),
        );
    }
    out
}

/// Row of the per-`t` optimal-weight table.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaRow {
    pub t: usize,
    pub estimator: String,
    pub omega_star: Option<f64>,
    pub l_star: Option<f64>,
    pub l1: f64,
    pub n_probes: usize,
}

/// `L(ω)` curves and every estimator's `ω*` at each `sweep.t_values` entry.
pub fn sweep(lab: &Lab, seed: u64) -> Result<(Vec<(usize, Vec<(f64, f64)>)>, Vec<OmegaRow>)> {
    let sw = &lab.cfg.sweep;
    let estimators = [
        OmegaEstimator::LeastSquares,
        OmegaEstimator::MeanOfRatios {
            reading: RatioReading::InnerProduct,
        },
        OmegaEstimator::MeanOfRatios {
            reading: RatioReading::PerDimension,
        },
        OmegaEstimator::Grid {
            lo: sw.omega_lo,
            hi: sw.omega_hi,
            resolution: sw.resolution,
        },
    ];
    let mut curves = Vec::new();
    let mut rows = Vec::new();
    for &t in &sw.t_values {
        let ps = lab.probe_scores(t, seed)?;
        let k = sw.curve_points - 1;
        let curve = (0..=k)
            .map(|i| {
                let w = sw.omega_lo + (sw.omega_hi - sw.omega_lo) * (i as f64 / k as f64);
                (w, ps.l_of_omega(w))
            })
            .collect();
        curves.push((t, curve));
        for est in &estimators {
            let star = match ps.omega_star(est, lab.exec) {
                Ok(e) => Some(e.value),
                Err(Error::DegenerateGuidance { .. }) => None,
                Err(e) => return Err(e.at_step(t)),
            };
            rows.push(OmegaRow {
                t,
                estimator: estimator_label(est),
                omega_star: star,
                l_star: star.map(|w| ps.l_of_omega(w)),
                l1: ps.l_of_omega(1.0),
                n_probes: ps.len(),
            });
        }
    }
    Ok((curves, rows))
}

pub fn cmd_sweep_omega(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> Result<RunManifest> {
    let lab = Lab::new(cfg, exec)?;
    let mut ws = Workspace::create(out, "sweep-omega", cfg, family_hash(&lab))?;
    let seed = cfg.seed;
    let (curves, rows) = sweep(&lab, seed)?;
    let mut curve_csv = String::from("t,omega,L,n_probes,seed\n");
    for (t, curve) in &curves {
        for (w, l) in curve {
            let _ = writeln!(curve_csv, "{t},{},{},{},{seed}", num(*w), num(*l), cfg.probes);
        }
    }
    let mut table = String::from("t,estimator,omega_star,L_star,L1,n_probes,seed,status\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{seed},{}",
            r.t,
            r.estimator,
            opt_num(r.omega_star),
            opt_num(r.l_star),
            num(r.l1),
            r.n_probes,
            if r.omega_star.is_some() { "ok" } else { "degenerate" }
        );
    }
    ws.write("omega_curve.csv", curve_csv)?;
    ws.write("omega_star.csv", table)?;
    let series: Vec<Series> = curves.iter().map(|(t, c)| Series::new(format!("t={t}"), c.clone())).collect();
    ws.write("omega_curve.svg", plot::line_chart("L(ω) per step", "ω", "L(ω)", &series))?;
    ws.finish()
}

/// Per-step gap along realized trajectories, with probe-based `L(1)`, `L(ω_used)` and `ω*`.
pub fn gap_run(lab: &Lab, seed: u64) -> Result<GapReport> {
    let ts = lab.visited_steps()?;
    let (arm, probes) = configured_arm(lab, seed, &ts)?;
    let chains = lab.run_chains(seed, &arm)?;
    let mut report = gap_report(&chains, seed)?;
    for p in probes.iter().flatten() {
        report.set_probe_terms(p.t, p.l1, p.l_used, p.omega_star, p.n_probes)?;
    }
    Ok(report)
}

pub fn cmd_gap_report(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> Result<RunManifest> {
    let lab = Lab::new(cfg, exec)?;
    let mut ws = Workspace::create(out, "gap-report", cfg, family_hash(&lab))?;
    let report = gap_run(&lab, cfg.seed)?;
    ws.write("gap.csv", report.to_csv())?;
    ws.write("gap_summary.json", json_pretty(&report.summary())?)?;
    let mut series = vec![Series::new("gap", report.entries.iter().map(|e| (e.t as f64, e.gap)).collect())];
    if report.entries.iter().any(|e| e.l1.is_some()) {
        series.push(Series::new(
            "L(1)",
            report.entries.iter().filter_map(|e| Some((e.t as f64, e.l1?))).collect(),
        ));
        series.push(Series::new(
            "L(ω used)",
            report.entries.iter().filter_map(|e| Some((e.t as f64, e.l_used?))).collect(),
        ));
    }
    ws.write("gap.svg", plot::line_chart("per-step guidance gap", "t", "squared score error", &series))?;
    ws.finish()
}

/// One arm's outcome under one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub arm: &'static str,
    pub seed: u64,
    pub accumulated_gap: f64,
    pub sliced_wasserstein: f64,
    pub mmd: f64,
    pub refined_steps: usize,
    /// Refined steps whose final objective is strictly below the initial one.
    pub refined_steps_decreased: usize,
}

pub const ARMS: [&str; 4] = ["omega1", "omega_star", "omega1_refined", "omega_star_refined"];

/// The four arms of `refine-compare` under master seed `seed`.
pub fn compare_seed(lab: &Lab, seed: u64) -> Result<Vec<ArmResult>> {
    let ts = lab.visited_steps()?;
    let estimator = match lab.cfg.omega_plan {
        OmegaPlan::Optimal { estimator } => estimator,
        OmegaPlan::Fixed => OmegaEstimator::LeastSquares,
    };
    let probes = lab.probe_pass(&ts, seed, Some(estimator), 1.0)?;
    let table = lab.omega_table(&probes);
    let refine = lab.cfg.refine.active();
    let one = GuidanceSpec::cfg(1.0);
    let arms = [
        Arm {
            name: ARMS[0],
            guidance: one,
            omega_table: None,
            refine: None,
        },
        Arm {
            name: ARMS[1],
            guidance: one,
            omega_table: Some(table.clone()),
            refine: None,
        },
        Arm {
            name: ARMS[2],
            guidance: one,
            omega_table: None,
            refine,
        },
        Arm {
            name: ARMS[3],
            guidance: one,
            omega_table: Some(table),
            refine,
        },
    ];
    let n = lab.cfg.chains;
    let data = lab.data_draws(seed, 0, n)?;
    arms.iter()
        .map(|arm| {
            let chains = lab.run_chains(seed, arm)?;
            let report = gap_report(&chains, seed)?;
            let samples: Vec<Vec<f64>> = chains.iter().map(|c| c.final_state.clone()).collect();
            let m = &lab.cfg.metrics;
            let refine_rows = chains.iter().flat_map(|c| c.refine.iter());
            Ok(ArmResult {
                arm: arm.name,
                seed,
                accumulated_gap: report.accumulated_gap,
                sliced_wasserstein: sliced_wasserstein(
                    &samples,
                    &data,
                    m.projections,
                    &mut rng_for(seed, Stream::Metric, 0),
                    lab.exec,
                )?,
                mmd: mmd_rbf(&samples, &data, m.mmd_bandwidth, lab.exec)?,
                refined_steps: refine_rows.clone().count(),
                refined_steps_decreased: refine_rows.filter(|(l0, lf, _)| lf < l0).count(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub n_seeds: usize,
    pub n_chains: usize,
    pub refine_enabled: bool,
    /// Seeds where the `ω*(t)` arm's accumulated gap is strictly below the `ω = 1` arm's.
    pub omega_star_wins: usize,
    pub refined_omega_star_wins: usize,
    pub refined_steps: usize,
    pub refined_steps_decreased: usize,
    pub mean_accumulated_gap: Vec<(String, f64)>,
}

/// Runs every seed; seed `k` is `cfg.seed + k`.
pub fn refine_compare(lab: &Lab) -> Result<(Vec<Vec<ArmResult>>, CompareSummary)> {
    let per_seed: Vec<Vec<ArmResult>> = (0..lab.cfg.seeds as u64)
        .map(|k| compare_seed(lab, lab.cfg.seed.wrapping_add(k)))
        .collect::<Result<_>>()?;
    let wins = |a: usize, b: usize| per_seed.iter().filter(|r| r[b].accumulated_gap < r[a].accumulated_gap).count();
    let refined: Vec<&ArmResult> = per_seed.iter().flat_map(|r| &r[2..]).collect();
    let summary = CompareSummary {
        n_seeds: per_seed.len(),
        n_chains: lab.cfg.chains,
        refine_enabled: lab.cfg.refine.enabled,
        omega_star_wins: wins(0, 1),
        refined_omega_star_wins: wins(2, 3),
        refined_steps: refined.iter().map(|r| r.refined_steps).sum(),
        refined_steps_decreased: refined.iter().map(|r| r.refined_steps_decreased).sum(),
        mean_accumulated_gap: (0..ARMS.len())
            .map(|a| {
                let m = per_seed.iter().map(|r| r[a].accumulated_gap).sum::<f64>() / per_seed.len() as f64;
                (ARMS[a].to_string(), m)
            })
            .collect(),
    };
    Ok((per_seed, summary))
}

pub fn cmd_refine_compare(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> Result<RunManifest> {
    let lab = Lab::new(cfg, exec)?;
    if lab.cfg.guidance.mode != GuidanceMode::Cfg {
        return Err(Error::Config(vec!["refine-compare needs guidance.mode cfg".into()]));
    }
    let mut ws = Workspace::create(out, "refine-compare", cfg, family_hash(&lab))?;
    let (per_seed, summary) = refine_compare(&lab)?;
    let mut rows = String::from("seed,arm,accumulated_gap,sliced_wasserstein,mmd,refined_steps,refined_steps_decreased\n");
    let mut paired = String::from("seed");
    for a in ARMS {
        let _ = write!(paired, ",gap_{a}");
    }
    paired.push_str(",gap_delta_omega,gap_delta_refined\n");
    for results in &per_seed {
        for r in results {
            let _ = writeln!(
                rows,
                "{},{},{},{},{},{},{}",
                r.seed,
                r.arm,
                num(r.accumulated_gap),
                num(r.sliced_wasserstein),
                num(r.mmd),
                r.refined_steps,
                r.refined_steps_decreased
            );
        }
        let g: Vec<f64> = results.iter().map(|r| r.accumulated_gap).collect();
        let _ = write!(paired, "{}", results[0].seed);
        for v in &g {
            let _ = write!(paired, ",{}", num(*v));
        }
        let _ = writeln!(paired, ",{},{}", num(g[1] - g[0]), num(g[2] - g[0]));
    }
    ws.write("refine_compare.csv", rows)?;
    ws.write("paired.csv", paired)?;
    ws.write("refine_compare_summary.json", json_pretty(&summary)?)?;
    let series: Vec<Series> = (0..ARMS.len())
        .map(|a| {
            Series::new(
                ARMS[a],
                per_seed.iter().enumerate().map(|(i, r)| (i as f64, r[a].accumulated_gap)).collect(),
            )
        })
        .collect();
    ws.write(
        "refine_compare.svg",
        plot::line_chart("accumulated gap per seed", "seed index", "accumulated gap", &series),
    )?;
    ws.finish()
}
