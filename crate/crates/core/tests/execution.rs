use diffgap_core::config::{ExperimentConfig, FieldSpec, OmegaPlan};
use diffgap_core::experiments::{compare_seed, gap_run, sweep, Lab};
use diffgap_core::guidance::OmegaEstimator;
use diffgap_core::sampler::{SamplerConfig, SamplerKind};
use diffgap_core::schedule::ScheduleSpec;
use diffgap_core::score::PerturbationSpec;
use diffgap_core::{ConditionLabel, Execution};

fn small(kind: SamplerKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.schedule = ScheduleSpec::Linear {
        steps: 60,
        beta_start: 1e-3,
        beta_end: 0.2,
    };
    cfg.field = FieldSpec::Perturbed {
        perturbation: PerturbationSpec::constant(0.4, 5),
    };
    cfg.condition = ConditionLabel::Class(1);
    cfg.sampler = SamplerConfig {
        kind,
        steps: Some(20),
        ..SamplerConfig::default()
    };
    cfg.omega_plan = OmegaPlan::Optimal {
        estimator: OmegaEstimator::LeastSquares,
    };
    cfg.refine.enabled = true;
    cfg.chains = 24;
    cfg.probes = 150;
    cfg.sweep.t_values = vec![1, 30, 60];
    cfg
}

fn both(cfg: &ExperimentConfig) -> (Lab, Lab) {
    (
        Lab::new(cfg, Execution::Sequential).unwrap(),
        Lab::new(cfg, Execution::Parallel).unwrap(),
    )
}

#[test]
fn sweep_is_identical_across_execution_modes() {
    let (seq, par) = both(&small(SamplerKind::Ddpm));
    assert_eq!(sweep(&seq, 3).unwrap(), sweep(&par, 3).unwrap());
}

#[test]
fn gap_report_is_identical_across_execution_modes() {
    for kind in [SamplerKind::Ddpm, SamplerKind::Ddim, SamplerKind::PcLangevin] {
        let (seq, par) = both(&small(kind));
        assert_eq!(gap_run(&seq, 9).unwrap(), gap_run(&par, 9).unwrap(), "{kind:?}");
    }
}

#[test]
fn refine_comparison_is_identical_across_execution_modes() {
    let (seq, par) = both(&small(SamplerKind::Ddim));
    let a = compare_seed(&seq, 4).unwrap();
    assert_eq!(a, compare_seed(&par, 4).unwrap());
    assert_eq!(a.len(), 4);
}
