//! Sequential vs parallel execution of the data-parallel kernels.
//!
//! Build without default features to measure the sequential fallback alone.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diffgap_core::exec::{rng_for, Stream};
use diffgap_core::gap::{knn_precision_recall, mmd_rbf, sliced_wasserstein};
use diffgap_core::guidance::{draw_probes, Guide, GuidanceSpec, OmegaEstimator, ProbeScores};
use diffgap_core::sampler::{sample_chains, ChainSetup, SamplerConfig};
use diffgap_core::score::{PerturbationSpec, PerturbedField};
use diffgap_core::{ConditionLabel, ConditionedMixtureFamily, Execution, NoiseSchedule, OracleField};

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn fixture(steps: usize) -> (Arc<OracleField>, PerturbedField) {
    let family = ConditionedMixtureFamily::preset("ring-2d").unwrap();
    let oracle = Arc::new(OracleField::new(family, NoiseSchedule::linear(steps, 1e-4, 0.02 * 1000.0 / steps as f64).unwrap()).unwrap());
    let field = PerturbedField::new(oracle.clone(), PerturbationSpec::constant(0.5, 1)).unwrap();
    (oracle, field)
}

fn points(n: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let family = ConditionedMixtureFamily::preset("ring-2d").unwrap();
    let mut rng = rng_for(seed, Stream::Data, 0);
    (0..n)
        .map(|_| family.sample(ConditionLabel::Class(0), &mut rng).unwrap().iter().map(|v| v + shift).collect())
        .collect()
}

fn chains(c: &mut Criterion) {
    let (oracle, field) = fixture(100);
    let mut group = c.benchmark_group("sample_chains_256x100");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        let mut setup = ChainSetup::new(
            oracle.schedule(),
            Guide::new(&field, GuidanceSpec::cfg(2.0)),
            SamplerConfig::ddpm(),
            ConditionLabel::Class(0),
        );
        setup.oracle = Some(&*oracle);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(sample_chains(&setup, 1, 256, exec).unwrap()))
        });
    }
    group.finish();
}

fn omega_grid(c: &mut Criterion) {
    let (oracle, field) = fixture(1000);
    let c0 = ConditionLabel::Class(0);
    let probes = draw_probes(&oracle, c0, 200, 5000, 3).unwrap();
    let grid = OmegaEstimator::Grid {
        lo: -2.0,
        hi: 6.0,
        resolution: 1e-3,
    };
    let mut group = c.benchmark_group("omega_star_5000_probes");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::new("evaluate", name), |b| {
            b.iter(|| black_box(ProbeScores::evaluate(&probes, &field, &*oracle, c0, 200, exec).unwrap()))
        });
        let ps = ProbeScores::evaluate(&probes, &field, &*oracle, c0, 200, exec).unwrap();
        group.bench_function(BenchmarkId::new("grid", name), |b| {
            b.iter(|| black_box(ps.omega_star(&grid, exec).unwrap()))
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let a = points(2000, 0.0, 1);
    let b = points(2000, 0.1, 2);
    let mut group = c.benchmark_group("metrics_2000");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::new("mmd", name), |bch| {
            bch.iter(|| black_box(mmd_rbf(&a, &b, 1.0, exec).unwrap()))
        });
        group.bench_function(BenchmarkId::new("knn", name), |bch| {
            bch.iter(|| black_box(knn_precision_recall(&a, &b, 3, exec).unwrap()))
        });
        group.bench_function(BenchmarkId::new("sliced_w2", name), |bch| {
            bch.iter(|| black_box(sliced_wasserstein(&a, &b, 50, &mut rng_for(0, Stream::Metric, 0), exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, chains, omega_grid, metrics);
criterion_main!(benches);
