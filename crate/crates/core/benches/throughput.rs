//! Thread-pool comparison for the heavy paths.
//!
//! Each workload runs once on a single-thread rayon pool and once on the
//! default pool. Build with `--no-default-features` to time the sequential
//! fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use enscal::ensemble::{combine, CombinationWeights};
use enscal::metrics::{calibration_errors, skce_uq, SkceOptions, Targets};
use enscal::scaling::{fit_temperature, FitConfig};
use enscal::synth::{gen_calibrated_members, sample_dirichlet_truth, SynthesisConfig};
use enscal::{BinningScheme, LogitSet, SampleSet};
use rayon::{ThreadPool, ThreadPoolBuilder};

fn pools() -> Vec<(&'static str, ThreadPool)> {
    vec![
        ("1-thread", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("default", ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn workloads(c: &mut Criterion) {
    let config = SynthesisConfig {
        samples: 200_000,
        ..SynthesisConfig::default()
    };
    let truth = sample_dirichlet_truth(&config).unwrap();
    let ens = gen_calibrated_members(&truth, &config).unwrap();
    let combined = combine(&ens, &CombinationWeights::uniform(config.members)).unwrap();
    let logits = LogitSet::new(
        combined.probs().mapv(|p| 2.0 * p.max(1e-12).ln()),
        combined.labels().to_vec(),
    )
    .unwrap();
    let small = SynthesisConfig {
        samples: 20_000,
        ..config
    };

    let mut group = c.benchmark_group("throughput");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("metrics", name), |b| {
            b.iter(|| {
                pool.install(|| {
                    calibration_errors(
                        combined.probs(),
                        Targets::Labels(combined.labels()),
                        None,
                        BinningScheme::default(),
                    )
                })
            })
        });
        group.bench_function(BenchmarkId::new("skce", name), |b| {
            b.iter(|| pool.install(|| skce_uq(&combined, SkceOptions::default()).unwrap()))
        });
        group.bench_function(BenchmarkId::new("fit_temperature", name), |b| {
            b.iter(|| pool.install(|| fit_temperature(&logits, &FitConfig::default()).unwrap()))
        });
        group.bench_function(BenchmarkId::new("alg1", name), |b| {
            b.iter(|| {
                pool.install(|| {
                    let t = sample_dirichlet_truth(&small).unwrap();
                    gen_calibrated_members(&t, &small).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, workloads);
criterion_main!(benches);
