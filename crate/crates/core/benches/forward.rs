//! Batch forward and backward, rayon map against the sequential fallback.
//!
//! `cargo bench -p omniseg-core --bench forward`

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use omniseg_core::backbone::BackboneConfig;
use omniseg_core::dataio::{generate, samples_in, SyntheticSpec};
use omniseg_core::datamodel::{Registries, Sample, Split};
use omniseg_core::{parallel, ModelConfig, OmniSeg};

const SIZE: usize = 64;

fn setup() -> (OmniSeg, Vec<Sample>) {
    let config = ModelConfig {
        backbone: BackboneConfig {
            base_channels: 8,
            levels: 3,
            groupnorm_groups: 4,
            ..BackboneConfig::default()
        },
        input_size: SIZE,
    };
    let model = OmniSeg::new(config, Registries::default(), 0).unwrap();
    let spec = SyntheticSpec {
        count_per_task: 4,
        image_size: SIZE,
        seed: 0,
        split_ratio: [1, 0, 0],
        ..SyntheticSpec::default()
    };
    let samples = samples_in(&generate(&spec, &Registries::default()).unwrap(), Split::Train);
    let batch = samples.into_iter().filter(|s| s.task_id == 0).collect();
    (model, batch)
}

fn bench_forward(c: &mut Criterion) {
    let (model, batch) = setup();
    let mut group = c.benchmark_group("predict_batch");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("rayon", batch.len()), &batch, |b, batch| {
        b.iter(|| parallel::map(batch, |_, s| model.predict_mask(s).unwrap()))
    });
    group.bench_with_input(BenchmarkId::new("sequential", batch.len()), &batch, |b, batch| {
        b.iter(|| parallel::map_sequential(batch, |_, s| model.predict_mask(s).unwrap()))
    });
    group.finish();
}

fn bench_gradient(c: &mut Criterion) {
    let (model, batch) = setup();
    let mut group = c.benchmark_group("gradient_batch");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("rayon", batch.len()), &batch, |b, batch| {
        b.iter(|| parallel::map(batch, |_, s| model.batch_gradient(std::slice::from_ref(s), 1.2).unwrap().0))
    });
    group.bench_with_input(BenchmarkId::new("sequential", batch.len()), &batch, |b, batch| {
        b.iter(|| {
            parallel::map_sequential(batch, |_, s| model.batch_gradient(std::slice::from_ref(s), 1.2).unwrap().0)
        })
    });
    group.finish();
}

criterion_group!(benches, bench_forward, bench_gradient);
criterion_main!(benches);
