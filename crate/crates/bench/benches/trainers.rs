use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use neurotrain::trainers::TRAINER_NAMES;
use neurotrain::{build_trainer, Model, ModelSpec, Rng, TrainerSpec};
use neurotrain_bench::random_batch;
use std::hint::black_box;

/// One `step` per trainer on a 16-sample batch at T = 25.
fn bench_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("trainer_step");
    g.sample_size(10);
    for name in TRAINER_NAMES {
        let mut rng = Rng::new(3);
        let single_layer = matches!(name, "stdp" | "rstdp");
        let sizes: &[usize] = if single_layer { &[784, 100] } else { &[784, 256, 10] };
        let model = Model::build(ModelSpec::fc(sizes), &mut rng).unwrap();
        let batch = random_batch(&mut rng, 25, 16, 784, 0.1, 10);
        let (mut trainer, _) = build_trainer(&TrainerSpec::new(name), &model, &mut rng).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(name), &batch, |b, batch| {
            b.iter(|| trainer.step(&model, black_box(batch)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_steps);
criterion_main!(benches);
