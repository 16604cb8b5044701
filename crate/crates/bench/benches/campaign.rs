use criterion::{criterion_group, criterion_main, Criterion};
use neurotrain::campaign::TrainingConfig;
use neurotrain::{run_campaign, CampaignSpec, DatasetSpec, ModelSpec, SynthSpec};
use std::path::Path;

fn spec(parallelism: usize) -> CampaignSpec {
    let mut synth = SynthSpec::new(4, 40, 10, 0.05);
    synth.train_per_class = 30;
    synth.test_per_class = 10;
    CampaignSpec {
        trainers: vec!["bptt".into(), "eprop".into(), "dfa".into(), "stdp".into()],
        models: vec![ModelSpec::fc(&[40, 32, 4]), ModelSpec::rc(&[40, 32, 4])],
        datasets: vec![DatasetSpec::Synth(synth)],
        epochs: 1,
        trials: 2,
        seed: 0,
        search_space: Default::default(),
        hyperparams: Default::default(),
        parallelism,
        training: TrainingConfig {
            batch_size: 16,
            ..TrainingConfig::default()
        },
    }
}

/// Synthetic 4 × 2 × 1 campaign end to end, serial and with four workers.
fn bench_campaign(c: &mut Criterion) {
    let mut g = c.benchmark_group("synth_campaign");
    g.sample_size(10);
    for p in [1, 4] {
        let s = spec(p);
        g.bench_function(format!("parallelism_{p}"), |b| {
            b.iter(|| run_campaign(&s, Path::new(".")).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_campaign);
criterion_main!(benches);
