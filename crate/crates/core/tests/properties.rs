use neurotrain::bptt::Tape;
use neurotrain::campaign::{generate_cells, TrainingConfig};
use neurotrain::trainers::{
    trainer_meta, Batch, DrtpTrainer, RStdpTrainer, StdpParams, TargetNonlinearity, Trainer, TRAINER_NAMES,
};
use neurotrain::{
    build_trainer, load_dataset, CampaignSpec, DatasetSpec, Model, ModelSpec, Rng, SpikeTrain, SurrogateFn, SynthSpec,
    Tensor, TrainerSpec,
};
use proptest::prelude::*;
use std::path::Path;

fn spikes(rng: &mut Rng, t: usize, batch: usize, d: usize, p: f32) -> SpikeTrain {
    let xs: Vec<f32> = (0..t * batch * d).map(|_| rng.bernoulli(p) as u8 as f32).collect();
    SpikeTrain::new(Tensor::new(vec![t, batch, d], xs).unwrap()).unwrap()
}

fn binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spikes_are_binary(seed in any::<u64>(), recurrent in any::<bool>(), scale in 0.5f32..6.0, t in 1usize..8) {
        let mut rng = Rng::new(seed);
        let sizes = [6, 5, 4, 3];
        let spec = if recurrent { ModelSpec::rc(&sizes) } else { ModelSpec::fc(&sizes) };
        let mut model = Model::build(spec, &mut rng).unwrap();
        let scaled: Vec<Tensor> = model.params().iter().map(|p| p.scale(scale)).collect();
        model.set_params(&scaled).unwrap();
        let x = spikes(&mut rng, t, 3, 6, 0.5);
        let (out, tape) = Tape::record(&model, &x).unwrap();
        prop_assert!(binary(&out));
        prop_assert!(tape.entries().iter().all(|e| binary(&e.spikes)));
    }

    #[test]
    fn stdp_weights_stay_clipped(seed in any::<u64>(), a_plus in 0.0f64..2.0, a_minus in 0.0f64..2.0,
                                 w_max in 0.05f64..2.0, steps in 1usize..5) {
        let mut rng = Rng::new(seed);
        let mut model = Model::build(ModelSpec::fc(&[8, 5]), &mut rng).unwrap();
        let spec = TrainerSpec::new("stdp")
            .with("a_plus", a_plus)
            .with("a_minus", a_minus)
            .with("w_max", w_max)
            .with("lr", 3.0);
        let (mut tr, mut opt) = build_trainer(&spec, &model, &mut rng).unwrap();
        tr.prepare(&mut model).unwrap();
        for _ in 0..steps {
            let batch = Batch::unlabeled(spikes(&mut rng, 10, 4, 8, 0.6));
            let u = tr.step(&model, &batch).unwrap();
            opt.apply(&mut model, &u).unwrap();
            tr.post_apply(&mut model).unwrap();
            let w = model.params()[0];
            prop_assert!(w.data().iter().all(|&v| (0.0..=w_max as f32).contains(&v)));
        }
    }

    #[test]
    fn rstdp_update_factors_into_eligibility_and_modulator(seed in any::<u64>(), r1 in -2.0f32..2.0, r2 in -2.0f32..2.0) {
        prop_assume!((r1 - 0.5).abs() > 1e-2 && (r2 - 0.5).abs() > 1e-2);
        let mut rng = Rng::new(seed);
        let model = Model::build(ModelSpec::fc(&[10, 3]), &mut rng).unwrap();
        let make = || RStdpTrainer::new(trainer_meta("rstdp").unwrap(), 0.1, StdpParams::default(), 0.9, Rng::new(1)).unwrap();
        let (mut a, mut b) = (make(), make());
        let x = spikes(&mut rng, 12, 1, 10, 0.5);
        let (e, _) = a.eligibility(&model, &x, 0).unwrap();
        let (dw1, m1) = a.deliver(&e, r1).unwrap();
        let (dw2, m2) = b.deliver(&e, r2).unwrap();
        for ((&x1, &x2), &ev) in dw1.data().iter().zip(dw2.data()).zip(e.data()) {
            let (q1, q2) = (x1 / m1, x2 / m2);
            prop_assert!((q1 - q2).abs() <= 1e-5 * q1.abs().max(1e-6), "{q1} vs {q2}");
            prop_assert!((q1 - 0.1 * ev).abs() <= 1e-5 * ev.abs().max(1e-6));
        }
    }

    /// Hidden-layer updates under DRTP see only (B, y*) and local activity, so
    /// the output weights cannot influence them.
    #[test]
    fn drtp_hidden_update_ignores_output_weights(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut model = Model::build(ModelSpec::fc(&[6, 7, 3]), &mut rng).unwrap();
        let b = neurotrain::tensor::rand_uniform(&mut rng, &[7, 3], -1.0, 1.0).unwrap();
        let mut t = DrtpTrainer::new(trainer_meta("drtp").unwrap(), 1.0, SurrogateFn::default(),
                                     TargetNonlinearity::Identity, vec![b]);
        let batch = Batch::new(spikes(&mut rng, 5, 4, 6, 0.5), vec![0, 1, 2, 1]);
        let ha = t.step(&model, &batch).unwrap().deltas.grads[0].clone();
        let mut p: Vec<Tensor> = model.params().into_iter().cloned().collect();
        p[1] = neurotrain::tensor::rand_uniform(&mut rng, p[1].shape(), -2.0, 2.0).unwrap();
        model.set_params(&p).unwrap();
        let hb = t.step(&model, &batch).unwrap().deltas.grads[0].clone();
        prop_assert_eq!(ha, hb);
    }

    #[test]
    fn cells_are_the_full_cross_product(tmask in 1u16..1024, mmask in 0u8..8, dmask in 0u8..8) {
        let trainers: Vec<String> = TRAINER_NAMES.iter().enumerate()
            .filter(|(i, _)| tmask >> i & 1 == 1).map(|(_, n)| n.to_string()).collect();
        let all_models = [ModelSpec::fc(&[20, 8, 4]), ModelSpec::rc(&[20, 8, 4]), ModelSpec::fc(&[30, 4])];
        let models: Vec<ModelSpec> = all_models.iter().enumerate()
            .filter(|(i, _)| mmask >> i & 1 == 1).map(|(_, m)| m.clone()).collect();
        let all_data = [
            DatasetSpec::Synth(SynthSpec::new(4, 20, 5, 0.1)),
            DatasetSpec::Synth(SynthSpec::new(4, 30, 5, 0.1)),
            DatasetSpec::Mnist,
        ];
        let datasets: Vec<DatasetSpec> = all_data.iter().enumerate()
            .filter(|(i, _)| dmask >> i & 1 == 1).map(|(_, d)| d.clone()).collect();
        let spec = CampaignSpec {
            trainers: trainers.clone(), models: models.clone(), datasets: datasets.clone(), epochs: 1, trials: 1,
            seed: 0, search_space: Default::default(), hyperparams: Default::default(), parallelism: 1,
            training: TrainingConfig::default(),
        };
        let cells = generate_cells(&spec).unwrap();
        prop_assert_eq!(cells.len(), trainers.len() * models.len() * datasets.len());
        for c in &cells {
            let m = models.iter().find(|m| m.display_name() == c.model).unwrap();
            let d = datasets.iter().find(|d| d.name() == c.dataset).unwrap();
            let shape_ok = m.input_size() == d.input_size() && m.output_size() >= d.classes();
            let meta_ok = trainer_meta(&c.trainer).unwrap().check(m).is_ok();
            prop_assert_eq!(c.supported(), shape_ok && meta_ok, "{:?}", c);
        }
    }

    #[test]
    fn synth_splits_are_deterministic_and_disjoint(seed in any::<u64>(), classes in 2usize..5, per in 1usize..6) {
        let mut s = SynthSpec::new(classes, 12, 4, 0.1);
        s.seed = seed;
        s.train_per_class = per;
        s.test_per_class = per + 1;
        let spec = DatasetSpec::Synth(s);
        let a = load_dataset(&spec, Path::new(".")).unwrap();
        let b = load_dataset(&spec, Path::new(".")).unwrap();
        prop_assert_eq!(a.train_indices(), b.train_indices());
        prop_assert_eq!(a.test_indices(), b.test_indices());
        prop_assert_eq!(a.rasters().unwrap().data(), b.rasters().unwrap().data());
        prop_assert!(a.train_indices().iter().all(|i| !a.test_indices().contains(i)));
        prop_assert_eq!(a.train_indices().len() + a.test_indices().len(), a.len());
        let f = a.features();
        prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn campaign_spec_serde_round_trip(seed in any::<u64>(), trials in 1usize..5, epochs in 0usize..4) {
        let spec = CampaignSpec {
            trainers: vec!["bptt".into(), "stdp".into()],
            models: vec![ModelSpec::fc(&[20, 4]), ModelSpec::conv([1, 12, 12], 4)],
            datasets: vec![DatasetSpec::Synth(SynthSpec::new(4, 20, 5, 0.1)), DatasetSpec::Cifar10],
            epochs, trials, seed,
            search_space: Default::default(), hyperparams: Default::default(), parallelism: 2,
            training: TrainingConfig::default(),
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: CampaignSpec = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(spec, back);
    }
}
