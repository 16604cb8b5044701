//! Reward-modulated STDP: STDP correlations build an eligibility trace and
//! a reward-minus-baseline signal gates it into a weight change.

use super::stdp::{clip_and_normalize, positive_init, simulate_sample, StdpParams};
use super::{Batch, HyperReader, Trainer, TrainerMeta, TrainerUpdate};
use crate::bptt::GradSet;
use crate::encoding::{encode, EncoderKind, EncoderSpec, SpikeTrain};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::snn::{decay_trace, LifParams};
use crate::tensor::Tensor;

/// A bandit task: each arm pays a fixed reward. The stimulus is the same
/// Poisson-coded constant input every episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandit {
    pub rewards: Vec<f32>,
    pub inputs: usize,
    pub rate: f32,
    pub timesteps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditRun {
    pub choices: Vec<usize>,
    pub rewards: Vec<f32>,
}

impl BanditRun {
    /// Fraction of the last `n` episodes that picked `arm`.
    pub fn tail_rate(&self, arm: usize, n: usize) -> f64 {
        let tail = &self.choices[self.choices.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().filter(|&&c| c == arm).count() as f64 / tail.len() as f64
    }
}

pub struct RStdpTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub params: StdpParams,
    /// Per-step decay of the eligibility trace.
    pub eligibility_decay: f32,
    /// Running reward baseline.
    pub baseline: f32,
    pub baseline_decay: f32,
    rng: Rng,
    peak_aux: usize,
}

impl RStdpTrainer {
    pub fn new(meta: TrainerMeta, lr: f32, params: StdpParams, eligibility_decay: f32, rng: Rng) -> Result<Self> {
        params.validate()?;
        if !(0.0..1.0).contains(&eligibility_decay) {
            return Err(Error::Config(format!(
                "eligibility_decay must be in [0,1), got {eligibility_decay}"
            )));
        }
        Ok(RStdpTrainer {
            meta,
            lr,
            params,
            eligibility_decay,
            baseline: 0.5,
            baseline_decay: 0.99,
            rng,
            peak_aux: 0,
        })
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, _model: &Model, rng: &mut Rng) -> Result<Self> {
        let d = StdpParams::default();
        let lr = hp.num("lr", 0.01)? as f32;
        let params = StdpParams {
            a_plus: hp.num("a_plus", 1.0)? as f32,
            a_minus: hp.num("a_minus", 0.5)? as f32,
            pre_decay: hp.num("pre_decay", d.pre_decay as f64)? as f32,
            post_decay: hp.num("post_decay", d.post_decay as f64)? as f32,
            wta: hp.num("wta", 1.0)? != 0.0,
            ..d
        };
        let decay = hp.unit("eligibility_decay", 0.95)? as f32;
        let mut t = RStdpTrainer::new(meta, lr, params, decay, rng.split(0x5eed))?;
        t.baseline = hp.num("baseline_init", 0.5)? as f32;
        Ok(t)
    }

    /// Runs one sample and returns its eligibility `[units × inputs]` and
    /// output spike counts.
    pub fn eligibility(&mut self, model: &Model, input: &SpikeTrain, sample: usize) -> Result<(Tensor, Vec<f32>)> {
        let layers = model.layers();
        if layers.len() != 1 {
            return Err(Error::Incompatible("rstdp needs a single-layer model".into()));
        }
        let w = layers[0]
            .dense_weights()
            .ok_or_else(|| Error::Incompatible("rstdp needs dense weights".into()))?;
        let (units, inputs) = w.dims2()?;
        let wt = w.transpose()?;
        let lif: LifParams = *model.lif();
        let p = self.params;
        let lambda = self.eligibility_decay;
        let mut pre = vec![0.0f32; inputs];
        let mut post = vec![0.0f32; units];
        let mut e = vec![0.0f32; units * inputs];
        self.peak_aux = self.peak_aux.max(4 * (inputs + units + e.len()));
        let counts = simulate_sample(wt.data(), inputs, units, &lif, p.wta, input, sample, None, |x, s| {
            decay_trace(&mut pre, x, p.pre_decay);
            decay_trace(&mut post, s, p.post_decay);
            for v in e.iter_mut() {
                *v *= lambda;
            }
            for (j, &sj) in s.iter().enumerate() {
                if sj != 0.0 {
                    for (ev, &tr) in e[j * inputs..(j + 1) * inputs].iter_mut().zip(&pre) {
                        *ev += p.a_plus * tr;
                    }
                }
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    for j in 0..units {
                        if post[j] != 0.0 {
                            e[j * inputs + i] -= p.a_minus * post[j];
                        }
                    }
                }
            }
        });
        Ok((Tensor::new(vec![units, inputs], e)?, counts))
    }

    /// Reward delivery: `Δw = lr · (r - r̄) · e`, then the baseline moves
    /// toward `r`. Returns the change and the modulator `r - r̄`.
    pub fn deliver(&mut self, eligibility: &Tensor, reward: f32) -> Result<(Tensor, f32)> {
        if !reward.is_finite() {
            return Err(Error::Numeric(format!("reward {reward} is not finite")));
        }
        let m = reward - self.baseline;
        self.baseline = self.baseline_decay * self.baseline + (1.0 - self.baseline_decay) * reward;
        Ok((eligibility.scale(self.lr * m), m))
    }

    /// Spike-count argmax with uniformly random tie-breaking.
    pub fn choose(&mut self, counts: &[f32]) -> usize {
        let best = counts.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let ties: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == best).collect();
        ties[self.rng.below(ties.len())]
    }

    /// Plays `episodes` rounds. Call [`Trainer::prepare`] on the model first.
    pub fn run_bandit(
        &mut self,
        model: &mut Model,
        bandit: &Bandit,
        episodes: usize,
        rng: &mut Rng,
    ) -> Result<BanditRun> {
        if model.input_size() != bandit.inputs || model.output_size() != bandit.rewards.len() {
            return Err(Error::Dimension(format!(
                "bandit with {} inputs and {} arms does not fit model {}",
                bandit.inputs,
                bandit.rewards.len(),
                model.name()
            )));
        }
        let spec = EncoderSpec::new(EncoderKind::PoissonRate, bandit.timesteps, 1.0)?;
        let stimulus = Tensor::full(&[1, bandit.inputs], bandit.rate);
        let mut run = BanditRun {
            choices: Vec::with_capacity(episodes),
            rewards: Vec::with_capacity(episodes),
        };
        for _ in 0..episodes {
            let input = encode(&spec, &stimulus, rng)?;
            let (e, counts) = self.eligibility(model, &input, 0)?;
            let arm = self.choose(&counts);
            let r = bandit.rewards[arm];
            let (dw, _) = self.deliver(&e, r)?;
            model.apply_deltas(&[dw])?;
            self.post_apply(model)?;
            run.choices.push(arm);
            run.rewards.push(r);
        }
        Ok(run)
    }
}

impl Trainer for RStdpTrainer {
    fn meta(&self) -> &TrainerMeta {
        &self.meta
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Classification as a one-step task: reward 1 when the most active
    /// output unit matches the label.
    fn step(&mut self, model: &Model, batch: &Batch) -> Result<TrainerUpdate> {
        let labels = batch.labels("rstdp")?.to_vec();
        let mut total = Tensor::zeros(model.params()[0].shape());
        let mut correct = 0usize;
        let mut mods = 0.0f64;
        for (b, &y) in labels.iter().enumerate() {
            let (e, counts) = self.eligibility(model, &batch.input, b)?;
            let action = self.choose(&counts);
            let r = if action == y { 1.0 } else { 0.0 };
            correct += (action == y) as usize;
            let (dw, m) = self.deliver(&e, r)?;
            mods += m as f64;
            total.axpy(1.0, &dw)?;
        }
        let n = labels.len().max(1) as f64;
        let mut u = TrainerUpdate::new(GradSet { grads: vec![total] })
            .with("correct", correct as f64)
            .with("reward", correct as f64 / n);
        u.modulator = Some((mods / n) as f32);
        Ok(u)
    }

    /// Same non-negative start as plain STDP.
    fn prepare(&mut self, model: &mut Model) -> Result<()> {
        positive_init(&self.params, model)
    }

    fn post_apply(&mut self, model: &mut Model) -> Result<()> {
        let mut w = model.params()[0].clone();
        clip_and_normalize(&self.params, &mut w);
        model.set_params(&[w])
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }

    fn predict(&self, model: &Model, input: &SpikeTrain) -> Result<Vec<usize>> {
        let w = model.params()[0];
        let (units, inputs) = w.dims2()?;
        let wt = w.transpose()?;
        let lif = *model.lif();
        Ok((0..input.batch())
            .map(|b| {
                let c = simulate_sample(
                    wt.data(),
                    inputs,
                    units,
                    &lif,
                    self.params.wta,
                    input,
                    b,
                    None,
                    |_, _| {},
                );
                crate::tensor::argmax(&c)
            })
            .collect())
    }
}
