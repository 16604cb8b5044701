//! Pair-based trace STDP on a single layer with winner-take-all inhibition
//! and homeostatic thresholds, plus neuron labeling for evaluation.

use super::{Batch, HyperReader, Trainer, TrainerMeta, TrainerUpdate};
use crate::bptt::GradSet;
use crate::encoding::SpikeTrain;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::snn::{decay_trace, leaked_membrane, LifParams};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StdpParams {
    pub a_plus: f32,
    pub a_minus: f32,
    pub pre_decay: f32,
    pub post_decay: f32,
    pub w_max: f32,
    /// Threshold increment per spike.
    pub theta_step: f32,
    /// Per-step multiplicative decay of the threshold offset.
    pub theta_decay: f32,
    pub wta: bool,
    /// Target sum of each neuron's incoming weights; `None` disables.
    pub weight_sum: Option<f32>,
    /// Initial weights are uniform in `[0, init_max)`.
    pub init_max: f32,
}

impl Default for StdpParams {
    fn default() -> Self {
        StdpParams {
            a_plus: 0.01,
            a_minus: 0.005,
            pre_decay: 0.8,
            post_decay: 0.8,
            w_max: 1.0,
            theta_step: 0.01,
            theta_decay: 1.0,
            wta: true,
            weight_sum: None,
            init_max: 0.3,
        }
    }
}

impl StdpParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pre_decay", self.pre_decay), ("post_decay", self.post_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.theta_decay) {
            return Err(Error::Config(format!(
                "theta_decay must be in [0,1], got {}",
                self.theta_decay
            )));
        }
        if !(self.w_max > 0.0) || self.a_plus < 0.0 || self.a_minus < 0.0 || self.theta_step < 0.0 {
            return Err(Error::Config(
                "stdp amplitudes must be non-negative and w_max positive".into(),
            ));
        }
        Ok(())
    }
}

/// Online accumulator for the trace form of pair STDP on a `[units × inputs]`
/// weight matrix. Traces are updated before the weight change is read, so a
/// pre spike `k` steps before a post spike contributes `a_plus * pre_decay^k`.
#[derive(Debug, Clone)]
pub struct StdpAccumulator {
    pub pre: Vec<f32>,
    pub post: Vec<f32>,
    pub dw: Vec<f32>,
    units: usize,
    inputs: usize,
}

impl StdpAccumulator {
    pub fn new(units: usize, inputs: usize) -> Self {
        StdpAccumulator {
            pre: vec![0.0; inputs],
            post: vec![0.0; units],
            dw: vec![0.0; units * inputs],
            units,
            inputs,
        }
    }

    pub fn reset_traces(&mut self) {
        self.pre.fill(0.0);
        self.post.fill(0.0);
    }

    /// One timestep: presynaptic spikes `x` and postsynaptic spikes `s`.
    /// `scale` multiplies both amplitudes.
    pub fn observe(&mut self, p: &StdpParams, scale: f32, x: &[f32], s: &[f32]) {
        decay_trace(&mut self.pre, x, p.pre_decay);
        decay_trace(&mut self.post, s, p.post_decay);
        let n_in = self.inputs;
        for (j, &sj) in s.iter().enumerate() {
            if sj != 0.0 {
                let row = &mut self.dw[j * n_in..(j + 1) * n_in];
                let a = scale * p.a_plus * sj;
                for (w, &tr) in row.iter_mut().zip(&self.pre) {
                    *w += a * tr;
                }
            }
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let a = scale * p.a_minus * xi;
                for j in 0..self.units {
                    let tr = self.post[j];
                    if tr != 0.0 {
                        self.dw[j * n_in + i] -= a * tr;
                    }
                }
            }
        }
    }

    pub fn size_bytes(&self) -> usize {
        4 * (self.pre.len() + self.post.len() + self.dw.len())
    }
}

/// Single-layer LIF simulation of one sample with optional winner-take-all
/// and adaptive thresholds. `each(x_t, s_t)` sees every step. Returns spike
/// counts per unit.
pub(crate) fn simulate_sample(
    weights_t: &[f32],
    inputs: usize,
    units: usize,
    lif: &LifParams,
    wta: bool,
    input: &SpikeTrain,
    sample: usize,
    mut offsets: Option<(&mut [f32], f32, f32, bool)>,
    mut each: impl FnMut(&[f32], &[f32]),
) -> Vec<f32> {
    let mut u = vec![0.0f32; units];
    let mut s = vec![0.0f32; units];
    let mut leak = vec![0.0f32; units];
    let mut counts = vec![0.0f32; units];
    let mut winner_fired = false;
    for t in 0..input.timesteps() {
        let x = &input.tensor().outer_slice(t)[sample * inputs..(sample + 1) * inputs];
        if winner_fired {
            // Inhibition after a winning spike silences the whole layer.
            u.fill(0.0);
            s.fill(0.0);
        }
        leaked_membrane(lif, &u, &s, &mut leak);
        u.copy_from_slice(&leak);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &weights_t[i * units..(i + 1) * units];
                for (uj, &w) in u.iter_mut().zip(row) {
                    *uj += xi * w;
                }
            }
        }
        let thr = |j: usize, off: &Option<(&mut [f32], f32, f32, bool)>| -> f32 {
            lif.threshold + off.as_ref().map_or(0.0, |o| o.0[j])
        };
        s.fill(0.0);
        winner_fired = false;
        if wta {
            let mut best: Option<(usize, f32)> = None;
            for j in 0..units {
                let margin = u[j] - thr(j, &offsets);
                if margin >= 0.0 && best.is_none_or(|(_, m)| margin > m) {
                    best = Some((j, margin));
                }
            }
            if let Some((j, _)) = best {
                s[j] = 1.0;
                winner_fired = true;
            }
        } else {
            for j in 0..units {
                if u[j] >= thr(j, &offsets) {
                    s[j] = 1.0;
                }
            }
        }
        if let Some((off, step, decay, adapt)) = offsets.as_mut() {
            if *adapt {
                for (o, &sj) in off.iter_mut().zip(&s) {
                    *o = *o * *decay + *step * sj;
                }
            }
        }
        for (c, &sj) in counts.iter_mut().zip(&s) {
            *c += sj;
        }
        each(x, &s);
    }
    counts
}

fn single_layer(model: &Model) -> Result<(Vec<f32>, usize, usize)> {
    let layers = model.layers();
    if layers.len() != 1 {
        return Err(Error::Incompatible(format!(
            "single-layer plasticity needs exactly one layer, model has {}",
            layers.len()
        )));
    }
    let w = layers[0]
        .dense_weights()
        .ok_or_else(|| Error::Incompatible("plasticity rules need dense weights".into()))?;
    Ok((w.transpose()?.into_data(), layers[0].inputs, layers[0].units))
}

/// Unsupervised STDP. Labels are ignored by `step` and used only by
/// `calibrate`, which assigns each neuron the class it responds to most.
pub struct StdpTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub params: StdpParams,
    offsets: Vec<f32>,
    response: Vec<f64>,
    class_counts: Vec<f64>,
    classes: usize,
    peak_aux: usize,
}

impl StdpTrainer {
    pub fn new(meta: TrainerMeta, params: StdpParams, model: &Model, classes: usize) -> Result<Self> {
        params.validate()?;
        meta.ensure(model.spec())?;
        let units = model.output_size();
        Ok(StdpTrainer {
            meta,
            lr: 1.0,
            params,
            offsets: vec![0.0; units],
            response: vec![0.0; units * classes],
            class_counts: vec![0.0; classes],
            classes,
            peak_aux: 0,
        })
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, model: &Model) -> Result<Self> {
        let d = StdpParams::default();
        let lr = hp.num("lr", 1.0)? as f32;
        // Rows sum to a tenth of the fan-in unless set; 0 turns it off.
        let weight_sum = hp.num("weight_sum", 0.1 * model.input_size() as f64)?;
        let params = StdpParams {
            a_plus: hp.num("a_plus", d.a_plus as f64)? as f32,
            a_minus: hp.num("a_minus", d.a_minus as f64)? as f32,
            pre_decay: hp.num("pre_decay", d.pre_decay as f64)? as f32,
            post_decay: hp.num("post_decay", d.post_decay as f64)? as f32,
            w_max: hp.positive("w_max", d.w_max as f64)? as f32,
            theta_step: hp.num("theta_step", d.theta_step as f64)? as f32,
            theta_decay: hp.num("theta_decay", d.theta_decay as f64)? as f32,
            wta: hp.num("wta", 1.0)? != 0.0,
            weight_sum: (weight_sum > 0.0).then_some(weight_sum as f32),
            init_max: hp.positive("init_max", d.init_max as f64)? as f32,
        };
        let classes = hp.count("classes", 10)?;
        let mut t = StdpTrainer::new(meta, params, model, classes.max(1))?;
        t.lr = lr;
        Ok(t)
    }

    pub fn threshold_offsets(&self) -> &[f32] {
        &self.offsets
    }

    /// Class assigned to each neuron, `None` for neurons that never fired
    /// during calibration.
    pub fn assignments(&self) -> Vec<Option<usize>> {
        let units = self.offsets.len();
        (0..units)
            .map(|j| {
                let row: Vec<f32> = (0..self.classes)
                    .map(|c| {
                        let n = self.class_counts[c];
                        if n > 0.0 {
                            (self.response[j * self.classes + c] / n) as f32
                        } else {
                            0.0
                        }
                    })
                    .collect();
                row.iter().any(|&v| v > 0.0).then(|| argmax(&row))
            })
            .collect()
    }

    fn clip_and_normalize(&self, w: &mut Tensor) {
        clip_and_normalize(&self.params, w);
    }
}

/// Clips into `[0, w_max]`, then rescales rows to `weight_sum` if set.
pub(crate) fn clip_and_normalize(p: &StdpParams, w: &mut Tensor) {
    let (units, inputs) = w.dims2().expect("dense weights");
    let data = w.data_mut();
    for v in data.iter_mut() {
        *v = v.clamp(0.0, p.w_max);
    }
    if let Some(target) = p.weight_sum {
        for j in 0..units {
            let row = &mut data[j * inputs..(j + 1) * inputs];
            let sum: f32 = row.iter().sum();
            if sum > 0.0 {
                let k = target / sum;
                for v in row.iter_mut() {
                    *v = (*v * k).min(p.w_max);
                }
            }
        }
    }
}

/// Maps the signed initial weights onto `[0, init_max)`, then clips and
/// normalises.
pub(crate) fn positive_init(p: &StdpParams, model: &mut Model) -> Result<()> {
    let k = 1.0 / (model.input_size() as f32).sqrt();
    let mut w = model.params()[0].clone();
    for v in w.data_mut() {
        *v = ((*v + k) / (2.0 * k)).clamp(0.0, 1.0) * p.init_max;
    }
    clip_and_normalize(p, &mut w);
    model.set_params(&[w])
}

impl Trainer for StdpTrainer {
    fn meta(&self) -> &TrainerMeta {
        &self.meta
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn prepare(&mut self, model: &mut Model) -> Result<()> {
        positive_init(&self.params, model)
    }

    fn step(&mut self, model: &Model, batch: &Batch) -> Result<TrainerUpdate> {
        let (wt, inputs, units) = single_layer(model)?;
        if self.offsets.len() != units {
            return Err(Error::Dimension("threshold offsets do not match the layer".into()));
        }
        let lif = *model.lif();
        let p = self.params;
        let mut acc = StdpAccumulator::new(units, inputs);
        self.peak_aux = self.peak_aux.max(acc.size_bytes() + 4 * units);
        let mut spikes = 0.0;
        for b in 0..batch.input.batch() {
            acc.reset_traces();
            let counts = simulate_sample(
                &wt,
                inputs,
                units,
                &lif,
                p.wta,
                &batch.input,
                b,
                Some((&mut self.offsets, p.theta_step, p.theta_decay, true)),
                |x, s| acc.observe(&p, self.lr, x, s),
            );
            spikes += counts.iter().sum::<f32>() as f64;
        }
        let w: &Tensor = model.params()[0];
        let mut target = w.clone();
        for (t, &d) in target.data_mut().iter_mut().zip(&acc.dw) {
            *t += d;
        }
        self.clip_and_normalize(&mut target);
        let delta = target.sub(w)?;
        Ok(TrainerUpdate::new(GradSet { grads: vec![delta] }).with("spikes", spikes))
    }

    fn post_apply(&mut self, model: &mut Model) -> Result<()> {
        let mut w = model.params()[0].clone();
        self.clip_and_normalize(&mut w);
        model.set_params(&[w])
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }

    fn needs_calibration(&self) -> bool {
        true
    }

    fn reset_calibration(&mut self) {
        self.response.fill(0.0);
        self.class_counts.fill(0.0);
    }

    fn calibrate(&mut self, model: &Model, batch: &Batch) -> Result<()> {
        let labels = batch.labels("stdp")?;
        let (wt, inputs, units) = single_layer(model)?;
        let lif = *model.lif();
        for (b, &y) in labels.iter().enumerate() {
            if y >= self.classes {
                return Err(Error::Argument(format!(
                    "label {y} out of range for {} classes",
                    self.classes
                )));
            }
            let mut off = self.offsets.clone();
            let counts = simulate_sample(
                &wt,
                inputs,
                units,
                &lif,
                self.params.wta,
                &batch.input,
                b,
                Some((&mut off, 0.0, 1.0, false)),
                |_, _| {},
            );
            for (j, &c) in counts.iter().enumerate() {
                self.response[j * self.classes + y] += c as f64;
            }
            self.class_counts[y] += 1.0;
        }
        Ok(())
    }

    fn predict(&self, model: &Model, input: &SpikeTrain) -> Result<Vec<usize>> {
        let (wt, inputs, units) = single_layer(model)?;
        let lif = *model.lif();
        let assign = self.assignments();
        let mut per_class = vec![0usize; self.classes];
        for c in assign.iter().flatten() {
            per_class[*c] += 1;
        }
        let mut out = Vec::with_capacity(input.batch());
        for b in 0..input.batch() {
            let mut off = self.offsets.clone();
            let counts = simulate_sample(
                &wt,
                inputs,
                units,
                &lif,
                self.params.wta,
                input,
                b,
                Some((&mut off, 0.0, 1.0, false)),
                |_, _| {},
            );
            let mut score = vec![0.0f32; self.classes];
            for (j, a) in assign.iter().enumerate() {
                if let Some(c) = a {
                    score[*c] += counts[j] / per_class[*c] as f32;
                }
            }
            out.push(argmax(&score));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(t: usize, at: &[usize]) -> Vec<Vec<f32>> {
        (0..t).map(|s| vec![if at.contains(&s) { 1.0 } else { 0.0 }]).collect()
    }

    fn pair_dw(p: &StdpParams, t_pre: usize, t_post: usize, t_max: usize) -> f32 {
        let pre = raster(t_max, &[t_pre]);
        let post = raster(t_max, &[t_post]);
        let mut acc = StdpAccumulator::new(1, 1);
        for t in 0..t_max {
            acc.observe(p, 1.0, &pre[t], &post[t]);
        }
        acc.dw[0]
    }

    #[test]
    fn potentiation_by_trace() {
        let p = StdpParams {
            pre_decay: 0.8,
            ..Default::default()
        };
        let dw = pair_dw(&p, 1, 3, 6);
        assert!((dw - p.a_plus * 0.8 * 0.8).abs() < 1e-9);
    }

    #[test]
    fn post_before_pre_depresses() {
        let p = StdpParams::default();
        let dw = pair_dw(&p, 4, 2, 6);
        assert!(dw < 0.0);
        assert!((dw + p.a_minus * p.post_decay * p.post_decay).abs() < 1e-9);
    }

    #[test]
    fn silence_is_threshold_decay_only() {
        let mut acc = StdpAccumulator::new(3, 4);
        let p = StdpParams::default();
        let mut offsets = vec![0.5f32; 3];
        let input = SpikeTrain::zeros(10, 1, 4);
        let lif = LifParams::default();
        let wt = vec![0.1f32; 12];
        let counts = simulate_sample(
            &wt,
            4,
            3,
            &lif,
            true,
            &input,
            0,
            Some((&mut offsets, p.theta_step, 0.9, true)),
            |x, s| acc.observe(&p, 1.0, x, s),
        );
        assert!(counts.iter().all(|&c| c == 0.0));
        assert!(acc.dw.iter().all(|&v| v == 0.0));
        for o in offsets {
            assert!((o - 0.5 * 0.9f32.powi(10)).abs() < 1e-6);
        }
    }

    #[test]
    fn wta_allows_one_spike_per_step() {
        let input = SpikeTrain::new(Tensor::full(&[20, 1, 4], 1.0)).unwrap();
        let wt = vec![1.0f32; 4 * 5];
        let mut max_per_step = 0.0f32;
        simulate_sample(&wt, 4, 5, &LifParams::default(), true, &input, 0, None, |_, s| {
            max_per_step = max_per_step.max(s.iter().sum());
        });
        assert_eq!(max_per_step, 1.0);
    }
}
