//! Spatial backprop at each timestep with no time-to-time gradient.

use super::bptt::read_surrogate;
use super::common::{check_labels, membrane_delta, rate_mse, run_online, step_error, LayerTraces};
use super::{count_correct, predict_counts, Batch, HyperReader, Trainer, TrainerMeta, TrainerUpdate};
use crate::bptt::GradAccum;
use crate::error::{Error, Result};
use crate::model::{LayerRecord, Model};
use crate::snn::SurrogateFn;

/// Backpropagates the output error of one timestep through the stack.
/// `inputs[l]` is what layer `l`'s weight gradient correlates with.
pub(crate) fn spatial_backprop(
    model: &Model,
    surrogate: &SurrogateFn,
    recs: &[LayerRecord],
    err: Vec<f32>,
    inputs: &[(&[f32], Option<&[f32]>)],
    acc: &mut GradAccum,
    batch: usize,
) {
    let mut g = err;
    for l in (0..recs.len()).rev() {
        let d = membrane_delta(model, surrogate, &recs[l], &g);
        let below = acc.layer_backward(
            model,
            l,
            &d,
            inputs[l].0,
            inputs[l].1,
            recs[l].pool_index.as_deref(),
            batch,
            l > 0,
        );
        g = below.unwrap_or_default();
    }
}

fn online_step(
    model: &Model,
    batch: &Batch,
    name: &str,
    surrogate: &SurrogateFn,
    trace_decay: Option<f32>,
    selected: impl Fn(usize) -> bool,
    peak_aux: &mut usize,
) -> Result<(crate::bptt::GradSet, f64, usize)> {
    let labels = batch.labels(name)?;
    let classes = model.output_size();
    let bsz = batch.input.batch();
    check_labels(labels, bsz, classes)?;
    let t_max = batch.input.timesteps();
    let mut traces = trace_decay.map(|_| LayerTraces::for_model(model, bsz));
    if let Some(tr) = &traces {
        *peak_aux = (*peak_aux).max(LayerTraces::size_bytes(tr));
    }
    let mut acc = GradAccum::new(model);
    let output = run_online(model, &batch.input, |t, recs| {
        if let (Some(tr), Some(decay)) = (traces.as_mut(), trace_decay) {
            for (x, rec) in tr.iter_mut().zip(recs) {
                x.update(rec, decay);
            }
        }
        if !selected(t) {
            return Ok(());
        }
        let last = recs.last().expect("model has layers");
        let err = step_error(last.spikes.data(), labels, classes, t_max);
        let inputs: Vec<(&[f32], Option<&[f32]>)> = match &traces {
            Some(tr) => tr.iter().map(|x| (x.input.as_slice(), x.rec.as_deref())).collect(),
            None => recs
                .iter()
                .map(|r| (r.input.data(), r.rec_input.as_ref().map(|x| x.data())))
                .collect(),
        };
        spatial_backprop(model, surrogate, recs, err, &inputs, &mut acc, bsz);
        Ok(())
    })?;
    let grads = acc.finish()?;
    let correct = count_correct(&predict_counts(&output), labels);
    Ok((grads, rate_mse(&output, labels), correct))
}

/// Online training through time: instantaneous loss, presynaptic traces in
/// place of inputs.
pub struct OtttTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub surrogate: SurrogateFn,
    pub trace_decay: f32,
    peak_aux: usize,
}

impl OtttTrainer {
    pub fn new(meta: TrainerMeta, lr: f32, surrogate: SurrogateFn, trace_decay: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&trace_decay) {
            return Err(Error::Config(format!(
                "trace_decay must be in [0,1), got {trace_decay}"
            )));
        }
        Ok(OtttTrainer {
            meta,
            lr,
            surrogate,
            trace_decay,
            peak_aux: 0,
        })
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, model: &Model) -> Result<Self> {
        let lr = hp.num("lr", 1.0)? as f32;
        let surrogate = read_surrogate(hp)?;
        let decay = hp.unit("trace_decay", model.lif().beta as f64)? as f32;
        OtttTrainer::new(meta, lr, surrogate, decay)
    }
}

impl Trainer for OtttTrainer {
    fn meta(&self) -> &TrainerMeta {
        &self.meta
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn step(&mut self, model: &Model, batch: &Batch) -> Result<TrainerUpdate> {
        let (mut g, loss, correct) = online_step(
            model,
            batch,
            "ottt",
            &self.surrogate,
            Some(self.trace_decay),
            |_| true,
            &mut self.peak_aux,
        )?;
        g.scale_in_place(-self.lr);
        Ok(TrainerUpdate::new(g).with("loss", loss).with("correct", correct as f64))
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }
}

/// Spatial backprop with instantaneous inputs at `k` evenly spread timesteps.
pub struct SlttTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub surrogate: SurrogateFn,
    /// `None` uses every timestep.
    pub k: Option<usize>,
}

impl SlttTrainer {
    pub fn new(meta: TrainerMeta, lr: f32, surrogate: SurrogateFn, k: Option<usize>) -> Result<Self> {
        if k == Some(0) {
            return Err(Error::Config("sltt needs k >= 1 selected timesteps".into()));
        }
        Ok(SlttTrainer { meta, lr, surrogate, k })
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, _model: &Model) -> Result<Self> {
        let lr = hp.num("lr", 1.0)? as f32;
        let surrogate = read_surrogate(hp)?;
        let k = hp.opt_count("k")?;
        SlttTrainer::new(meta, lr, surrogate, k)
    }

    /// Timesteps that contribute for a sequence of length `t_max`.
    pub fn selected_steps(&self, t_max: usize) -> Result<Vec<usize>> {
        let k = self.k.unwrap_or(t_max);
        if k > t_max {
            return Err(Error::Config(format!("sltt k = {k} exceeds {t_max} timesteps")));
        }
        Ok((0..t_max).filter(|&t| (t + 1) * k / t_max > t * k / t_max).collect())
    }
}

impl Trainer for SlttTrainer {
    fn meta(&self) -> &TrainerMeta {
        &self.meta
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    fn step(&mut self, model: &Model, batch: &Batch) -> Result<TrainerUpdate> {
        let steps = self.selected_steps(batch.input.timesteps())?;
        let mut mask = vec![false; batch.input.timesteps()];
        for &t in &steps {
            mask[t] = true;
        }
        let mut unused = 0;
        let (mut g, loss, correct) =
            online_step(model, batch, "sltt", &self.surrogate, None, |t| mask[t], &mut unused)?;
        g.scale_in_place(-self.lr);
        Ok(TrainerUpdate::new(g)
            .with("loss", loss)
            .with("correct", correct as f64)
            .with("selected_steps", steps.len() as f64))
    }

    fn aux_memory_bytes(&self) -> usize {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainers::trainer_meta;

    #[test]
    fn sltt_selection() {
        let sg = SurrogateFn::default();
        let meta = trainer_meta("sltt").unwrap();
        let full = SlttTrainer::new(meta.clone(), 1.0, sg, None).unwrap();
        assert_eq!(full.selected_steps(5).unwrap(), vec![0, 1, 2, 3, 4]);
        let half = SlttTrainer::new(meta.clone(), 1.0, sg, Some(5)).unwrap();
        assert_eq!(half.selected_steps(10).unwrap(), vec![1, 3, 5, 7, 9]);
        let two = SlttTrainer::new(meta.clone(), 1.0, sg, Some(2)).unwrap();
        assert_eq!(two.selected_steps(10).unwrap().len(), 2);
        assert!(SlttTrainer::new(meta.clone(), 1.0, sg, Some(0)).is_err());
        let big = SlttTrainer::new(meta, 1.0, sg, Some(11)).unwrap();
        assert!(matches!(big.selected_steps(10), Err(Error::Config(_))));
    }
}
