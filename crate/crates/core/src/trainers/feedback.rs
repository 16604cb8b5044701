//! Fixed random feedback: output error (DFA) or target (DRTP) projected
//! straight to each hidden layer.

use super::bptt::read_surrogate;
use super::common::{check_labels, membrane_delta, rate_mse, run_online, step_error, LayerTraces};
use super::{count_correct, predict_counts, Batch, HyperReader, Trainer, TrainerMeta, TrainerUpdate};
use crate::bptt::{GradAccum, GradSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::snn::SurrogateFn;
use crate::tensor::{gemm_acc, rand_uniform, Tensor};

/// One `[units × out]` matrix per hidden layer, uniform in `±1/sqrt(out)`.
fn draw_projections(model: &Model, rng: &mut Rng) -> Result<Vec<Tensor>> {
    let out = model.output_size();
    let k = 1.0 / (out as f32).sqrt();
    let layers = model.layers();
    layers[..layers.len() - 1]
        .iter()
        .map(|l| rand_uniform(rng, &[l.units, out], -k, k))
        .collect()
}

fn check_projections(model: &Model, projections: &[Tensor]) -> Result<()> {
    let layers = model.layers();
    if projections.len() != layers.len() - 1 {
        return Err(Error::Dimension(format!(
            "{} feedback projections for {} hidden layers",
            projections.len(),
            layers.len() - 1
        )));
    }
    for (b, l) in projections.iter().zip(layers) {
        if b.shape() != [l.units, model.output_size()] {
            return Err(Error::Dimension(format!(
                "feedback projection {:?} does not fit a layer of {} units",
                b.shape(),
                l.units
            )));
        }
    }
    Ok(())
}

/// `rows [batch × out] · Bᵀ` for `B [units × out]`.
fn project(rows: &[f32], batch: usize, b: &Tensor) -> Result<Vec<f32>> {
    let (units, out) = b.dims2()?;
    let bt = b.transpose()?;
    let mut g = vec![0.0f32; batch * units];
    gemm_acc(rows, batch, out, bt.data(), units, &mut g);
    Ok(g)
}

/// Runs the shared loop: output delta rule on traces plus, per hidden layer,
/// `(g^l ⊙ σ') x̄`. `signal(l, delta_out)` yields the hidden teaching signal.
fn projected_step(
    model: &Model,
    batch: &Batch,
    name: &str,
    surrogate: &SurrogateFn,
    mut signal: impl FnMut(usize, &[f32]) -> Vec<f32>,
    peak_aux: &mut usize,
) -> Result<(GradSet, f64, usize)> {
    let labels = batch.labels(name)?;
    let classes = model.output_size();
    let bsz = batch.input.batch();
    check_labels(labels, bsz, classes)?;
    let t_max = batch.input.timesteps();
    let beta = model.lif().beta;
    let n_layers = model.layers().len();
    let mut traces = LayerTraces::for_model(model, bsz);
    *peak_aux = (*peak_aux).max(LayerTraces::size_bytes(&traces));
    let mut acc = GradAccum::new(model);
    let output = run_online(model, &batch.input, |_, recs| {
        for (tr, rec) in traces.iter_mut().zip(recs) {
            tr.update(rec, beta);
        }
        let out_l = n_layers - 1;
        let err = step_error(recs[out_l].spikes.data(), labels, classes, t_max);
        let d_out = membrane_delta(model, surrogate, &recs[out_l], &err);
        acc.layer_backward(model, out_l, &d_out, &traces[out_l].input, None, None, bsz, false);
        for l in 0..out_l {
            let g = signal(l, &d_out);
            let d = membrane_delta(model, surrogate, &recs[l], &g);
            acc.layer_backward(
                model,
                l,
                &d,
                &traces[l].input,
                traces[l].rec.as_deref(),
                None,
                bsz,
                false,
            );
        }
        Ok(())
    })?;
    let grads = acc.finish()?;
    let correct = count_correct(&predict_counts(&output), labels);
    Ok((grads, rate_mse(&output, labels), correct))
}

/// Direct feedback alignment: the output delta of each timestep reaches
/// hidden layer `l` through fixed `B^l`.
pub struct DfaTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub surrogate: SurrogateFn,
    projections: Vec<Tensor>,
    peak_aux: usize,
}

impl DfaTrainer {
    pub fn new(meta: TrainerMeta, lr: f32, surrogate: SurrogateFn, projections: Vec<Tensor>) -> Self {
        DfaTrainer {
            meta,
            lr,
            surrogate,
            projections,
            peak_aux: 0,
        }
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, model: &Model, rng: &mut Rng) -> Result<Self> {
        let lr = hp.num("lr", 1.0)? as f32;
        let surrogate = read_surrogate(hp)?;
        Ok(DfaTrainer::new(meta, lr, surrogate, draw_projections(model, rng)?))
    }

    pub fn projections(&self) -> &[Tensor] {
        &self.projections
    }

    pub fn set_projections(&mut self, projections: Vec<Tensor>) {
        self.projections = projections;
    }
}

impl Trainer for DfaTrainer {
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
        self.meta.ensure(model.spec())?;
        check_projections(model, &self.projections)?;
        let bsz = batch.input.batch();
        let bts: Vec<Tensor> = self.projections.iter().map(|b| b.transpose()).collect::<Result<_>>()?;
        let classes = model.output_size();
        let (mut g, loss, correct) = projected_step(
            model,
            batch,
            "dfa",
            &self.surrogate,
            |l, d_out| {
                let units = bts[l].shape()[1];
                let mut g = vec![0.0f32; bsz * units];
                gemm_acc(d_out, bsz, classes, bts[l].data(), units, &mut g);
                g
            },
            &mut self.peak_aux,
        )?;
        g.scale_in_place(-self.lr);
        Ok(TrainerUpdate::new(g).with("loss", loss).with("correct", correct as f64))
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetNonlinearity {
    Identity,
    Sign,
    Tanh,
}

impl TargetNonlinearity {
    pub fn apply(&self, v: f32) -> f32 {
        match self {
            TargetNonlinearity::Identity => v,
            TargetNonlinearity::Sign => {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            TargetNonlinearity::Tanh => v.tanh(),
        }
    }
}

/// Direct random target projection: hidden teaching signals depend on the
/// one-hot target only, so they exist before the forward pass.
pub struct DrtpTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub surrogate: SurrogateFn,
    pub nonlinearity: TargetNonlinearity,
    projections: Vec<Tensor>,
    peak_aux: usize,
}

impl DrtpTrainer {
    pub fn new(
        meta: TrainerMeta,
        lr: f32,
        surrogate: SurrogateFn,
        nonlinearity: TargetNonlinearity,
        projections: Vec<Tensor>,
    ) -> Self {
        DrtpTrainer {
            meta,
            lr,
            surrogate,
            nonlinearity,
            projections,
            peak_aux: 0,
        }
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, model: &Model, rng: &mut Rng) -> Result<Self> {
        let lr = hp.num("lr", 1.0)? as f32;
        let surrogate = read_surrogate(hp)?;
        let f = match hp
            .choice("target_fn", "identity", &["identity", "sign", "tanh"])?
            .as_str()
        {
            "sign" => TargetNonlinearity::Sign,
            "tanh" => TargetNonlinearity::Tanh,
            _ => TargetNonlinearity::Identity,
        };
        Ok(DrtpTrainer::new(meta, lr, surrogate, f, draw_projections(model, rng)?))
    }

    pub fn projections(&self) -> &[Tensor] {
        &self.projections
    }

    pub fn set_projections(&mut self, projections: Vec<Tensor>) {
        self.projections = projections;
    }

    /// `f(B^l y*)` for each hidden layer, `[batch × units]`.
    pub fn teaching_signals(&self, labels: &[usize], classes: usize) -> Result<Vec<Tensor>> {
        let batch = labels.len();
        let mut onehot = vec![0.0f32; batch * classes];
        for (b, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::Argument(format!("label {y} out of range for {classes} outputs")));
            }
            onehot[b * classes + y] = 1.0;
        }
        self.projections
            .iter()
            .map(|b| {
                let g = project(&onehot, batch, b)?;
                Tensor::new(
                    vec![batch, b.shape()[0]],
                    g.into_iter().map(|v| self.nonlinearity.apply(v)).collect(),
                )
            })
            .collect()
    }
}

impl Trainer for DrtpTrainer {
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
        self.meta.ensure(model.spec())?;
        check_projections(model, &self.projections)?;
        let labels = batch.labels("drtp")?;
        let signals = self.teaching_signals(labels, model.output_size())?;
        let norm = 1.0 / (batch.input.timesteps() * batch.input.batch()) as f32;
        let scaled: Vec<Vec<f32>> = signals
            .iter()
            .map(|s| s.data().iter().map(|v| v * norm).collect())
            .collect();
        let (mut g, loss, correct) = projected_step(
            model,
            batch,
            "drtp",
            &self.surrogate,
            |l, _| scaled[l].clone(),
            &mut self.peak_aux,
        )?;
        g.scale_in_place(-self.lr);
        Ok(TrainerUpdate::new(g).with("loss", loss).with("correct", correct as f64))
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }
}
