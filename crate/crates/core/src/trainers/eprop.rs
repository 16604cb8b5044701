use super::bptt::read_surrogate;
use super::common::{check_labels, membrane_delta, rate_mse, run_online, step_error, LayerTraces};
use super::{count_correct, predict_counts, Batch, HyperReader, Trainer, TrainerMeta, TrainerUpdate};
use crate::bptt::GradAccum;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::snn::SurrogateFn;
use crate::tensor::{gemm_acc, rand_uniform, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum LearningSignal {
    /// Output deltas sent back through the transposed output weights.
    Symmetric,
    /// Output deltas sent through a fixed random `[hidden × out]` matrix.
    Broadcast(Tensor),
}

/// Eligibility traces times a learning signal, for nets with at most one
/// hidden layer. Eligibility `e_ji[t] = σ'(U_j[t] - θ) x̄_i[t]` is never
/// materialised; its product with `L_j[t]` is accumulated directly.
pub struct EpropTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub surrogate: SurrogateFn,
    pub signal: LearningSignal,
    peak_aux: usize,
}

impl EpropTrainer {
    pub fn new(meta: TrainerMeta, lr: f32, surrogate: SurrogateFn, signal: LearningSignal) -> Self {
        EpropTrainer {
            meta,
            lr,
            surrogate,
            signal,
            peak_aux: 0,
        }
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, model: &Model, rng: &mut Rng) -> Result<Self> {
        let lr = hp.num("lr", 1.0)? as f32;
        let surrogate = read_surrogate(hp)?;
        let signal = match hp.choice("signal", "symmetric", &["symmetric", "broadcast"])?.as_str() {
            "broadcast" => {
                let layers = model.layers();
                if layers.len() < 2 {
                    LearningSignal::Symmetric
                } else {
                    let out = model.output_size();
                    let k = 1.0 / (out as f32).sqrt();
                    LearningSignal::Broadcast(rand_uniform(rng, &[layers[0].units, out], -k, k)?)
                }
            }
            _ => LearningSignal::Symmetric,
        };
        Ok(EpropTrainer::new(meta, lr, surrogate, signal))
    }
}

impl Trainer for EpropTrainer {
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
        let labels = batch.labels("eprop")?;
        let n_layers = model.layers().len();
        let classes = model.output_size();
        let bsz = batch.input.batch();
        check_labels(labels, bsz, classes)?;
        let t_max = batch.input.timesteps();
        let beta = model.lif().beta;
        let mut traces = LayerTraces::for_model(model, bsz);
        self.peak_aux = self.peak_aux.max(LayerTraces::size_bytes(&traces));
        let mut acc = GradAccum::new(model);
        let out_l = n_layers - 1;
        let broadcast_t = match &self.signal {
            LearningSignal::Broadcast(b) => {
                if n_layers < 2 || b.shape() != [model.layers()[0].units, classes] {
                    return Err(Error::Dimension(format!(
                        "broadcast matrix {:?} does not fit the model",
                        b.shape()
                    )));
                }
                Some(b.transpose()?)
            }
            LearningSignal::Symmetric => None,
        };
        let output = run_online(model, &batch.input, |_, recs| {
            for (tr, rec) in traces.iter_mut().zip(recs) {
                tr.update(rec, beta);
            }
            let out_rec = &recs[out_l];
            let err = step_error(out_rec.spikes.data(), labels, classes, t_max);
            let d_out = membrane_delta(model, &self.surrogate, out_rec, &err);
            let symmetric = acc.layer_backward(
                model,
                out_l,
                &d_out,
                &traces[out_l].input,
                traces[out_l].rec.as_deref(),
                None,
                bsz,
                n_layers > 1 && broadcast_t.is_none(),
            );
            if n_layers > 1 {
                let h = model.layers()[0].units;
                let signal = match &broadcast_t {
                    Some(bt) => {
                        let mut l = vec![0.0f32; bsz * h];
                        gemm_acc(&d_out, bsz, classes, bt.data(), h, &mut l);
                        l
                    }
                    None => symmetric.expect("requested input gradient"),
                };
                let d_h = membrane_delta(model, &self.surrogate, &recs[0], &signal);
                acc.layer_backward(
                    model,
                    0,
                    &d_h,
                    &traces[0].input,
                    traces[0].rec.as_deref(),
                    None,
                    bsz,
                    false,
                );
            }
            Ok(())
        })?;
        let mut deltas = acc.finish()?;
        deltas.scale_in_place(-self.lr);
        let correct = count_correct(&predict_counts(&output), labels);
        Ok(TrainerUpdate::new(deltas)
            .with("loss", rate_mse(&output, labels))
            .with("correct", correct as f64))
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }
}
