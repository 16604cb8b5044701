use super::bptt::read_surrogate;
use super::common::{check_labels, membrane_delta, rate_mse, run_online, step_error, LayerTraces};
use super::{count_correct, predict_counts, Batch, HyperReader, Trainer, TrainerMeta, TrainerUpdate};
use crate::bptt::GradAccum;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::snn::SurrogateFn;
use crate::tensor::{gemm_acc, rand_uniform, Tensor};

/// Layer-wise losses through fixed random readouts. Hidden layer `l` sees
/// only the error of its own readout `R^l [classes × units]`; the output
/// layer reads itself out directly. No error crosses layers.
pub struct LocalReadoutTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub surrogate: SurrogateFn,
    readouts: Vec<Tensor>,
    peak_aux: usize,
}

impl LocalReadoutTrainer {
    pub fn new(meta: TrainerMeta, lr: f32, surrogate: SurrogateFn, readouts: Vec<Tensor>) -> Self {
        LocalReadoutTrainer {
            meta,
            lr,
            surrogate,
            readouts,
            peak_aux: 0,
        }
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, model: &Model, rng: &mut Rng) -> Result<Self> {
        let lr = hp.num("lr", 1.0)? as f32;
        let surrogate = read_surrogate(hp)?;
        let scale = hp.positive("readout_scale", 1.0)? as f32;
        let classes = model.output_size();
        let layers = model.layers();
        let readouts = layers[..layers.len() - 1]
            .iter()
            .map(|l| {
                let k = scale / (l.units as f32).sqrt();
                rand_uniform(rng, &[classes, l.units], -k, k)
            })
            .collect::<Result<_>>()?;
        Ok(LocalReadoutTrainer::new(meta, lr, surrogate, readouts))
    }

    pub fn readouts(&self) -> &[Tensor] {
        &self.readouts
    }
}

impl Trainer for LocalReadoutTrainer {
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
        let labels = batch.labels("local_readout")?;
        let classes = model.output_size();
        let bsz = batch.input.batch();
        check_labels(labels, bsz, classes)?;
        let layers = model.layers();
        let n_layers = layers.len();
        if self.readouts.len() != n_layers - 1 {
            return Err(Error::Dimension(format!(
                "{} readouts for {} hidden layers",
                self.readouts.len(),
                n_layers - 1
            )));
        }
        let readouts_t: Vec<Tensor> = self.readouts.iter().map(|r| r.transpose()).collect::<Result<_>>()?;
        for (r, l) in self.readouts.iter().zip(layers) {
            if r.shape() != [classes, l.units] {
                return Err(Error::Dimension(format!(
                    "readout {:?} does not fit a layer of {} units",
                    r.shape(),
                    l.units
                )));
            }
        }
        let t_max = batch.input.timesteps();
        let beta = model.lif().beta;
        let mut traces = LayerTraces::for_model(model, bsz);
        self.peak_aux = self.peak_aux.max(LayerTraces::size_bytes(&traces));
        let mut acc = GradAccum::new(model);
        let output = run_online(model, &batch.input, |_, recs| {
            for (tr, rec) in traces.iter_mut().zip(recs) {
                tr.update(rec, beta);
            }
            for l in 0..n_layers {
                let g = if l + 1 == n_layers {
                    step_error(recs[l].spikes.data(), labels, classes, t_max)
                } else {
                    let units = layers[l].units;
                    let mut scores = vec![0.0f32; bsz * classes];
                    gemm_acc(
                        recs[l].spikes.data(),
                        bsz,
                        units,
                        readouts_t[l].data(),
                        classes,
                        &mut scores,
                    );
                    let e = step_error(&scores, labels, classes, t_max);
                    let mut g = vec![0.0f32; bsz * units];
                    gemm_acc(&e, bsz, classes, self.readouts[l].data(), units, &mut g);
                    g
                };
                let d = membrane_delta(model, &self.surrogate, &recs[l], &g);
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
        let mut g = acc.finish()?;
        g.scale_in_place(-self.lr);
        let correct = count_correct(&predict_counts(&output), labels);
        Ok(TrainerUpdate::new(g)
            .with("loss", rate_mse(&output, labels))
            .with("correct", correct as f64))
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }
}
