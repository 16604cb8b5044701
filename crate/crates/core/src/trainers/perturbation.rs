use super::common::check_labels;
use super::{count_correct, predict_counts, Batch, HyperReader, Trainer, TrainerMeta, TrainerUpdate};
use crate::bptt::{loss_and_grad, GradSet, LossKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Antithetic weight-perturbation estimate. Draws `ξ ~ N(0, σ²)` per entry
/// of `params` (row-major, tensor by tensor), evaluates `loss` at `w ± ξ`
/// and returns `-lr · (L₊ - L₋)/(2σ) · ξ/σ` together with `(L₊, L₋)`.
pub fn perturbation_update(
    params: &[Tensor],
    sigma: f32,
    lr: f32,
    rng: &mut Rng,
    mut loss: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<(Vec<Tensor>, f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!(
            "perturbation sigma must be positive, got {sigma}"
        )));
    }
    let noise: Vec<Tensor> = params
        .iter()
        .map(|p| {
            let v = (0..p.len()).map(|_| sigma * rng.normal_f32()).collect();
            Tensor::new(p.shape().to_vec(), v)
        })
        .collect::<Result<_>>()?;
    let shifted = |sign: f32| -> Result<Vec<Tensor>> {
        params
            .iter()
            .zip(&noise)
            .map(|(p, n)| {
                let mut q = p.clone();
                q.axpy(sign, n)?;
                Ok(q)
            })
            .collect()
    };
    let plus = loss(&shifted(1.0)?)?;
    let minus = loss(&shifted(-1.0)?)?;
    let coeff = (-(lr as f64) * (plus - minus) / (2.0 * sigma as f64) / sigma as f64) as f32;
    let deltas = noise.iter().map(|n| n.scale(coeff)).collect();
    Ok((deltas, plus, minus))
}

/// Gradient-free training by correlating random weight noise with the
/// change in loss.
pub struct PerturbationTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub sigma: f32,
    rng: Rng,
    peak_aux: usize,
}

impl PerturbationTrainer {
    pub fn new(meta: TrainerMeta, lr: f32, sigma: f32, rng: Rng) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(PerturbationTrainer {
            meta,
            lr,
            sigma,
            rng,
            peak_aux: 0,
        })
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader, rng: &mut Rng) -> Result<Self> {
        let lr = hp.num("lr", 1e-3)? as f32;
        let sigma = hp.positive("sigma", 0.01)? as f32;
        PerturbationTrainer::new(meta, lr, sigma, rng.split(0x9e37))
    }
}

impl Trainer for PerturbationTrainer {
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
        let labels = batch.labels("perturbation")?;
        check_labels(labels, batch.input.batch(), model.output_size())?;
        let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
        self.peak_aux = self.peak_aux.max(params.iter().map(|p| p.size_bytes()).sum());
        let mut probe = model.clone();
        let (deltas, plus, minus) = perturbation_update(&params, self.sigma, self.lr, &mut self.rng, |w| {
            probe.set_params(w)?;
            let (out, _) = probe.forward(&batch.input)?;
            Ok(loss_and_grad(&out, labels, LossKind::RateMse)?.0)
        })?;
        // Structural zeros stay zero.
        let mut set = GradSet { grads: deltas };
        for (slot, layer) in model.param_slots().iter().zip(model.layers()) {
            if let Some(r) = slot.1 {
                let n = layer.units;
                for i in 0..n {
                    set.grads[r].data_mut()[i * n + i] = 0.0;
                }
            }
        }
        let (out, _) = model.forward(&batch.input)?;
        let correct = count_correct(&predict_counts(&out), labels);
        let mut u = TrainerUpdate::new(set)
            .with("loss", 0.5 * (plus + minus))
            .with("correct", correct as f64);
        u.modulator = Some(((plus - minus) / (2.0 * self.sigma as f64)) as f32);
        Ok(u)
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }
}
