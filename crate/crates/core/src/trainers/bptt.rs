use super::common::check_labels;
use super::{count_correct, predict_counts, Batch, HyperReader, Trainer, TrainerMeta, TrainerUpdate};
use crate::bptt::{backward_with, loss_and_grad, BackwardOptions, LossKind, ResetGrad, Tape};
use crate::error::Result;
use crate::model::Model;
use crate::snn::{SurrogateFn, SurrogateKind};

pub(crate) fn read_surrogate(hp: &mut HyperReader) -> Result<SurrogateFn> {
    let kind = match hp
        .choice("surrogate", "fast_sigmoid", &["fast_sigmoid", "rectangular", "arctan"])?
        .as_str()
    {
        "rectangular" => SurrogateKind::Rectangular,
        "arctan" => SurrogateKind::Arctan,
        _ => SurrogateKind::FastSigmoid,
    };
    SurrogateFn::new(kind, hp.positive("surrogate_scale", 1.0)? as f32)
}

/// Surrogate-gradient backpropagation through time over the full sequence.
pub struct BpttTrainer {
    meta: TrainerMeta,
    pub lr: f32,
    pub loss: LossKind,
    pub options: BackwardOptions,
    peak_aux: usize,
}

impl BpttTrainer {
    pub fn new(meta: TrainerMeta, lr: f32, surrogate: SurrogateFn) -> Self {
        BpttTrainer {
            meta,
            lr,
            loss: LossKind::RateMse,
            options: BackwardOptions {
                surrogate,
                reset: ResetGrad::Detached,
            },
            peak_aux: 0,
        }
    }

    pub(crate) fn from_hyper(meta: TrainerMeta, hp: &mut HyperReader) -> Result<Self> {
        let lr = hp.num("lr", 1.0)? as f32;
        let surrogate = read_surrogate(hp)?;
        let mut t = BpttTrainer::new(meta, lr, surrogate);
        t.loss = match hp
            .choice("loss", "rate_mse", &["rate_mse", "count_crossentropy"])?
            .as_str()
        {
            "count_crossentropy" => LossKind::CountCrossentropy,
            _ => LossKind::RateMse,
        };
        Ok(t)
    }
}

impl Trainer for BpttTrainer {
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
        let labels = batch.labels("bptt")?;
        check_labels(labels, batch.input.batch(), model.output_size())?;
        let (out, tape) = Tape::record(model, &batch.input)?;
        self.peak_aux = self.peak_aux.max(tape.size_bytes());
        let (loss, lg) = loss_and_grad(&out, labels, self.loss)?;
        let grads = backward_with(model, &tape, &lg, &self.options)?;
        let correct = count_correct(&predict_counts(&out), labels);
        Ok(TrainerUpdate::new(grads.scale(-self.lr))
            .with("loss", loss)
            .with("correct", correct as f64)
            .with("tape_entries", tape.len() as f64))
    }

    fn aux_memory_bytes(&self) -> usize {
        self.peak_aux
    }
}
