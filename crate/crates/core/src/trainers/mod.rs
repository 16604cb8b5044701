//! Learning rules behind one interface, each tagged with its locality profile.

mod bptt;
mod common;
mod eprop;
mod feedback;
mod fit;
mod local_readout;
mod online;
mod perturbation;
mod rstdp;
mod stdp;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bptt::GradSet;
use crate::encoding::SpikeTrain;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, ModelSpec};
use crate::rng::Rng;
use crate::tensor::{argmax, Tensor};

pub use self::bptt::BpttTrainer;
pub use common::spike_counts;
pub use eprop::{EpropTrainer, LearningSignal};
pub use feedback::{DfaTrainer, DrtpTrainer, TargetNonlinearity};
pub use fit::{check_compatible, evaluate, fit, fit_with, EpochLog, FitConfig, FitHooks, LrSchedule, TrainingLog};
pub use local_readout::LocalReadoutTrainer;
pub use online::{OtttTrainer, SlttTrainer};
pub use perturbation::{perturbation_update, PerturbationTrainer};
pub use rstdp::{Bandit, BanditRun, RStdpTrainer};
pub use stdp::{StdpAccumulator, StdpParams, StdpTrainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Traces,
    Stdp,
    SpatialBpOnline,
    FeedbackAlignment,
    LocalReadout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Supervised,
    Unsupervised,
    Reinforcement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrainerMeta {
    pub name: &'static str,
    pub local_in_time: bool,
    /// Cells marked "partial" in the taxonomy are reported as `false`.
    pub local_in_space: bool,
    pub mechanisms: BTreeSet<Mechanism>,
    pub compatible_kinds: BTreeSet<ModelKind>,
    pub supervision: Supervision,
    /// Upper bound on hidden layers, where the rule only covers shallow nets.
    pub max_hidden_layers: Option<usize>,
}

impl TrainerMeta {
    /// `Err` names the violated constraint.
    pub fn check(&self, spec: &ModelSpec) -> std::result::Result<(), String> {
        if !self.compatible_kinds.contains(&spec.kind) {
            let kinds: Vec<&str> = self.compatible_kinds.iter().map(|k| k.as_str()).collect();
            return Err(format!(
                "trainer {} supports model kinds [{}], not {}",
                self.name,
                kinds.join(", "),
                spec.kind.as_str()
            ));
        }
        if let Some(max) = self.max_hidden_layers {
            if spec.hidden_layers() > max {
                return Err(format!(
                    "trainer {} supports at most {max} hidden layer(s), model has {}",
                    self.name,
                    spec.hidden_layers()
                ));
            }
        }
        Ok(())
    }

    pub fn ensure(&self, spec: &ModelSpec) -> Result<()> {
        self.check(spec).map_err(Error::Incompatible)
    }
}

pub const TRAINER_NAMES: [&str; 10] = [
    "bptt",
    "eprop",
    "ottt",
    "sltt",
    "dfa",
    "drtp",
    "local_readout",
    "stdp",
    "rstdp",
    "perturbation",
];

/// Static compatibility and locality table.
pub fn trainer_meta(name: &str) -> Result<TrainerMeta> {
    use Mechanism::*;
    use ModelKind::*;
    let set = |m: &[Mechanism]| m.iter().copied().collect::<BTreeSet<_>>();
    let kinds = |k: &[ModelKind]| k.iter().copied().collect::<BTreeSet<_>>();
    let meta = |name, time, space, mech: &[Mechanism], k: &[ModelKind], sup, max| TrainerMeta {
        name,
        local_in_time: time,
        local_in_space: space,
        mechanisms: set(mech),
        compatible_kinds: kinds(k),
        supervision: sup,
        max_hidden_layers: max,
    };
    let sup = Supervision::Supervised;
    Ok(match name {
        "bptt" => meta("bptt", false, false, &[], &[Fc, Rc, Conv], sup, None),
        "eprop" => meta("eprop", true, false, &[Traces], &[Fc, Rc], sup, Some(1)),
        "ottt" => meta(
            "ottt",
            true,
            false,
            &[Traces, SpatialBpOnline],
            &[Fc, Rc, Conv],
            sup,
            None,
        ),
        "sltt" => meta("sltt", true, false, &[SpatialBpOnline], &[Fc, Rc, Conv], sup, None),
        "dfa" => meta("dfa", true, false, &[Traces, FeedbackAlignment], &[Fc], sup, None),
        "drtp" => meta("drtp", true, true, &[Traces, FeedbackAlignment], &[Fc, Rc], sup, None),
        "local_readout" => meta("local_readout", true, true, &[Traces, LocalReadout], &[Fc], sup, None),
        "stdp" => meta(
            "stdp",
            true,
            true,
            &[Stdp, Traces],
            &[Fc],
            Supervision::Unsupervised,
            Some(0),
        ),
        "rstdp" => meta(
            "rstdp",
            true,
            true,
            &[Stdp, Traces],
            &[Fc],
            Supervision::Reinforcement,
            Some(0),
        ),
        "perturbation" => meta("perturbation", true, false, &[], &[Fc, Rc, Conv], sup, None),
        other => {
            return Err(Error::Config(format!(
                "unknown trainer `{other}`; expected one of {}",
                TRAINER_NAMES.join(", ")
            )))
        }
    })
}

/// One minibatch as the trainers see it.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: SpikeTrain,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(input: SpikeTrain, labels: Vec<usize>) -> Self {
        Batch {
            input,
            labels: Some(labels),
        }
    }

    pub fn unlabeled(input: SpikeTrain) -> Self {
        Batch { input, labels: None }
    }

    pub fn labels(&self, trainer: &str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Argument(format!("trainer {trainer} needs labeled batches")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerUpdate {
    pub deltas: GradSet,
    pub modulator: Option<f32>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl TrainerUpdate {
    pub fn new(deltas: GradSet) -> Self {
        TrainerUpdate {
            deltas,
            modulator: None,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn diagnostic(&self, key: &str) -> Option<f64> {
        self.diagnostics.get(key).copied()
    }
}

pub trait Trainer {
    fn meta(&self) -> &TrainerMeta;

    fn lr(&self) -> f32;

    fn set_lr(&mut self, lr: f32);

    /// Observes one batch and proposes weight changes; does not mutate the model.
    fn step(&mut self, model: &Model, batch: &Batch) -> Result<TrainerUpdate>;

    /// Called once before training.
    fn prepare(&mut self, _model: &mut Model) -> Result<()> {
        Ok(())
    }

    /// Called after each update has been applied.
    fn post_apply(&mut self, _model: &mut Model) -> Result<()> {
        Ok(())
    }

    /// Largest auxiliary buffer footprint (traces, tapes, eligibilities) seen
    /// by any step so far.
    fn aux_memory_bytes(&self) -> usize;

    /// Rules whose outputs carry no class identity by themselves label their
    /// neurons from data before evaluation.
    fn needs_calibration(&self) -> bool {
        false
    }

    fn reset_calibration(&mut self) {}

    fn calibrate(&mut self, _model: &Model, _batch: &Batch) -> Result<()> {
        Ok(())
    }

    /// Default readout: the output unit with most spikes, lowest index on ties.
    fn predict(&self, model: &Model, input: &SpikeTrain) -> Result<Vec<usize>> {
        let (out, _) = model.forward(input)?;
        Ok(predict_counts(&out))
    }
}

/// Argmax over accumulated spike counts of an output record `[T × batch × out]`.
pub fn predict_counts(output: &Tensor) -> Vec<usize> {
    let counts = spike_counts(output);
    let classes = output.shape()[2];
    counts.chunks(classes).map(argmax).collect()
}

pub fn count_correct(predictions: &[usize], labels: &[usize]) -> usize {
    predictions.iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// A hyperparameter value: numeric for ranges, text for categorical options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Num(f64),
    Text(String),
}

pub type Hyperparams = BTreeMap<String, HyperValue>;

/// Reads a trainer's hyperparameters and rejects keys nobody asked for.
pub(crate) struct HyperReader<'a> {
    trainer: &'a str,
    params: &'a Hyperparams,
    used: BTreeSet<String>,
}

impl<'a> HyperReader<'a> {
    pub(crate) fn new(trainer: &'a str, params: &'a Hyperparams) -> Self {
        HyperReader {
            trainer,
            params,
            used: BTreeSet::new(),
        }
    }

    pub(crate) fn num(&mut self, key: &str, default: f64) -> Result<f64> {
        self.used.insert(key.to_string());
        match self.params.get(key) {
            None => Ok(default),
            Some(HyperValue::Num(v)) if v.is_finite() => Ok(*v),
            Some(other) => Err(Error::Config(format!(
                "trainer {}: hyperparameter `{key}` must be a finite number, got {other:?}",
                self.trainer
            ))),
        }
    }

    pub(crate) fn positive(&mut self, key: &str, default: f64) -> Result<f64> {
        let v = self.num(key, default)?;
        if v <= 0.0 {
            return Err(Error::Config(format!(
                "trainer {}: `{key}` must be positive, got {v}",
                self.trainer
            )));
        }
        Ok(v)
    }

    pub(crate) fn unit(&mut self, key: &str, default: f64) -> Result<f64> {
        let v = self.num(key, default)?;
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!(
                "trainer {}: `{key}` must be in [0,1), got {v}",
                self.trainer
            )));
        }
        Ok(v)
    }

    pub(crate) fn count(&mut self, key: &str, default: usize) -> Result<usize> {
        let v = self.num(key, default as f64)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Config(format!(
                "trainer {}: `{key}` must be a non-negative integer, got {v}",
                self.trainer
            )));
        }
        Ok(v as usize)
    }

    pub(crate) fn opt_count(&mut self, key: &str) -> Result<Option<usize>> {
        if self.params.contains_key(key) {
            self.count(key, 0).map(Some)
        } else {
            self.used.insert(key.to_string());
            Ok(None)
        }
    }

    pub(crate) fn choice(&mut self, key: &str, default: &str, allowed: &[&str]) -> Result<String> {
        self.used.insert(key.to_string());
        let v = match self.params.get(key) {
            None => default.to_string(),
            Some(HyperValue::Text(s)) => s.clone(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "trainer {}: `{key}` must be one of {allowed:?}, got {other:?}",
                    self.trainer
                )))
            }
        };
        if !allowed.contains(&v.as_str()) {
            return Err(Error::Config(format!(
                "trainer {}: `{key}` must be one of {allowed:?}, got `{v}`",
                self.trainer
            )));
        }
        Ok(v)
    }

    pub(crate) fn finish(self) -> Result<()> {
        for k in self.params.keys() {
            if !self.used.contains(k) {
                let mut known: Vec<&str> = self.used.iter().map(|s| s.as_str()).collect();
                known.sort();
                return Err(Error::Config(format!(
                    "trainer {}: unknown hyperparameter `{k}` (accepted: {})",
                    self.trainer,
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// Plain SGD on precomputed deltas, with optional momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    velocity: Option<Vec<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(Sgd {
            momentum,
            velocity: None,
        })
    }

    pub fn apply(&mut self, model: &mut Model, update: &TrainerUpdate) -> Result<()> {
        update.deltas.check_shapes(model)?;
        if self.momentum == 0.0 {
            return model.apply_deltas(&update.deltas.grads);
        }
        let v = self.velocity.get_or_insert_with(|| model.zero_like_params());
        for (vel, d) in v.iter_mut().zip(&update.deltas.grads) {
            for (a, &b) in vel.data_mut().iter_mut().zip(d.data()) {
                *a = self.momentum * *a + b;
            }
        }
        model.apply_deltas(v)
    }
}

/// Trainer name plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSpec {
    pub name: String,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

impl TrainerSpec {
    pub fn new(name: &str) -> Self {
        TrainerSpec {
            name: name.to_string(),
            hyperparams: Hyperparams::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.hyperparams.insert(key.to_string(), HyperValue::Num(value));
        self
    }

    pub fn with_text(mut self, key: &str, value: &str) -> Self {
        self.hyperparams
            .insert(key.to_string(), HyperValue::Text(value.to_string()));
        self
    }
}

/// Instantiates a trainer for `model`. Random state (projection matrices,
/// perturbation noise) is drawn from `rng`. Also returns the optimizer the
/// `momentum` hyperparameter asks for.
pub fn build_trainer(spec: &TrainerSpec, model: &Model, rng: &mut Rng) -> Result<(Box<dyn Trainer>, Sgd)> {
    let meta = trainer_meta(&spec.name)?;
    meta.ensure(model.spec())?;
    let mut hp = HyperReader::new(&spec.name, &spec.hyperparams);
    let momentum = hp.unit("momentum", 0.0)? as f32;
    let trainer: Box<dyn Trainer> = match spec.name.as_str() {
        "bptt" => Box::new(BpttTrainer::from_hyper(meta, &mut hp)?),
        "eprop" => Box::new(EpropTrainer::from_hyper(meta, &mut hp, model, rng)?),
        "ottt" => Box::new(OtttTrainer::from_hyper(meta, &mut hp, model)?),
        "sltt" => Box::new(SlttTrainer::from_hyper(meta, &mut hp, model)?),
        "dfa" => Box::new(DfaTrainer::from_hyper(meta, &mut hp, model, rng)?),
        "drtp" => Box::new(DrtpTrainer::from_hyper(meta, &mut hp, model, rng)?),
        "local_readout" => Box::new(LocalReadoutTrainer::from_hyper(meta, &mut hp, model, rng)?),
        "stdp" => Box::new(StdpTrainer::from_hyper(meta, &mut hp, model)?),
        "rstdp" => Box::new(RStdpTrainer::from_hyper(meta, &mut hp, model, rng)?),
        "perturbation" => Box::new(PerturbationTrainer::from_hyper(meta, &mut hp, rng)?),
        _ => unreachable!("trainer_meta accepted the name"),
    };
    hp.finish()?;
    Ok((trainer, Sgd::new(momentum)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_table() {
        let eprop = trainer_meta("eprop").unwrap();
        assert!(eprop.local_in_time && !eprop.local_in_space);
        assert!(eprop.mechanisms.contains(&Mechanism::Traces));
        let bptt = trainer_meta("bptt").unwrap();
        assert!(!bptt.local_in_time && !bptt.local_in_space);
        let drtp = trainer_meta("drtp").unwrap();
        assert!(drtp.local_in_time && drtp.local_in_space);
        assert!(trainer_meta("nope").is_err());
        for n in TRAINER_NAMES {
            assert_eq!(trainer_meta(n).unwrap().name, n);
        }
    }

    #[test]
    fn incompatibilities() {
        let conv = ModelSpec::conv([1, 28, 28], 10);
        assert!(trainer_meta("stdp").unwrap().check(&conv).is_err());
        assert!(trainer_meta("eprop").unwrap().check(&conv).is_err());
        assert!(trainer_meta("bptt").unwrap().check(&conv).is_ok());
        let deep = ModelSpec::fc(&[784, 100, 10]);
        let msg = trainer_meta("stdp").unwrap().check(&deep).unwrap_err();
        assert!(msg.contains("hidden"), "{msg}");
    }

    #[test]
    fn unknown_hyperparameter() {
        let mut rng = Rng::new(0);
        let m = Model::build(ModelSpec::fc(&[4, 2]), &mut rng).unwrap();
        let spec = TrainerSpec::new("bptt").with("lr", 0.1).with("bogus", 1.0);
        let err = build_trainer(&spec, &m, &mut rng).err().unwrap();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn sgd_momentum() {
        let mut rng = Rng::new(0);
        let mut m = Model::build(ModelSpec::fc(&[1, 1]), &mut rng).unwrap();
        let w0 = m.params()[0].data()[0];
        let mut sgd = Sgd::new(0.5).unwrap();
        let d = GradSet {
            grads: vec![Tensor::full(&[1, 1], 1.0)],
        };
        let u = TrainerUpdate::new(d);
        sgd.apply(&mut m, &u).unwrap();
        sgd.apply(&mut m, &u).unwrap();
        assert!((m.params()[0].data()[0] - (w0 + 1.0 + 1.5)).abs() < 1e-6);
    }
}
