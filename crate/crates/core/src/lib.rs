//! Spiking neural network training with local learning rules and a
//! benchmarking harness.

pub mod bptt;
pub mod campaign;
pub mod data;
pub mod encoding;
pub mod error;
pub mod model;
pub mod rng;
pub mod snn;
pub mod tensor;
pub mod trainers;

pub use bptt::{backward, loss_and_grad, GradSet, LossKind, Tape, TapeEntry};
pub use campaign::{
    generate_cells, report_matrix, run_campaign, run_custom, sample_hyperparams, CampaignSpec, CustomSpec,
    ExperimentRecord, MatrixReport, Status,
};
pub use data::{load_dataset, resolve_data_dir, synth_patterns, Dataset, DatasetSpec, Split, SynthSpec};
pub use encoding::{encode, EncoderKind, EncoderSpec, SpikeTrain};
pub use error::{Error, Result};
pub use model::{spike_sparsity, Model, ModelKind, ModelSpec, ModelState};
pub use rng::Rng;
pub use snn::{LifParams, NeuronState, ResetMode, SurrogateFn, SurrogateKind};
pub use tensor::Tensor;
pub use trainers::{
    build_trainer, fit, trainer_meta, Batch, FitConfig, Sgd, Trainer, TrainerMeta, TrainerSpec, TrainerUpdate,
    TrainingLog,
};
