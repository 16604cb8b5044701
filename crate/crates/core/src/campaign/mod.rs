//! Orthogonal experiment campaigns: every trainer × model × dataset cell,
//! filtered for compatibility, tuned by random search and run on a bounded
//! worker pool.

mod report;
mod search;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::{report_matrix, MatrixCell, MatrixReport, METRICS};
pub use search::{default_search_space, sample_hyperparams, ParamRange, SearchSpace};

use crate::data::{load_dataset, Dataset, DatasetSpec};
use crate::encoding::{EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::model::{spike_sparsity, Model, ModelSpec};
use crate::rng::Rng;
use crate::trainers::{
    build_trainer, fit_with, trainer_meta, EpochLog, FitConfig, FitHooks, Hyperparams, LrSchedule, Supervision,
    TrainerSpec, TrainingLog,
};

/// Results-file schema version.
pub const RECORD_VERSION: u32 = 1;

/// Training settings shared by every experiment of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Caps on the train and test splits.
    #[serde(default)]
    pub max_train: Option<usize>,
    #[serde(default)]
    pub max_test: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_train_eval")]
    pub train_eval_samples: usize,
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
}

fn default_batch() -> usize {
    16
}
fn default_encoder() -> EncoderSpec {
    EncoderSpec {
        kind: EncoderKind::PoissonRate,
        timesteps: 25,
        max_rate: 1.0,
    }
}
fn default_eval_batch() -> usize {
    256
}
fn default_train_eval() -> usize {
    2000
}
fn default_calibration() -> usize {
    10_000
}
fn default_one() -> usize {
    1
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: default_batch(),
            encoder: default_encoder(),
            lr_schedule: LrSchedule::Constant,
            max_train: None,
            max_test: None,
            eval_batch_size: default_eval_batch(),
            train_eval_samples: default_train_eval(),
            calibration_samples: default_calibration(),
        }
    }
}

impl TrainingConfig {
    pub fn fit_config(&self, epochs: usize, seed: u64) -> FitConfig {
        FitConfig {
            epochs,
            batch_size: self.batch_size,
            encoder: self.encoder,
            lr_schedule: self.lr_schedule,
            seed,
            eval_batch_size: self.eval_batch_size,
            train_eval_samples: self.train_eval_samples,
            calibration_samples: self.calibration_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub trainers: Vec<String>,
    pub models: Vec<ModelSpec>,
    pub datasets: Vec<DatasetSpec>,
    pub epochs: usize,
    #[serde(default = "default_one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Per-trainer ranges; trainers without an entry search their default lr range.
    #[serde(default)]
    pub search_space: BTreeMap<String, SearchSpace>,
    /// Fixed per-trainer hyperparameters, overridden by sampled ones.
    #[serde(default)]
    pub hyperparams: BTreeMap<String, Hyperparams>,
    #[serde(default = "default_one")]
    pub parallelism: usize,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl CampaignSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        for t in &self.trainers {
            trainer_meta(t)?;
        }
        for key in self.search_space.keys().chain(self.hyperparams.keys()) {
            if !self.trainers.contains(key) {
                return Err(Error::Config(format!(
                    "settings given for trainer `{key}` that is not in the campaign"
                )));
            }
        }
        for (t, space) in &self.search_space {
            if space.is_empty() {
                return Err(Error::Config(format!("search_space.{t} is empty")));
            }
            for (k, r) in space {
                r.validate(&format!("search_space.{t}.{k}"))?;
            }
        }
        let mut names = BTreeMap::new();
        for m in &self.models {
            m.validate()?;
            if names.insert(m.display_name(), ()).is_some() {
                return Err(Error::Config(format!("duplicate model name `{}`", m.display_name())));
            }
        }
        for d in &self.datasets {
            if let DatasetSpec::Synth(s) = d {
                s.validate()?;
            }
        }
        self.training.fit_config(self.epochs, 0).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NotSupported,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub trainer: String,
    pub model: String,
    pub dataset: String,
    /// `Some(reason)` when the compatibility filter excludes the cell.
    pub unsupported: Option<String>,
}

impl Cell {
    pub fn supported(&self) -> bool {
        self.unsupported.is_none()
    }
}

/// The static filter: trainer/model compatibility, then shapes.
pub fn cell_constraint(trainer: &str, model: &ModelSpec, dataset: &DatasetSpec) -> Result<Option<String>> {
    let meta = trainer_meta(trainer)?;
    if let Err(reason) = meta.check(model) {
        return Ok(Some(reason));
    }
    if model.input_size() != dataset.input_size() {
        return Ok(Some(format!(
            "model {} takes {} inputs, dataset {} has {}",
            model.display_name(),
            model.input_size(),
            dataset.name(),
            dataset.input_size()
        )));
    }
    if meta.supervision != Supervision::Unsupervised && model.output_size() < dataset.classes() {
        return Ok(Some(format!(
            "model {} has {} outputs for {} classes",
            model.display_name(),
            model.output_size(),
            dataset.classes()
        )));
    }
    Ok(None)
}

/// Full cross product, datasets outermost, trainers innermost.
pub fn generate_cells(spec: &CampaignSpec) -> Result<Vec<Cell>> {
    let mut cells = Vec::with_capacity(spec.trainers.len() * spec.models.len() * spec.datasets.len());
    for d in &spec.datasets {
        for m in &spec.models {
            for t in &spec.trainers {
                cells.push(Cell {
                    trainer: t.clone(),
                    model: m.display_name(),
                    dataset: d.name(),
                    unsupported: cell_constraint(t, m, d)?,
                });
            }
        }
    }
    Ok(cells)
}

/// Seed for one trial, from a hash of the campaign seed and the cell identity.
pub fn trial_seed(campaign_seed: u64, trainer: &str, model: &str, dataset: &str, trial: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(campaign_seed.to_le_bytes());
    for part in [trainer, model, dataset] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.update((trial as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_acc: f64,
    pub test_acc: f64,
    pub loss: Option<f64>,
    pub total_wall_ms: u64,
    pub wall_ms_per_epoch: u64,
    pub param_count: usize,
    pub peak_aux_memory_bytes: usize,
    pub spike_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub v: u32,
    pub trainer: String,
    pub model: String,
    pub dataset: String,
    pub trial: usize,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default)]
    pub best: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<EpochLog>,
}

impl ExperimentRecord {
    /// A record with no hyperparameters, metrics or history yet.
    pub fn blank(cell: &Cell, trial: usize, seed: u64, status: Status) -> Self {
        ExperimentRecord {
            v: RECORD_VERSION,
            trainer: cell.trainer.clone(),
            model: cell.model.clone(),
            dataset: cell.dataset.clone(),
            trial,
            seed,
            hyperparams: Hyperparams::new(),
            status,
            message: None,
            best: false,
            metrics: None,
            history: Vec::new(),
        }
    }

    /// Metric by report name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        let m = self.metrics.as_ref()?;
        Some(match name {
            "train_acc" => m.train_acc,
            "test_acc" => m.test_acc,
            "loss" => m.loss?,
            "total_wall_ms" => m.total_wall_ms as f64,
            "wall_ms_per_epoch" => m.wall_ms_per_epoch as f64,
            "param_count" => m.param_count as f64,
            "peak_aux_memory_bytes" => m.peak_aux_memory_bytes as f64,
            "spike_sparsity" => m.spike_sparsity,
            _ => return None,
        })
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn masked(&self) -> Self {
        let mut r = self.clone();
        if let Some(m) = r.metrics.as_mut() {
            m.total_wall_ms = 0;
            m.wall_ms_per_epoch = 0;
        }
        for e in &mut r.history {
            e.wall_ms = 0;
        }
        r
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

pub fn write_jsonl(records: &[ExperimentRecord]) -> String {
    records.iter().map(|r| r.to_json_line() + "\n").collect()
}

pub fn parse_jsonl(text: &str) -> Result<Vec<ExperimentRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: ExperimentRecord =
                serde_json::from_str(l).map_err(|e| Error::Format(format!("results line {}: {e}", i + 1)))?;
            if r.v != RECORD_VERSION {
                return Err(Error::Format(format!(
                    "results line {}: schema version {} unsupported",
                    i + 1,
                    r.v
                )));
            }
            Ok(r)
        })
        .collect()
}

/// One fully specified experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSpec {
    pub trainer: String,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub training: TrainingConfig,
}

/// Training output of a single experiment.
pub struct Trained {
    pub record: ExperimentRecord,
    pub log: TrainingLog,
    pub model: Model,
}

/// Runs one experiment. `seed` fixes the model init, trainer state, data
/// order and encoding.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    trainer: &str,
    model_spec: &ModelSpec,
    data: &Dataset,
    hyperparams: &Hyperparams,
    epochs: usize,
    training: &TrainingConfig,
    seed: u64,
    cancel: Option<&AtomicBool>,
) -> Result<(TrainingLog, Model, Metrics)> {
    let root = Rng::new(seed);
    let mut model = Model::build(model_spec.clone(), &mut root.split(1))?;
    let spec = TrainerSpec {
        name: trainer.to_string(),
        hyperparams: hyperparams.clone(),
    };
    let (mut tr, mut opt) = build_trainer(&spec, &model, &mut root.split(2))?;
    let cfg = training.fit_config(epochs, root.split(3).seed());
    let hooks = FitHooks { cancel, on_epoch: None };
    let log = fit_with(tr.as_mut(), &mut opt, &mut model, data, &cfg, hooks)?;
    let sparsity = match data.test_indices().first() {
        None => 1.0,
        Some(_) => {
            let k = data.test_indices().len().min(cfg.eval_batch_size);
            let idx = &data.test_indices()[..k];
            let x = data.spike_input(idx, &cfg.encoder, &mut root.split(4))?;
            let (_, state) = model.forward(&x)?;
            spike_sparsity(&state)
        }
    };
    let last = log.epochs.last().expect("fit logs the initial evaluation");
    let trained_epochs = (log.epochs.len() - 1).max(1) as u64;
    let train_ms: u64 = log.epochs.iter().skip(1).map(|e| e.wall_ms).sum();
    let metrics = Metrics {
        train_acc: last.train_acc,
        test_acc: last.test_acc,
        loss: log.epochs.iter().rev().find_map(|e| e.loss),
        total_wall_ms: log.wall_ms,
        wall_ms_per_epoch: train_ms / trained_epochs,
        param_count: model.param_count(),
        peak_aux_memory_bytes: log.aux_memory_bytes,
        spike_sparsity: sparsity,
    };
    Ok((log, model, metrics))
}

fn load_limited(spec: &DatasetSpec, data_dir: &Path, training: &TrainingConfig) -> Result<Dataset> {
    Ok(load_dataset(spec, data_dir)?.limited(training.max_train, training.max_test))
}

/// Custom mode: one cell with explicit hyperparameters.
pub fn run_custom(spec: &CustomSpec, data_dir: &Path, cancel: Option<&AtomicBool>) -> Result<Trained> {
    spec.model.validate()?;
    if let Some(reason) = cell_constraint(&spec.trainer, &spec.model, &spec.dataset)? {
        return Err(Error::Incompatible(reason));
    }
    let data = load_limited(&spec.dataset, data_dir, &spec.training)?;
    run_custom_on(spec, &data, cancel)
}

/// [`run_custom`] on already loaded data.
pub fn run_custom_on(spec: &CustomSpec, data: &Dataset, cancel: Option<&AtomicBool>) -> Result<Trained> {
    if let Some(reason) = cell_constraint(&spec.trainer, &spec.model, &spec.dataset)? {
        return Err(Error::Incompatible(reason));
    }
    let (log, model, metrics) = run_experiment(
        &spec.trainer,
        &spec.model,
        data,
        &spec.hyperparams,
        spec.epochs,
        &spec.training,
        spec.seed,
        cancel,
    )?;
    let cell = Cell {
        trainer: spec.trainer.clone(),
        model: spec.model.display_name(),
        dataset: spec.dataset.name(),
        unsupported: None,
    };
    let mut record = ExperimentRecord::blank(&cell, 0, spec.seed, Status::Ok);
    record.hyperparams = spec.hyperparams.clone();
    record.best = true;
    record.metrics = Some(metrics);
    record.history = log.epochs.clone();
    Ok(Trained { record, log, model })
}

/// Interruption flag and a callback that sees each record as it completes.
#[derive(Default)]
pub struct CampaignHooks<'a> {
    pub cancel: Option<&'a AtomicBool>,
    pub on_record: Option<&'a (dyn Fn(&ExperimentRecord) + Sync)>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Hyperparameters for one trial: fixed values overlaid by a draw from the
/// trainer's space.
pub fn trial_hyperparams(spec: &CampaignSpec, trainer: &str, seed: u64) -> Result<Hyperparams> {
    let mut hp = spec.hyperparams.get(trainer).cloned().unwrap_or_default();
    let space = spec
        .search_space
        .get(trainer)
        .cloned()
        .unwrap_or_else(|| default_search_space(trainer));
    hp.extend(sample_hyperparams(&space, &mut Rng::new(seed).split(0))?);
    Ok(hp)
}

pub fn run_campaign(spec: &CampaignSpec, data_dir: &Path) -> Result<Vec<ExperimentRecord>> {
    run_campaign_with(spec, data_dir, CampaignHooks::default())
}

/// Runs every supported cell `trials` times. Records come back in cell order
/// then trial order whatever the scheduling; the best trial of each cell by
/// test accuracy is flagged. Failed experiments are recorded and skipped.
/// After an interruption the records finished so far are returned.
pub fn run_campaign_with(
    spec: &CampaignSpec,
    data_dir: &Path,
    hooks: CampaignHooks<'_>,
) -> Result<Vec<ExperimentRecord>> {
    spec.validate()?;
    let cells = generate_cells(spec)?;
    let mut datasets: HashMap<String, Dataset> = HashMap::new();
    for d in &spec.datasets {
        let name = d.name();
        if !datasets.contains_key(&name) && cells.iter().any(|c| c.dataset == name && c.supported()) {
            datasets.insert(name, load_limited(d, data_dir, &spec.training)?);
        }
    }
    let models: HashMap<String, &ModelSpec> = spec.models.iter().map(|m| (m.display_name(), m)).collect();

    let mut jobs = Vec::new();
    for (ci, c) in cells.iter().enumerate() {
        if c.supported() {
            for trial in 0..spec.trials {
                jobs.push((ci, trial));
            }
        }
    }
    let results: Mutex<Vec<Option<ExperimentRecord>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = spec.parallelism.min(jobs.len()).max(1);
    let cancelled = || hooks.cancel.is_some_and(|f| f.load(Ordering::Relaxed));

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= jobs.len() || cancelled() {
                    break;
                }
                let (ci, trial) = jobs[j];
                let cell = &cells[ci];
                let seed = trial_seed(spec.seed, &cell.trainer, &cell.model, &cell.dataset, trial);
                let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<(Hyperparams, Metrics, Vec<EpochLog>)> {
                    let hp = trial_hyperparams(spec, &cell.trainer, seed)?;
                    let (log, _, metrics) = run_experiment(
                        &cell.trainer,
                        models[&cell.model],
                        &datasets[&cell.dataset],
                        &hp,
                        spec.epochs,
                        &spec.training,
                        seed,
                        hooks.cancel,
                    )?;
                    Ok((hp, metrics, log.epochs))
                }));
                let mut rec = ExperimentRecord::blank(cell, trial, seed, Status::Ok);
                match outcome {
                    Ok(Ok((hp, metrics, history))) => {
                        rec.hyperparams = hp;
                        rec.metrics = Some(metrics);
                        rec.history = history;
                    }
                    Ok(Err(Error::Interrupted)) => break,
                    Ok(Err(e)) => {
                        rec.status = Status::Failed;
                        rec.message = Some(e.to_string());
                        rec.hyperparams = trial_hyperparams(spec, &cell.trainer, seed).unwrap_or_default();
                    }
                    Err(p) => {
                        rec.status = Status::Failed;
                        rec.message = Some(format!("panicked: {}", panic_message(p)));
                    }
                }
                if let Some(f) = hooks.on_record {
                    f(&rec);
                }
                results.lock().expect("no worker panics while holding the lock")[j] = Some(rec);
            });
        }
    });

    let mut done = results.into_inner().expect("workers joined");
    let mut out = Vec::new();
    let mut job = 0;
    for c in &cells {
        if !c.supported() {
            let mut rec = ExperimentRecord::blank(c, 0, 0, Status::NotSupported);
            rec.message.clone_from(&c.unsupported);
            out.push(rec);
            continue;
        }
        let first = out.len();
        for _ in 0..spec.trials {
            if let Some(r) = done[job].take() {
                out.push(r);
            }
            job += 1;
        }
        let best = out[first..]
            .iter()
            .enumerate()
            .filter(|(_, r)| r.status == Status::Ok)
            .fold(None::<(usize, f64)>, |acc, (i, r)| {
                let v = r.metric("test_acc").unwrap_or(f64::NEG_INFINITY);
                match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((i, v)),
                }
            });
        if let Some((i, _)) = best {
            out[first + i].best = true;
        }
    }
    Ok(out)
}
