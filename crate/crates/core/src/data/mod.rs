//! Datasets: a feature matrix (or pre-encoded spike rasters) with labels and
//! fixed train/test index splits.

mod cifar;
mod idx;
mod synth;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cifar::{decode_cifar, encode_cifar, read_cifar, write_cifar, CifarRecords, CIFAR_PIXELS};
pub use idx::{decode_idx, encode_idx, read_idx, write_idx, IdxArray};
pub use synth::{synth_patterns, synth_with_prototypes, SynthSpec};

use crate::encoding::{encode, EncoderSpec, SpikeTrain};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Environment variable consulted for the data root when no flag is given.
pub const DATA_ENV: &str = "NEUROTRAIN_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    /// `[n × d]`, in `[0, 1]`. For raster datasets, the mean firing rate.
    /// Shared so split views stay cheap.
    features: Arc<Tensor>,
    /// `[n × T × d]` binary spike rasters that replace encoding.
    rasters: Option<Arc<Tensor>>,
    labels: Vec<usize>,
    classes: usize,
    image_shape: Option<[usize; 3]>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        classes: usize,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            features: Arc::new(features),
            rasters: None,
            labels,
            classes,
            image_shape: None,
            train,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_rasters(
        name: impl Into<String>,
        rasters: Tensor,
        labels: Vec<usize>,
        classes: usize,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        if rasters.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "rasters must be [n × T × d], got {:?}",
                rasters.shape()
            )));
        }
        let (n, t_max, d) = (rasters.shape()[0], rasters.shape()[1], rasters.shape()[2]);
        let mut rates = vec![0.0f32; n * d];
        for i in 0..n {
            for t in 0..t_max {
                let row = &rasters.data()[(i * t_max + t) * d..(i * t_max + t + 1) * d];
                for (r, &v) in rates[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *r += v / t_max as f32;
                }
            }
        }
        let mut ds = Dataset::new(name, Tensor::new(vec![n, d], rates)?, labels, classes, train, test)?;
        ds.rasters = Some(Arc::new(rasters));
        Ok(ds)
    }

    pub fn with_image_shape(mut self, shape: [usize; 3]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.input_size() {
            return Err(Error::Dimension(format!(
                "image shape {shape:?} does not cover {} features",
                self.input_size()
            )));
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let (n, _) = self.features.dims2()?;
        if self.labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} samples",
                self.labels.len()
            )));
        }
        if self.classes == 0 {
            return Err(Error::Dimension("dataset without classes".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Format(format!(
                "label {y} out of range for {} classes",
                self.classes
            )));
        }
        if let Some(&i) = self.train.iter().chain(&self.test).find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "split index {i} out of range for {n} samples"
            )));
        }
        if let Some(bad) = self.features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("feature {bad} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_size(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.image_shape
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn rasters(&self) -> Option<&Tensor> {
        self.rasters.as_deref()
    }

    /// Timesteps fixed by the data itself, if it carries rasters.
    pub fn raster_timesteps(&self) -> Option<usize> {
        self.rasters.as_ref().map(|r| r.shape()[1])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Same samples with new splits.
    pub fn with_splits(&self, train: Vec<usize>, test: Vec<usize>) -> Result<Dataset> {
        let n = self.len();
        if let Some(&i) = train.iter().chain(&test).find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "split index {i} out of range for {n} samples"
            )));
        }
        Ok(Dataset {
            train,
            test,
            ..self.clone()
        })
    }

    /// Keeps at most the first `train`/`test` indices of each split.
    pub fn limited(mut self, train: Option<usize>, test: Option<usize>) -> Self {
        if let Some(k) = train {
            self.train.truncate(k);
        }
        if let Some(k) = test {
            self.test.truncate(k);
        }
        self
    }

    pub fn gather_features(&self, indices: &[usize]) -> Tensor {
        let d = self.input_size();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![indices.len(), d], out).expect("gathered rows match their shape")
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Spike input for `indices`. Raster datasets are returned as stored and
    /// ignore the encoder; otherwise features go through `encode`.
    pub fn spike_input(&self, indices: &[usize], encoder: &EncoderSpec, rng: &mut Rng) -> Result<SpikeTrain> {
        match &self.rasters {
            Some(r) => {
                let (t_max, d) = (r.shape()[1], r.shape()[2]);
                let b = indices.len();
                let mut out = vec![0.0f32; t_max * b * d];
                for (k, &i) in indices.iter().enumerate() {
                    for t in 0..t_max {
                        let src = &r.data()[(i * t_max + t) * d..(i * t_max + t + 1) * d];
                        out[(t * b + k) * d..(t * b + k + 1) * d].copy_from_slice(src);
                    }
                }
                SpikeTrain::new(Tensor::new(vec![t_max, b, d], out)?)
            }
            None => encode(encoder, &self.gather_features(indices), rng),
        }
    }

    /// Minibatches over a split; shuffled when `rng` is given. The last
    /// batch may be short.
    pub fn batches(&self, split: Split, batch_size: usize, rng: Option<&mut Rng>) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut order = self.indices(split).to_vec();
        if let Some(rng) = rng {
            rng.shuffle(&mut order);
        }
        self.batches_over(order, batch_size)
    }

    /// Minibatches over an explicit sample order.
    pub fn batches_over(&self, order: Vec<usize>, batch_size: usize) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(&i) = order.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Dimension(format!(
                "sample index {i} out of range for {} samples",
                self.len()
            )));
        }
        Ok(Batches {
            ds: self,
            order,
            size: batch_size,
            pos: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DataBatch {
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = DataBatch;

    fn next(&mut self) -> Option<DataBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(DataBatch {
            features: self.ds.gather_features(&indices),
            labels: self.ds.gather_labels(&indices),
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// The datasets the registry knows how to load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mnist,
    FashionMnist,
    Cifar10,
    Synth(SynthSpec),
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Mnist => "mnist".into(),
            DatasetSpec::FashionMnist => "fashion_mnist".into(),
            DatasetSpec::Cifar10 => "cifar10".into(),
            DatasetSpec::Synth(s) => s.name(),
        }
    }

    /// Feature count, known without touching the disk.
    pub fn input_size(&self) -> usize {
        match self {
            DatasetSpec::Mnist | DatasetSpec::FashionMnist => 784,
            DatasetSpec::Cifar10 => CIFAR_PIXELS,
            DatasetSpec::Synth(s) => s.inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synth(s) => s.classes,
            _ => 10,
        }
    }

    /// Parses a bare dataset name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(DatasetSpec::Mnist),
            "fashion_mnist" | "fmnist" => Ok(DatasetSpec::FashionMnist),
            "cifar10" => Ok(DatasetSpec::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}`; expected mnist, fashion_mnist, cifar10 or a synth table"
            ))),
        }
    }
}

/// `flag`, else `$NEUROTRAIN_DATA`, else `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("data"),
    }
}

pub fn load_dataset(spec: &DatasetSpec, data_dir: &Path) -> Result<Dataset> {
    match spec {
        DatasetSpec::Mnist => load_idx_dir("mnist", &data_dir.join("mnist")),
        DatasetSpec::FashionMnist => load_idx_dir("fashion_mnist", &data_dir.join("fashion_mnist")),
        DatasetSpec::Cifar10 => load_cifar_dir(&data_dir.join("cifar10")),
        DatasetSpec::Synth(s) => synth_patterns(&mut Rng::new(s.seed), s),
    }
}

fn idx_images(images: &IdxArray, path: &Path) -> Result<(usize, usize, usize)> {
    match images.dims[..] {
        [n, h, w] => Ok((n, h, w)),
        _ => Err(Error::Format(format!(
            "{}: expected a rank-3 image array, got extents {:?}",
            path.display(),
            images.dims
        ))),
    }
}

/// Reads one image/label IDX pair as `(features [n × h·w], labels, h, w)`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>, usize, usize)> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    let (n, h, w) = idx_images(&img, images)?;
    if lab.dims != [n] {
        return Err(Error::Format(format!(
            "{}: {:?} labels for {n} images",
            labels.display(),
            lab.dims
        )));
    }
    let feats = img.data.iter().map(|&p| p as f32 / 255.0).collect();
    let labels = lab.data.iter().map(|&y| y as usize).collect();
    Ok((Tensor::new(vec![n, h * w], feats)?, labels, h, w))
}

/// Standard four-file layout: train files then t10k files.
fn load_idx_dir(name: &str, dir: &Path) -> Result<Dataset> {
    let (train_x, train_y, h, w) = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (test_x, test_y, h2, w2) = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    if (h, w) != (h2, w2) {
        return Err(Error::Format(format!(
            "{}: train images are {h}x{w} but test images are {h2}x{w2}",
            dir.display()
        )));
    }
    let n_train = train_y.len();
    let n = n_train + test_y.len();
    let d = h * w;
    let mut feats = train_x.into_data();
    feats.extend(test_x.into_data());
    let feats = Tensor::new(vec![n, d], feats)?;
    let mut labels = train_y;
    labels.extend(test_y);
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(
        name,
        feats,
        labels,
        classes,
        (0..n_train).collect(),
        (n_train..n).collect(),
    )?
    .with_image_shape([1, h, w])
}

fn load_cifar_dir(dir: &Path) -> Result<Dataset> {
    let dir = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    let mut all = CifarRecords::default();
    for k in 1..=5 {
        all.extend(read_cifar(&dir.join(format!("data_batch_{k}.bin")))?);
    }
    let n_train = all.len();
    all.extend(read_cifar(&dir.join("test_batch.bin"))?);
    let n = all.len();
    let feats = all.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels = all.labels.iter().map(|&y| y as usize).collect();
    Dataset::new(
        "cifar10",
        Tensor::new(vec![n, CIFAR_PIXELS], feats)?,
        labels,
        10,
        (0..n_train).collect(),
        (n_train..n).collect(),
    )?
    .with_image_shape([3, 32, 32])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncoderKind;

    fn tiny() -> Dataset {
        let f = Tensor::new(vec![5, 2], vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.2, 0.8, 0.9, 0.1]).unwrap();
        Dataset::new("tiny", f, vec![0, 1, 0, 1, 0], 2, vec![0, 1, 2], vec![3, 4]).unwrap()
    }

    #[test]
    fn batches_cover_split_once() {
        let ds = tiny();
        let mut rng = Rng::new(3);
        let mut seen: Vec<usize> = ds
            .batches(Split::Train, 2, Some(&mut rng))
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
        let sizes: Vec<usize> = ds
            .batches(Split::Train, 2, None)
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn rejects_bad_labels_and_features() {
        let f = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(Dataset::new("x", f.clone(), vec![0, 2], 2, vec![0], vec![1]).is_err());
        let g = Tensor::new(vec![2, 1], vec![0.0, 1.5]).unwrap();
        assert!(Dataset::new("x", g, vec![0, 1], 2, vec![0], vec![1]).is_err());
        assert!(tiny().batches(Split::Test, 0, None).is_err());
    }

    #[test]
    fn rasters_bypass_encoder() {
        let spec = SynthSpec::new(2, 3, 4, 0.0);
        let ds = synth_patterns(&mut Rng::new(0), &spec).unwrap();
        let enc = EncoderSpec::new(EncoderKind::DirectCurrent, 9, 1.0).unwrap();
        let x = ds.spike_input(&[0, 1], &enc, &mut Rng::new(0)).unwrap();
        assert_eq!(x.timesteps(), 4);
        assert!(x.is_binary());
        let r = ds.rasters().unwrap();
        for t in 0..4 {
            for k in 0..2 {
                for j in 0..3 {
                    assert_eq!(x.tensor().at(&[t, k, j]), r.at(&[k, t, j]));
                }
            }
        }
    }

    #[test]
    fn dataset_spec_names() {
        let s: DatasetSpec = serde_json::from_str("\"mnist\"").unwrap();
        assert_eq!(s, DatasetSpec::Mnist);
        let s: DatasetSpec =
            serde_json::from_str(r#"{"synth":{"classes":3,"inputs":5,"timesteps":4,"noise":0.1}}"#).unwrap();
        assert_eq!(s.name(), "synth_c3_d5_t4");
        assert!(DatasetSpec::from_name("imagenet").is_err());
    }

    #[test]
    fn idx_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("mnist");
        std::fs::create_dir(&m).unwrap();
        let img = |n: usize| IdxArray::new(vec![n, 2, 2], (0..n * 4).map(|i| (i * 17 % 256) as u8).collect()).unwrap();
        let lab = |n: usize| IdxArray::new(vec![n], (0..n).map(|i| (i % 10) as u8).collect()).unwrap();
        write_idx(&m.join("train-images-idx3-ubyte"), &img(6)).unwrap();
        write_idx(&m.join("train-labels-idx1-ubyte"), &lab(6)).unwrap();
        write_idx(&m.join("t10k-images-idx3-ubyte"), &img(3)).unwrap();
        write_idx(&m.join("t10k-labels-idx1-ubyte"), &lab(3)).unwrap();
        let ds = load_dataset(&DatasetSpec::Mnist, dir.path()).unwrap();
        assert_eq!(ds.len(), 9);
        assert_eq!(ds.train_indices().len(), 6);
        assert_eq!(ds.image_shape(), Some([1, 2, 2]));
        assert_eq!(ds.features().at(&[0, 1]), 17.0 / 255.0);
        let missing = load_dataset(&DatasetSpec::FashionMnist, dir.path()).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }
}
