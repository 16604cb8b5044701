//! Synthetic spike-pattern classification: one fixed random raster per class,
//! samples are copies with independent bit flips.

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub inputs: usize,
    pub timesteps: usize,
    /// Per-bit flip probability, in `[0, 0.5)`.
    pub noise: f32,
    /// Spike probability of a prototype bit.
    #[serde(default = "default_density")]
    pub density: f32,
    #[serde(default = "default_train")]
    pub train_per_class: usize,
    #[serde(default = "default_test")]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_density() -> f32 {
    0.25
}
fn default_train() -> usize {
    100
}
fn default_test() -> usize {
    50
}

impl SynthSpec {
    pub fn new(classes: usize, inputs: usize, timesteps: usize, noise: f32) -> Self {
        SynthSpec {
            classes,
            inputs,
            timesteps,
            noise,
            density: default_density(),
            train_per_class: default_train(),
            test_per_class: default_test(),
            seed: 0,
        }
    }

    pub fn name(&self) -> String {
        format!("synth_c{}_d{}_t{}", self.classes, self.inputs, self.timesteps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic task needs at least two classes".into()));
        }
        if self.inputs < self.classes {
            return Err(Error::Config(format!(
                "synthetic task needs inputs >= classes, got {} < {}",
                self.inputs, self.classes
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("synthetic task needs at least one timestep".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise must be in [0, 0.5), got {}", self.noise)));
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::Config(format!(
                "density must be in (0, 1), got {}",
                self.density
            )));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Builds the dataset and returns the class prototypes `[classes × T × d]`.
/// Samples alternate classes, train split first.
pub fn synth_with_prototypes(rng: &mut Rng, spec: &SynthSpec) -> Result<(Dataset, Tensor)> {
    spec.validate()?;
    let (c, d, t_max) = (spec.classes, spec.inputs, spec.timesteps);
    let plane = t_max * d;
    let protos: Vec<f32> = (0..c * plane)
        .map(|_| rng.bernoulli(spec.density) as u8 as f32)
        .collect();
    let n_train = c * spec.train_per_class;
    let n = n_train + c * spec.test_per_class;
    let mut rasters = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % c;
        labels.push(y);
        for &bit in &protos[y * plane..(y + 1) * plane] {
            let flip = rng.bernoulli(spec.noise);
            rasters.push(if flip { 1.0 - bit } else { bit });
        }
    }
    let rasters = Tensor::new(vec![n, t_max, d], rasters)?;
    let ds = Dataset::from_rasters(
        spec.name(),
        rasters,
        labels,
        c,
        (0..n_train).collect(),
        (n_train..n).collect(),
    )?;
    Ok((ds, Tensor::new(vec![c, t_max, d], protos)?))
}

pub fn synth_patterns(rng: &mut Rng, spec: &SynthSpec) -> Result<Dataset> {
    Ok(synth_with_prototypes(rng, spec)?.0)
}
