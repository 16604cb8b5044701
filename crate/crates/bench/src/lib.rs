//! Fixtures shared by the benchmarks.

use neurotrain::trainers::Batch;
use neurotrain::{Rng, SpikeTrain, Tensor};

/// Bernoulli spike input `[t × batch × d]` with labels cycling over `classes`.
pub fn random_batch(rng: &mut Rng, t: usize, batch: usize, d: usize, rate: f32, classes: usize) -> Batch {
    let xs: Vec<f32> = (0..t * batch * d).map(|_| rng.bernoulli(rate) as u8 as f32).collect();
    let input = SpikeTrain::new(Tensor::new(vec![t, batch, d], xs).expect("shape matches")).expect("binary input");
    Batch::new(input, (0..batch).map(|i| i % classes).collect())
}

/// Uniform features in `[0, 1)` shaped `[batch × d]`.
pub fn random_features(rng: &mut Rng, batch: usize, d: usize) -> Tensor {
    neurotrain::tensor::rand_uniform(rng, &[batch, d], 0.0, 1.0).expect("valid bounds")
}
