//! Static features to spike trains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Activity over time, `[timesteps × batch × units]`. Usually binary; the
/// direct-current encoder stores analog values in the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain(Tensor);

impl SpikeTrain {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Dimension(format!(
                "spike train must be [T × batch × units], got {:?}",
                data.shape()
            )));
        }
        Ok(SpikeTrain(data))
    }

    pub fn zeros(timesteps: usize, batch: usize, units: usize) -> Self {
        SpikeTrain(Tensor::zeros(&[timesteps, batch, units]))
    }

    pub fn from_steps(steps: &[Tensor]) -> Result<Self> {
        Self::new(Tensor::stack(steps)?)
    }

    pub fn timesteps(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn units(&self) -> usize {
        self.0.shape()[2]
    }

    /// `[batch × units]` slice at step `t`.
    pub fn at(&self, t: usize) -> Tensor {
        self.0.outer(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn is_binary(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    PoissonRate,
    Latency,
    DirectCurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    #[serde(default)]
    pub kind: EncoderKind,
    pub timesteps: usize,
    #[serde(default = "default_max_rate")]
    pub max_rate: f32,
}

fn default_max_rate() -> f32 {
    1.0
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, timesteps: usize, max_rate: f32) -> Result<Self> {
        let s = EncoderSpec {
            kind,
            timesteps,
            max_rate,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("encoder needs at least one timestep".into()));
        }
        if !(self.max_rate > 0.0 && self.max_rate <= 1.0) {
            return Err(Error::Config(format!(
                "max_rate must be in (0,1], got {}",
                self.max_rate
            )));
        }
        Ok(())
    }

    /// Spike step for a latency-coded feature, `None` for zero features.
    pub fn latency_step(&self, feature: f32) -> Option<usize> {
        (feature > 0.0).then(|| ((1.0 - feature) * (self.timesteps - 1) as f32).round() as usize)
    }
}

/// Encodes `[batch × d]` features in `[0, 1]`.
///
/// Poisson draws one `u32` per `(t, sample, feature)` in that nesting order.
/// Latency and direct-current encoding consume no randomness.
pub fn encode(spec: &EncoderSpec, features: &Tensor, rng: &mut Rng) -> Result<SpikeTrain> {
    spec.validate()?;
    let (batch, d) = features.dims2()?;
    if let Some(bad) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("feature {bad} outside [0, 1]")));
    }
    let t_max = spec.timesteps;
    let plane = batch * d;
    let mut out = vec![0.0f32; t_max * plane];
    let x = features.data();
    match spec.kind {
        EncoderKind::PoissonRate => {
            for t in 0..t_max {
                let step = &mut out[t * plane..(t + 1) * plane];
                for (o, &f) in step.iter_mut().zip(x) {
                    if rng.bernoulli(f * spec.max_rate) {
                        *o = 1.0;
                    }
                }
            }
        }
        EncoderKind::Latency => {
            for (i, &f) in x.iter().enumerate() {
                if let Some(t) = spec.latency_step(f) {
                    out[t * plane + i] = 1.0;
                }
            }
        }
        EncoderKind::DirectCurrent => {
            for t in 0..t_max {
                out[t * plane..(t + 1) * plane].copy_from_slice(x);
            }
        }
    }
    SpikeTrain::new(Tensor::new(vec![t_max, batch, d], out)?)
}
