//! Pieces shared by the online rules: the rate readout error, presynaptic
//! traces and the forward loop that hands each timestep to a callback.

use crate::bptt::activation_derivative;
use crate::encoding::SpikeTrain;
use crate::error::{Error, Result};
use crate::model::{LayerRecord, Model};
use crate::snn::{decay_trace, SurrogateFn};
use crate::tensor::Tensor;

/// Per-unit spike counts `[batch × out]` of an output record `[T × batch × out]`.
pub fn spike_counts(output: &Tensor) -> Vec<f32> {
    let plane = output.shape()[1] * output.shape()[2];
    let mut c = vec![0.0f32; plane];
    for t in 0..output.shape()[0] {
        for (a, &s) in c.iter_mut().zip(output.outer_slice(t)) {
            *a += s;
        }
    }
    c
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} outputs"
        )));
    }
    Ok(())
}

/// Instantaneous rate-readout error `2(S[t] - y) / (T * batch * out)`.
pub(crate) fn step_error(spikes: &[f32], labels: &[usize], classes: usize, timesteps: usize) -> Vec<f32> {
    let batch = labels.len();
    let norm = 2.0 / (timesteps * batch * classes) as f32;
    let mut e = Vec::with_capacity(spikes.len());
    for (b, row) in spikes.chunks(classes).enumerate() {
        for (k, &s) in row.iter().enumerate() {
            let y = if labels[b] == k { 1.0 } else { 0.0 };
            e.push(norm * (s - y));
        }
    }
    e
}

/// `g ⊙ σ'(U - θ)` for one layer record.
pub(crate) fn membrane_delta(model: &Model, surrogate: &SurrogateFn, rec: &LayerRecord, g: &[f32]) -> Vec<f32> {
    let th = model.lif().threshold;
    let act = model.activation();
    g.iter()
        .zip(rec.membrane.data())
        .map(|(&gv, &u)| gv * activation_derivative(act, surrogate, u, th))
        .collect()
}

/// Rate-MSE of a finished output record, as a diagnostic.
pub(crate) fn rate_mse(output: &Tensor, labels: &[usize]) -> f64 {
    let t = output.shape()[0] as f64;
    let classes = output.shape()[2];
    let counts = spike_counts(output);
    let mut sum = 0.0;
    for (b, row) in counts.chunks(classes).enumerate() {
        for (k, &c) in row.iter().enumerate() {
            let y = if labels[b] == k { 1.0 } else { 0.0 };
            let r = c as f64 / t - y;
            sum += r * r;
        }
    }
    sum / counts.len() as f64
}

/// Low-pass filtered presynaptic activity of one layer: feedforward input
/// and, for recurrent layers, the layer's own previous spikes.
#[derive(Debug, Clone)]
pub(crate) struct LayerTraces {
    pub input: Vec<f32>,
    pub rec: Option<Vec<f32>>,
}

impl LayerTraces {
    pub(crate) fn for_model(model: &Model, batch: usize) -> Vec<LayerTraces> {
        model
            .layers()
            .iter()
            .map(|l| LayerTraces {
                input: vec![0.0; batch * l.inputs],
                rec: l.recurrent.as_ref().map(|_| vec![0.0; batch * l.units]),
            })
            .collect()
    }

    pub(crate) fn update(&mut self, rec: &LayerRecord, decay: f32) {
        decay_trace(&mut self.input, rec.input.data(), decay);
        if let (Some(tr), Some(r)) = (self.rec.as_mut(), rec.rec_input.as_ref()) {
            decay_trace(tr, r.data(), decay);
        }
    }

    pub(crate) fn size_bytes(traces: &[LayerTraces]) -> usize {
        traces
            .iter()
            .map(|t| 4 * (t.input.len() + t.rec.as_ref().map_or(0, |r| r.len())))
            .sum()
    }
}

/// Runs the model forward one step at a time, calling `each` with the layer
/// records of every step. Nothing is kept between steps except the model
/// state. Returns the output record.
pub(crate) fn run_online(
    model: &Model,
    input: &SpikeTrain,
    mut each: impl FnMut(usize, &[LayerRecord]) -> Result<()>,
) -> Result<Tensor> {
    if input.units() != model.input_size() {
        return Err(Error::Dimension(format!(
            "model expects {} inputs, got {}",
            model.input_size(),
            input.units()
        )));
    }
    let plan = model.plan();
    let mut state = model.init_state(input.batch());
    state.history = None;
    let mut out = Vec::with_capacity(input.timesteps());
    for t in 0..input.timesteps() {
        let recs = model.step(&plan, &mut state, &input.at(t))?;
        each(t, &recs)?;
        out.push(recs.last().expect("model has layers").spikes.clone());
    }
    Tensor::stack(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_error_values() {
        let e = step_error(&[1.0, 0.0, 0.0, 0.0], &[0, 1], 2, 4);
        // norm = 2 / (4 * 2 * 2)
        assert_eq!(e, vec![0.0, 0.0, 0.0, -0.125]);
    }

    #[test]
    fn counts_sum_over_time() {
        let out = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(spike_counts(&out), vec![2.0, 1.0]);
    }
}
