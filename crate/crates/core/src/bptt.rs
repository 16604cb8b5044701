//! Reverse-mode gradients through a time-unrolled LIF stack.

use serde::{Deserialize, Serialize};

use crate::encoding::SpikeTrain;
use crate::error::{Error, Result};
use crate::model::{conv, LayerRecord, Model, Synapse};
use crate::snn::{Activation, ResetMode, SurrogateFn};
use crate::tensor::{gemm_acc, gemm_tn_acc, Tensor};

/// One `(t, layer)` record of the forward pass.
pub type TapeEntry = LayerRecord;

/// Recorded forward activity, `T × layers` entries in time-major order.
#[derive(Debug, Clone)]
pub struct Tape {
    timesteps: usize,
    layers: usize,
    entries: Vec<TapeEntry>,
}

impl Tape {
    /// Runs `model` on `input` from a fresh state and keeps every layer record.
    /// Returns the output spikes `[T × batch × out]` alongside the tape.
    pub fn record(model: &Model, input: &SpikeTrain) -> Result<(Tensor, Tape)> {
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
        let n_layers = model.layers().len();
        let mut entries = Vec::with_capacity(input.timesteps() * n_layers);
        let mut out = Vec::with_capacity(input.timesteps());
        for t in 0..input.timesteps() {
            let recs = model.step(&plan, &mut state, &input.at(t))?;
            out.push(recs[n_layers - 1].spikes.clone());
            entries.extend(recs);
        }
        Ok((
            Tensor::stack(&out)?,
            Tape {
                timesteps: input.timesteps(),
                layers: n_layers,
                entries,
            },
        ))
    }

    /// Builds a tape from a recorded model history (`history[t][layer]`).
    pub fn from_history(history: Vec<Vec<LayerRecord>>) -> Result<Tape> {
        let timesteps = history.len();
        let layers = history.first().map_or(0, |h| h.len());
        let mut entries = Vec::with_capacity(timesteps * layers);
        for (t, step) in history.into_iter().enumerate() {
            if step.len() != layers {
                return Err(Error::Dimension(format!("history step {t} has {} layers", step.len())));
            }
            entries.extend(step);
        }
        Ok(Tape {
            timesteps,
            layers,
            entries,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TapeEntry] {
        &self.entries
    }

    pub fn entry(&self, t: usize, layer: usize) -> &TapeEntry {
        &self.entries[t * self.layers + layer]
    }

    pub fn size_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.size_bytes()).sum()
    }
}

/// One gradient (or delta) tensor per model parameter, in [`Model::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub grads: Vec<Tensor>,
}

impl GradSet {
    pub fn zeros_like(model: &Model) -> Self {
        GradSet {
            grads: model.zero_like_params(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&self, s: f32) -> GradSet {
        GradSet {
            grads: self.grads.iter().map(|g| g.scale(s)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f32) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn axpy(&mut self, alpha: f32, other: &GradSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Dimension("gradient sets differ in length".into()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    pub fn max_abs(&self) -> f32 {
        self.grads.iter().map(|g| g.max_abs()).fold(0.0, f32::max)
    }

    pub fn max_abs_diff(&self, other: &GradSet) -> f32 {
        self.grads
            .iter()
            .zip(&other.grads)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max)
    }

    pub fn check_shapes(&self, model: &Model) -> Result<()> {
        let params = model.params();
        if params.len() != self.grads.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                self.grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(&self.grads) {
            p.same_shape(g)?;
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for g in &self.grads {
            g.check_finite("gradient")?;
        }
        Ok(())
    }
}

/// Whether gradients flow through the spike in the reset term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetGrad {
    #[default]
    Detached,
    Attached,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BackwardOptions {
    pub surrogate: SurrogateFn,
    pub reset: ResetGrad,
}

/// dS/dU used in backward passes: the surrogate for spiking models, the
/// exact sigmoid derivative in smooth mode.
pub(crate) fn activation_derivative(act: Activation, surrogate: &SurrogateFn, u: f32, threshold: f32) -> f32 {
    match act {
        Activation::Spike => surrogate.derivative(u - threshold),
        Activation::Smooth { slope } => {
            let s = crate::snn::sigmoid(slope * (u - threshold));
            slope * s * (1.0 - s)
        }
    }
}

/// Weight-gradient accumulator. Dense and recurrent gradients are kept as
/// `[in × units]` so sparse inputs can be skipped row by row.
pub(crate) struct GradAccum {
    slots: Vec<(usize, Option<usize>)>,
    bufs: Vec<Vec<f32>>,
    transposed: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl GradAccum {
    pub(crate) fn new(model: &Model) -> Self {
        let mut transposed = Vec::new();
        let mut shapes = Vec::new();
        for l in model.layers() {
            transposed.push(matches!(l.synapse, Synapse::Dense(_)));
            shapes.push(l.synapse.weights().shape().to_vec());
            if let Some(r) = &l.recurrent {
                transposed.push(true);
                shapes.push(r.shape().to_vec());
            }
        }
        let bufs = shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        GradAccum {
            slots: model.param_slots(),
            bufs,
            transposed,
            shapes,
        }
    }

    /// Adds `dUᵀ · input` for layer `l` (and `dUᵀ · rec_input` for its
    /// recurrent matrix), then returns `dU · W` when `want_input_grad`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layer_backward(
        &mut self,
        model: &Model,
        l: usize,
        d_u: &[f32],
        input: &[f32],
        rec_input: Option<&[f32]>,
        pool_index: Option<&[u32]>,
        batch: usize,
        want_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let layer = &model.layers()[l];
        let (w_slot, r_slot) = self.slots[l];
        let n = layer.units;
        let d_in = match &layer.synapse {
            Synapse::Dense(w) => {
                gemm_tn_acc(input, batch, layer.inputs, d_u, n, &mut self.bufs[w_slot]);
                want_input_grad.then(|| {
                    let mut g = vec![0.0f32; batch * layer.inputs];
                    gemm_acc(d_u, batch, n, w.data(), layer.inputs, &mut g);
                    g
                })
            }
            Synapse::Conv { geometry, weights } => conv::conv_backward(
                geometry,
                weights,
                input,
                pool_index.expect("conv record carries pool routes"),
                d_u,
                batch,
                &mut self.bufs[w_slot],
                want_input_grad,
            ),
        };
        if let (Some(r), Some(prev)) = (r_slot, rec_input) {
            gemm_tn_acc(prev, batch, n, d_u, n, &mut self.bufs[r]);
        }
        d_in
    }

    pub(crate) fn finish(self) -> Result<GradSet> {
        let mut grads = Vec::with_capacity(self.bufs.len());
        for ((buf, tr), shape) in self.bufs.into_iter().zip(self.transposed).zip(self.shapes) {
            let g = if tr {
                Tensor::new(vec![shape[1], shape[0]], buf)?.transpose()?
            } else {
                Tensor::new(shape, buf)?
            };
            grads.push(g);
        }
        // Self-connections are structurally absent.
        let mut set = GradSet { grads };
        zero_recurrent_diagonals(&self.slots, &mut set);
        Ok(set)
    }
}

fn zero_recurrent_diagonals(slots: &[(usize, Option<usize>)], set: &mut GradSet) {
    for &(_, r) in slots {
        if let Some(r) = r {
            let n = set.grads[r].shape()[0];
            for i in 0..n {
                set.grads[r].data_mut()[i * n + i] = 0.0;
            }
        }
    }
}

fn check_tape(model: &Model, tape: &Tape, loss_grad: &Tensor) -> Result<usize> {
    let layers = model.layers();
    if tape.layers() != layers.len() || tape.len() != tape.timesteps() * tape.layers() {
        return Err(Error::Dimension(format!(
            "tape has {} layers, model has {}",
            tape.layers(),
            layers.len()
        )));
    }
    if loss_grad.rank() != 3 || loss_grad.shape()[0] != tape.timesteps() || loss_grad.shape()[2] != model.output_size()
    {
        return Err(Error::Dimension(format!(
            "loss gradient {:?} does not match tape of {} steps and {} outputs",
            loss_grad.shape(),
            tape.timesteps(),
            model.output_size()
        )));
    }
    let batch = loss_grad.shape()[1];
    for e in tape.entries() {
        let l = &layers[e.layer];
        if e.membrane.shape() != [batch, l.units] || e.input.shape() != [batch, l.inputs] {
            return Err(Error::Dimension(format!(
                "tape entry (t={}, layer={}) does not match the model",
                e.t, e.layer
            )));
        }
    }
    Ok(batch)
}

/// Gradient of the loss w.r.t. every parameter, with the reset path detached.
pub fn backward(model: &Model, tape: &Tape, loss_grad: &Tensor, surrogate: &SurrogateFn) -> Result<GradSet> {
    backward_with(
        model,
        tape,
        loss_grad,
        &BackwardOptions {
            surrogate: *surrogate,
            reset: ResetGrad::Detached,
        },
    )
}

/// `loss_grad` is dL/dS of the output layer, `[T × batch × out]`.
pub fn backward_with(model: &Model, tape: &Tape, loss_grad: &Tensor, opts: &BackwardOptions) -> Result<GradSet> {
    let batch = check_tape(model, tape, loss_grad)?;
    loss_grad.check_finite("loss gradient")?;
    let lif = *model.lif();
    let (beta, theta) = (lif.beta, lif.threshold);
    let act = model.activation();
    let layers = model.layers();
    let n_layers = layers.len();
    let mut acc = GradAccum::new(model);
    // dL/dU[t+1] per layer.
    let mut d_next: Vec<Vec<f32>> = layers.iter().map(|l| vec![0.0; batch * l.units]).collect();
    for t in (0..tape.timesteps()).rev() {
        let mut from_above = loss_grad.outer_slice(t).to_vec();
        for l in (0..n_layers).rev() {
            let layer = &layers[l];
            let e = tape.entry(t, l);
            let u = e.membrane.data();
            let s = e.spikes.data();
            let dn = &d_next[l];
            let mut d_s = from_above;
            if let Some(r) = &layer.recurrent {
                gemm_acc(dn, batch, layer.units, r.data(), layer.units, &mut d_s);
            }
            if t + 1 < tape.timesteps() && opts.reset == ResetGrad::Attached {
                match lif.reset_mode {
                    ResetMode::Subtract => {
                        for (ds, &g) in d_s.iter_mut().zip(dn) {
                            *ds -= beta * theta * g;
                        }
                    }
                    ResetMode::Zero => {
                        for ((ds, &g), &uu) in d_s.iter_mut().zip(dn).zip(u) {
                            *ds -= beta * uu * g;
                        }
                    }
                }
            }
            let mut d_u = vec![0.0f32; d_s.len()];
            for i in 0..d_u.len() {
                let temporal = match lif.reset_mode {
                    ResetMode::Subtract => beta * dn[i],
                    ResetMode::Zero => beta * (1.0 - s[i]) * dn[i],
                };
                d_u[i] = d_s[i] * activation_derivative(act, &opts.surrogate, u[i], theta) + temporal;
            }
            let below = acc.layer_backward(
                model,
                l,
                &d_u,
                e.input.data(),
                e.rec_input.as_ref().map(|r| r.data()),
                e.pool_index.as_deref(),
                batch,
                l > 0,
            );
            d_next[l] = d_u;
            from_above = below.unwrap_or_default();
        }
    }
    let g = acc.finish()?;
    g.check_finite()?;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    RateMse,
    CountCrossentropy,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::RateMse => "rate_mse",
            LossKind::CountCrossentropy => "count_crossentropy",
        }
    }
}

fn check_targets(targets: &[usize], batch: usize, classes: usize) -> Result<()> {
    if targets.len() != batch {
        return Err(Error::Dimension(format!(
            "{} targets for batch of {batch}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
        return Err(Error::Argument(format!(
            "class index {bad} out of range for {classes} outputs"
        )));
    }
    Ok(())
}

/// Loss of an output record `[T × batch × out]` against class indices and
/// its gradient w.r.t. every output spike.
pub fn loss_and_grad(output: &Tensor, targets: &[usize], loss: LossKind) -> Result<(f64, Tensor)> {
    if output.rank() != 3 {
        return Err(Error::Dimension(format!(
            "output record must be [T × batch × out], got {:?}",
            output.shape()
        )));
    }
    let (t_max, batch, classes) = (output.shape()[0], output.shape()[1], output.shape()[2]);
    check_targets(targets, batch, classes)?;
    let mut counts = vec![0.0f64; batch * classes];
    for t in 0..t_max {
        for (c, &s) in counts.iter_mut().zip(output.outer_slice(t)) {
            *c += s as f64;
        }
    }
    let mut step_grad = vec![0.0f32; batch * classes];
    let value = match loss {
        LossKind::RateMse => {
            let norm = (batch * classes) as f64;
            let mut sum = 0.0;
            for b in 0..batch {
                for k in 0..classes {
                    let i = b * classes + k;
                    let rate = counts[i] / t_max as f64;
                    let y = if targets[b] == k { 1.0 } else { 0.0 };
                    sum += (rate - y) * (rate - y);
                    step_grad[i] = (2.0 * (rate - y) / (t_max as f64 * norm)) as f32;
                }
            }
            sum / norm
        }
        LossKind::CountCrossentropy => {
            let mut sum = 0.0;
            for b in 0..batch {
                let row = &counts[b * classes..(b + 1) * classes];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|c| (c - m).exp()).sum();
                sum += -(row[targets[b]] - m - z.ln());
                for k in 0..classes {
                    let p = (row[k] - m).exp() / z;
                    let y = if targets[b] == k { 1.0 } else { 0.0 };
                    step_grad[b * classes + k] = ((p - y) / batch as f64) as f32;
                }
            }
            sum / batch as f64
        }
    };
    let mut grad = Vec::with_capacity(t_max * batch * classes);
    for _ in 0..t_max {
        grad.extend_from_slice(&step_grad);
    }
    Ok((value, Tensor::new(vec![t_max, batch, classes], grad)?))
}

/// Forward with recording, loss and backward in one call.
pub fn loss_gradient(
    model: &Model,
    input: &SpikeTrain,
    targets: &[usize],
    loss: LossKind,
    opts: &BackwardOptions,
) -> Result<(f64, GradSet, Tensor)> {
    let (out, tape) = Tape::record(model, input)?;
    let (value, lg) = loss_and_grad(&out, targets, loss)?;
    let g = backward_with(model, &tape, &lg, opts)?;
    Ok((value, g, out))
}
