//! Discrete-time leaky integrate-and-fire dynamics.
//!
//! Membrane update, one step:
//!
//! ```text
//! subtract reset:  U[t] = beta * (U[t-1] - threshold * S[t-1]) + I[t]
//! zero reset:      U[t] = beta * U[t-1] * (1 - S[t-1])          + I[t]
//! spike:           S[t] = 1 if U[t] >= threshold else 0
//! ```
//!
//! `NeuronState::membrane` always holds the pre-reset potential `U[t]`; the
//! reset is applied lazily at the start of the next step. Gradient code
//! treats the reset term as a constant unless asked otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    #[default]
    Subtract,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    pub beta: f32,
    pub threshold: f32,
    #[serde(default)]
    pub reset_mode: ResetMode,
    /// Reserved; membrane decay is not trained.
    #[serde(default)]
    pub learnable_beta: bool,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            beta: 0.9,
            threshold: 1.0,
            reset_mode: ResetMode::Subtract,
            learnable_beta: false,
        }
    }
}

impl LifParams {
    pub fn new(beta: f32, threshold: f32, reset_mode: ResetMode) -> Result<Self> {
        let p = LifParams {
            beta,
            threshold,
            reset_mode,
            learnable_beta: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0,1), got {}", self.beta)));
        }
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.learnable_beta {
            return Err(Error::Config("learnable beta is not supported".into()));
        }
        Ok(())
    }
}

/// Forward nonlinearity. `Smooth` replaces the Heaviside step by a logistic
/// sigmoid of the given slope; it exists so gradients can be checked against
/// finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Activation {
    #[default]
    Spike,
    Smooth {
        slope: f32,
    },
}

impl Activation {
    pub fn fire(&self, v: f32, threshold: f32) -> f32 {
        match *self {
            Activation::Spike => {
                if v >= threshold {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Smooth { slope } => sigmoid(slope * (v - threshold)),
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    FastSigmoid,
    Rectangular,
    Arctan,
}

/// Bounded stand-in for dS/dU. Peak value `scale` at `v = 0`, symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateFn {
    pub kind: SurrogateKind,
    pub scale: f32,
}

impl Default for SurrogateFn {
    fn default() -> Self {
        SurrogateFn {
            kind: SurrogateKind::FastSigmoid,
            scale: 1.0,
        }
    }
}

impl SurrogateFn {
    pub fn new(kind: SurrogateKind, scale: f32) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("surrogate scale must be positive, got {scale}")));
        }
        Ok(SurrogateFn { kind, scale })
    }

    /// Half-width of the rectangular window.
    pub fn width(&self) -> f32 {
        0.5 / self.scale
    }

    /// `v` is the centred membrane `U - threshold`.
    pub fn derivative(&self, v: f32) -> f32 {
        let s = self.scale;
        match self.kind {
            SurrogateKind::FastSigmoid => {
                let d = 1.0 + s * v.abs();
                s / (d * d)
            }
            SurrogateKind::Rectangular => {
                if v.abs() <= self.width() {
                    s
                } else {
                    0.0
                }
            }
            SurrogateKind::Arctan => {
                let a = std::f32::consts::PI * s * v;
                s / (1.0 + a * a)
            }
        }
    }
}

/// Elementwise surrogate derivative of a pre-centred tensor.
pub fn surrogate_grad(f: &SurrogateFn, v: &Tensor) -> Tensor {
    v.map(|x| f.derivative(x))
}

/// Per-layer state at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    /// Pre-reset membrane potential `U[t]`, `[batch × units]`.
    pub membrane: Tensor,
    /// `S[t]`, `[batch × units]`.
    pub spikes: Tensor,
    /// Low-pass filtered presynaptic input, `[batch × inputs]`.
    pub presyn_trace: Tensor,
    /// Per-unit threshold offset; only the unsupervised rule uses it.
    pub adaptive_offset: Option<Tensor>,
}

impl NeuronState {
    pub fn new(batch: usize, units: usize, inputs: usize) -> Self {
        NeuronState {
            membrane: Tensor::zeros(&[batch, units]),
            spikes: Tensor::zeros(&[batch, units]),
            presyn_trace: Tensor::zeros(&[batch, inputs]),
            adaptive_offset: None,
        }
    }

    pub fn batch(&self) -> usize {
        self.membrane.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.membrane.shape()[1]
    }
}

/// Membrane after applying the pending reset and the leak, before input:
/// `beta * (U - threshold * S)` or `beta * U * (1 - S)`.
pub(crate) fn leaked_membrane(params: &LifParams, membrane: &[f32], spikes: &[f32], out: &mut [f32]) {
    let b = params.beta;
    let th = params.threshold;
    match params.reset_mode {
        ResetMode::Subtract => {
            for ((o, &u), &s) in out.iter_mut().zip(membrane).zip(spikes) {
                *o = b * (u - th * s);
            }
        }
        ResetMode::Zero => {
            for ((o, &u), &s) in out.iter_mut().zip(membrane).zip(spikes) {
                *o = b * u * (1.0 - s);
            }
        }
    }
}

pub fn lif_step(params: &LifParams, state: &NeuronState, input_current: &Tensor) -> Result<NeuronState> {
    lif_step_with(params, Activation::Spike, state, input_current)
}

pub fn lif_step_with(
    params: &LifParams,
    activation: Activation,
    state: &NeuronState,
    input_current: &Tensor,
) -> Result<NeuronState> {
    state.membrane.same_shape(input_current)?;
    input_current.check_finite("input current")?;
    let mut membrane = Tensor::zeros(state.membrane.shape());
    leaked_membrane(params, state.membrane.data(), state.spikes.data(), membrane.data_mut());
    for (u, &i) in membrane.data_mut().iter_mut().zip(input_current.data()) {
        *u += i;
    }
    let threshold = params.threshold;
    let spikes = match &state.adaptive_offset {
        Some(off) => membrane.zip_map(off, |u, a| activation.fire(u, threshold + a))?,
        None => membrane.map(|u| activation.fire(u, threshold)),
    };
    Ok(NeuronState {
        membrane,
        spikes,
        presyn_trace: state.presyn_trace.clone(),
        adaptive_offset: state.adaptive_offset.clone(),
    })
}

/// `trace[t] = decay * trace[t-1] + input[t]`.
pub fn update_presyn_trace(state: &NeuronState, input_spikes: &Tensor, decay: f32) -> Result<NeuronState> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Argument(format!("trace decay must be in [0,1), got {decay}")));
    }
    let mut next = state.clone();
    next.presyn_trace.same_shape(input_spikes)?;
    decay_trace(next.presyn_trace.data_mut(), input_spikes.data(), decay);
    Ok(next)
}

pub(crate) fn decay_trace(trace: &mut [f32], input: &[f32], decay: f32) {
    for (x, &s) in trace.iter_mut().zip(input) {
        *x = decay * *x + s;
    }
}

/// `input[batch×in] × weights[out×in]ᵀ`.
pub fn dense_current(weights: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (out, inp) = weights.dims2()?;
    let (batch, inp2) = input.dims2()?;
    if inp != inp2 {
        return Err(Error::Dimension(format!(
            "weights {:?} do not accept input {:?}",
            weights.shape(),
            input.shape()
        )));
    }
    let wt = weights.transpose()?;
    let mut cur = vec![0.0; batch * out];
    gemm_acc(input.data(), batch, inp, wt.data(), out, &mut cur);
    Tensor::new(vec![batch, out], cur)
}

/// Feedforward LIF layer: `I[t] = input × Wᵀ`, then [`lif_step`].
pub fn layer_forward(weights: &Tensor, params: &LifParams, state: &NeuronState, input: &Tensor) -> Result<NeuronState> {
    let current = dense_current(weights, input)?;
    lif_step(params, state, &current)
}

/// Recurrent LIF layer: the current also receives `S[t-1] × W_recᵀ`.
pub fn recurrent_layer_forward(
    weights: &Tensor,
    recurrent: &Tensor,
    params: &LifParams,
    state: &NeuronState,
    input: &Tensor,
) -> Result<NeuronState> {
    let mut current = dense_current(weights, input)?;
    let rec = dense_current(recurrent, &state.spikes)?;
    current.axpy(1.0, &rec)?;
    lif_step(params, state, &current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::rand_uniform;

    fn scalar_state(u: f32, s: f32) -> NeuronState {
        let mut st = NeuronState::new(1, 1, 1);
        st.membrane.data_mut()[0] = u;
        st.spikes.data_mut()[0] = s;
        st
    }

    fn one(v: f32) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn threshold_equality_fires() {
        let p = LifParams::new(0.0, 1.0, ResetMode::Subtract).unwrap();
        let next = lif_step(&p, &scalar_state(0.0, 0.0), &one(1.0)).unwrap();
        assert_eq!(next.membrane.data(), &[1.0]);
        assert_eq!(next.spikes.data(), &[1.0]);
    }

    #[test]
    fn pure_decay() {
        let p = LifParams::new(0.5, 1.0, ResetMode::Subtract).unwrap();
        let next = lif_step(&p, &scalar_state(0.8, 0.0), &one(0.0)).unwrap();
        assert_eq!(next.membrane.data(), &[0.4]);
        assert_eq!(next.spikes.data(), &[0.0]);
    }

    #[test]
    fn subtract_reset_two_step() {
        // Hand simulation: beta 0.5, fire at U = 1.3, then input 0.2.
        let p = LifParams::new(0.5, 1.0, ResetMode::Subtract).unwrap();
        let s1 = lif_step(&p, &scalar_state(0.0, 0.0), &one(1.3)).unwrap();
        assert_eq!(s1.spikes.data(), &[1.0]);
        let s2 = lif_step(&p, &s1, &one(0.2)).unwrap();
        let expected = 0.5f32 * (1.3 - 1.0) + 0.2;
        assert!((s2.membrane.data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn zero_reset_clears_fired_units() {
        let p = LifParams::new(0.5, 1.0, ResetMode::Zero).unwrap();
        let s1 = lif_step(&p, &scalar_state(0.0, 0.0), &one(1.3)).unwrap();
        let s2 = lif_step(&p, &s1, &one(0.2)).unwrap();
        assert!((s2.membrane.data()[0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = LifParams::default();
        let r = lif_step(&p, &scalar_state(0.0, 0.0), &one(f32::NAN));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn invalid_params() {
        assert!(LifParams::new(1.0, 1.0, ResetMode::Subtract).is_err());
        assert!(LifParams::new(0.5, 0.0, ResetMode::Subtract).is_err());
    }

    #[test]
    fn surrogate_shapes() {
        let fs = SurrogateFn::default();
        assert_eq!(fs.derivative(0.0), 1.0);
        let rect = SurrogateFn::new(SurrogateKind::Rectangular, 2.0).unwrap();
        assert_eq!(rect.derivative(rect.width() + 1e-3), 0.0);
        assert_eq!(rect.derivative(-rect.width() - 1e-3), 0.0);
        assert_eq!(rect.derivative(0.0), 2.0);
    }

    #[test]
    fn arctan_matches_antiderivative() {
        // Antiderivative: arctan(pi*s*v)/pi. Central difference in f64.
        let s = 1.7f64;
        let f = SurrogateFn::new(SurrogateKind::Arctan, s as f32).unwrap();
        let anti = |v: f64| (std::f64::consts::PI * s * v).atan() / std::f64::consts::PI;
        let h = 1e-5;
        for i in -40..=40 {
            let v = i as f64 * 0.05;
            let fd = (anti(v + h) - anti(v - h)) / (2.0 * h);
            assert!((f.derivative(v as f32) as f64 - fd).abs() < 1e-4, "v={v}");
        }
    }

    #[test]
    fn surrogate_bounded_and_symmetric() {
        let mut rng = Rng::new(4);
        for kind in [
            SurrogateKind::FastSigmoid,
            SurrogateKind::Rectangular,
            SurrogateKind::Arctan,
        ] {
            let f = SurrogateFn::new(kind, 0.5 + 2.0 * rng.uniform_f32()).unwrap();
            let v = rand_uniform(&mut rng, &[100_000], -10.0, 10.0).unwrap();
            let g = surrogate_grad(&f, &v);
            let max = g.data().iter().fold(0.0f32, |m, &x| m.max(x));
            assert!(max <= f.scale);
            assert!(g.data().iter().all(|&x| x >= 0.0));
            for &x in v.data().iter().take(1000) {
                assert_eq!(f.derivative(x), f.derivative(-x));
                assert!(f.derivative(x) <= f.derivative(0.0));
            }
        }
    }

    #[test]
    fn trace_examples() {
        let st = NeuronState::new(1, 1, 3);
        let spikes = Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let a = update_presyn_trace(&st, &spikes, 0.0).unwrap();
        let b = update_presyn_trace(&a, &spikes, 0.0).unwrap();
        assert_eq!(b.presyn_trace.data(), spikes.data());

        let mut st = update_presyn_trace(&NeuronState::new(1, 1, 1), &one(1.0), 0.9).unwrap();
        for _ in 0..3 {
            st = update_presyn_trace(&st, &one(0.0), 0.9).unwrap();
        }
        assert!((st.presyn_trace.data()[0] - 0.9f32.powi(3)).abs() < 1e-7);
        assert!(update_presyn_trace(&st, &one(0.0), 1.0).is_err());
    }

    #[test]
    fn trace_equals_explicit_convolution() {
        let mut rng = Rng::new(21);
        let decay = 0.8f32;
        let len = 40;
        let train: Vec<f32> = (0..len).map(|_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 }).collect();
        let mut st = NeuronState::new(1, 1, 1);
        for t in 0..len {
            st = update_presyn_trace(&st, &one(train[t]), decay).unwrap();
            let conv: f64 = (0..=t)
                .map(|k| train[t - k] as f64 * (decay as f64).powi(k as i32))
                .sum();
            assert!((st.presyn_trace.data()[0] as f64 - conv).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_weights_never_spike() {
        let p = LifParams::default();
        let w = Tensor::zeros(&[3, 4]);
        let mut st = NeuronState::new(2, 3, 4);
        let x = Tensor::full(&[2, 4], 1.0);
        for _ in 0..20 {
            st = layer_forward(&w, &p, &st, &x).unwrap();
            assert!(st.spikes.data().iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn one_hot_input_selects_weight_column() {
        let mut rng = Rng::new(2);
        let w = rand_uniform(&mut rng, &[3, 4], -1.0, 1.0).unwrap();
        let x = Tensor::new(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let cur = dense_current(&w, &x).unwrap();
        for j in 0..3 {
            assert_eq!(cur.data()[j], w.at(&[j, 2]));
        }
    }

    #[test]
    fn two_two_one_net_pencil_simulation() {
        // 2-2-1 network, beta 0.5, threshold 1, subtract reset, T = 10,
        // constant input [1, 0]. Scalar simulation written out by hand.
        let p = LifParams::new(0.5, 1.0, ResetMode::Subtract).unwrap();
        let w1 = Tensor::from_rows(&[&[0.6, 0.3], &[0.2, -0.4]]);
        let w2 = Tensor::from_rows(&[&[1.5, 0.5]]);
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let mut h = NeuronState::new(1, 2, 2);
        let mut o = NeuronState::new(1, 1, 2);
        let (mut uh, mut sh) = ([0.0f32; 2], [0.0f32; 2]);
        let (mut uo, mut so) = (0.0f32, 0.0f32);
        for _ in 0..10 {
            h = layer_forward(&w1, &p, &h, &x).unwrap();
            o = layer_forward(&w2, &p, &o, &h.spikes).unwrap();
            // Hidden units: currents 0.6 and 0.2.
            for (j, cur) in [0.6f32, 0.2].into_iter().enumerate() {
                uh[j] = 0.5 * (uh[j] - sh[j]) + cur;
                sh[j] = if uh[j] >= 1.0 { 1.0 } else { 0.0 };
            }
            uo = 0.5 * (uo - so) + 1.5 * sh[0] + 0.5 * sh[1];
            so = if uo >= 1.0 { 1.0 } else { 0.0 };
            assert_eq!(h.membrane.data(), &uh);
            assert_eq!(h.spikes.data(), &sh);
            assert_eq!(o.membrane.data(), &[uo]);
            assert_eq!(o.spikes.data(), &[so]);
        }
        // Hidden unit 0 charges 0.6, 0.9, 1.05 and fires on step 3.
        assert_eq!(sh, [0.0, 0.0]);
    }

    #[test]
    fn leak_monotonicity() {
        let mut rng = Rng::new(8);
        let p = LifParams::new(0.85, 1e6, ResetMode::Subtract).unwrap();
        let mut st = NeuronState::new(1, 16, 1);
        st.membrane = rand_uniform(&mut rng, &[1, 16], -5.0, 5.0).unwrap();
        let zero = Tensor::zeros(&[1, 16]);
        for _ in 0..30 {
            let next = lif_step(&p, &st, &zero).unwrap();
            for (a, b) in next.membrane.data().iter().zip(st.membrane.data()) {
                assert!(a.abs() <= b.abs());
            }
            st = next;
        }
    }

    #[test]
    fn first_spike_latency_closed_form() {
        // From rest with constant input I: U[t] = I (1 - beta^(t+1)) / (1 - beta).
        for &(beta, input) in &[(0.9f32, 0.15f32), (0.5, 0.6), (0.8, 0.25), (0.95, 0.06)] {
            let p = LifParams::new(beta, 1.0, ResetMode::Subtract).unwrap();
            let (b, i) = (beta as f64, input as f64);
            let closed = ((1.0 - (1.0 - b) / i).ln() / b.ln()).ceil() as usize - 1;
            let mut st = scalar_state(0.0, 0.0);
            let mut fired = None;
            for t in 0..500 {
                st = lif_step(&p, &st, &one(input)).unwrap();
                if st.spikes.data()[0] == 1.0 {
                    fired = Some(t);
                    break;
                }
            }
            assert_eq!(fired, Some(closed), "beta {beta} input {input}");
        }
    }
}
