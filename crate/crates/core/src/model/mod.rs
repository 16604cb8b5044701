//! Benchmark network library: feedforward, recurrent and convolutional LIF
//! stacks sharing one state layout.

mod checkpoint;
pub mod conv;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use conv::ConvGeometry;

use crate::encoding::SpikeTrain;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::snn::{leaked_membrane, Activation, LifParams, NeuronState};
use crate::tensor::{gemm_acc, rand_uniform, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fc,
    Rc,
    Conv,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Fc => "fc",
            ModelKind::Rc => "rc",
            ModelKind::Conv => "conv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default = "default_pool")]
    pub pool: usize,
}

fn default_pool() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    /// Input image as `[channels, height, width]`.
    pub input: [usize; 3],
    #[serde(default = "default_stages")]
    pub stages: Vec<ConvStage>,
}

/// 12C5-MP2-32C5-MP2.
fn default_stages() -> Vec<ConvStage> {
    vec![
        ConvStage {
            channels: 12,
            kernel: 5,
            pool: 2,
        },
        ConvStage {
            channels: 32,
            kernel: 5,
            pool: 2,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: ModelKind,
    /// `[input, hidden..., output]`. For conv models the first entry is the
    /// flattened image size and the rest describe the dense head.
    pub layer_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
    #[serde(default)]
    pub lif: LifParams,
    #[serde(default)]
    pub record_history: bool,
}

impl ModelSpec {
    pub fn fc(layer_sizes: &[usize]) -> Self {
        ModelSpec {
            name: None,
            kind: ModelKind::Fc,
            layer_sizes: layer_sizes.to_vec(),
            conv: None,
            lif: LifParams::default(),
            record_history: false,
        }
    }

    pub fn rc(layer_sizes: &[usize]) -> Self {
        ModelSpec {
            kind: ModelKind::Rc,
            ..Self::fc(layer_sizes)
        }
    }

    /// The fixed 12C5-MP2-32C5-MP2-FC pattern for an image of the given shape.
    pub fn conv(input: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            name: None,
            kind: ModelKind::Conv,
            layer_sizes: vec![input.iter().product(), classes],
            conv: Some(ConvSpec {
                input,
                stages: default_stages(),
            }),
            lif: LifParams::default(),
            record_history: false,
        }
    }

    pub fn with_lif(mut self, lif: LifParams) -> Self {
        self.lif = lif;
        self
    }

    pub fn with_history(mut self, on: bool) -> Self {
        self.record_history = on;
        self
    }

    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let sizes = self
            .layer_sizes
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("-");
        match (&self.kind, &self.conv) {
            (ModelKind::Conv, Some(c)) => {
                let stages: Vec<String> = c
                    .stages
                    .iter()
                    .map(|s| format!("{}c{}-mp{}", s.channels, s.kernel, s.pool))
                    .collect();
                format!("conv-{}-{}", stages.join("-"), sizes)
            }
            _ => format!("{}-{}", self.kind.as_str(), sizes),
        }
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes.first().copied().unwrap_or(0)
    }

    pub fn output_size(&self) -> usize {
        self.layer_sizes.last().copied().unwrap_or(0)
    }

    /// Number of hidden LIF layers between the input and the output layer.
    pub fn hidden_layers(&self) -> usize {
        let dense_hidden = self.layer_sizes.len().saturating_sub(2);
        match self.kind {
            ModelKind::Conv => dense_hidden + self.conv.as_ref().map_or(0, |c| c.stages.len()),
            _ => dense_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("layer_sizes needs at least input and output".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        match self.kind {
            ModelKind::Conv => {
                let c = self
                    .conv
                    .as_ref()
                    .ok_or_else(|| Error::Config("conv model needs a `conv` section".into()))?;
                if c.stages.len() != 2 {
                    return Err(Error::Config(format!(
                        "conv models use exactly two conv+pool stages, got {}",
                        c.stages.len()
                    )));
                }
                if c.input.iter().product::<usize>() != self.layer_sizes[0] {
                    return Err(Error::Config(format!(
                        "conv input {:?} does not flatten to {}",
                        c.input, self.layer_sizes[0]
                    )));
                }
                self.conv_geometries()?;
            }
            _ => {
                if self.conv.is_some() {
                    return Err(Error::Config("`conv` section only applies to conv models".into()));
                }
            }
        }
        Ok(())
    }

    fn conv_geometries(&self) -> Result<Vec<ConvGeometry>> {
        let Some(c) = &self.conv else {
            return Ok(Vec::new());
        };
        let [mut ch, mut h, mut w] = c.input;
        let mut out = Vec::new();
        for s in &c.stages {
            let g = ConvGeometry {
                in_channels: ch,
                height: h,
                width: w,
                out_channels: s.channels,
                kernel: s.kernel,
                pool: s.pool,
            };
            g.validate()?;
            (h, w) = g.pooled_hw();
            ch = s.channels;
            out.push(g);
        }
        Ok(out)
    }
}

/// How a layer turns its input into synaptic current.
#[derive(Debug, Clone, PartialEq)]
pub enum Synapse {
    /// Weights `[out × in]`.
    Dense(Tensor),
    /// Weights `[C' × C × k × k]`, followed by max-pooling.
    Conv { geometry: ConvGeometry, weights: Tensor },
}

impl Synapse {
    pub fn weights(&self) -> &Tensor {
        match self {
            Synapse::Dense(w) => w,
            Synapse::Conv { weights, .. } => weights,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        match self {
            Synapse::Dense(w) => w,
            Synapse::Conv { weights, .. } => weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub synapse: Synapse,
    /// Recurrent weights `[units × units]` with a structurally zero diagonal.
    pub recurrent: Option<Tensor>,
    pub inputs: usize,
    pub units: usize,
}

impl Layer {
    pub fn dense_weights(&self) -> Option<&Tensor> {
        match &self.synapse {
            Synapse::Dense(w) => Some(w),
            Synapse::Conv { .. } => None,
        }
    }
}

/// Everything one layer saw and produced at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub t: usize,
    pub layer: usize,
    /// Presynaptic input `[batch × inputs]`.
    pub input: Tensor,
    /// `S[t-1]` of this layer, for recurrent layers.
    pub rec_input: Option<Tensor>,
    /// Pre-reset membrane `U[t]`.
    pub membrane: Tensor,
    pub spikes: Tensor,
    /// Max-pool routes for conv layers.
    pub pool_index: Option<Vec<u32>>,
}

impl LayerRecord {
    pub fn size_bytes(&self) -> usize {
        self.input.size_bytes()
            + self.rec_input.as_ref().map_or(0, |r| r.size_bytes())
            + self.membrane.size_bytes()
            + self.spikes.size_bytes()
            + self.pool_index.as_ref().map_or(0, |p| p.len() * 4)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivityCount {
    pub ones: u64,
    pub total: u64,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub layers: Vec<NeuronState>,
    /// `history[t][layer]`, present only when `ModelSpec::record_history` is set.
    pub history: Option<Vec<Vec<LayerRecord>>>,
    pub activity: Vec<ActivityCount>,
    pub elapsed: usize,
}

/// Per-sequence cache of transposed dense weights.
#[derive(Debug, Clone)]
pub struct Plan {
    transposed: Vec<Option<Tensor>>,
    recurrent_t: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    activation: Activation,
}

impl Model {
    /// Dense and conv weights uniform in `[-k, k)`, `k = 1/sqrt(fan_in)`,
    /// drawn layer by layer; recurrent matrices start at zero.
    pub fn build(spec: ModelSpec, rng: &mut Rng) -> Result<Model> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut inputs = spec.layer_sizes[0];
        for g in spec.conv_geometries()? {
            let fan_in = (g.in_channels * g.kernel * g.kernel) as f32;
            let k = 1.0 / fan_in.sqrt();
            let weights = rand_uniform(rng, &g.weight_shape(), -k, k)?;
            layers.push(Layer {
                synapse: Synapse::Conv { geometry: g, weights },
                recurrent: None,
                inputs,
                units: g.outputs(),
            });
            inputs = g.outputs();
        }
        let dense = &spec.layer_sizes[1..];
        for (i, &units) in dense.iter().enumerate() {
            let k = 1.0 / (inputs as f32).sqrt();
            let w = rand_uniform(rng, &[units, inputs], -k, k)?;
            let is_hidden = i + 1 < dense.len();
            let recurrent = (spec.kind == ModelKind::Rc && is_hidden).then(|| Tensor::zeros(&[units, units]));
            layers.push(Layer {
                synapse: Synapse::Dense(w),
                recurrent,
                inputs,
                units,
            });
            inputs = units;
        }
        Ok(Model {
            spec,
            layers,
            activation: Activation::Spike,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn name(&self) -> String {
        self.spec.display_name()
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn lif(&self) -> &LifParams {
        &self.spec.lif
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size()
    }

    pub fn output_size(&self) -> usize {
        self.spec.output_size()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn set_activation(&mut self, activation: Activation) {
        self.activation = activation;
    }

    pub fn set_record_history(&mut self, on: bool) {
        self.spec.record_history = on;
    }

    /// Trainable tensors in a fixed order: per layer, synapse then recurrent.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.synapse.weights());
            if let Some(r) = &l.recurrent {
                out.push(r);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.synapse.weights_mut());
            if let Some(r) = &mut l.recurrent {
                out.push(r);
            }
        }
        out
    }

    /// Index into [`Model::params`] of each layer's synapse and recurrent tensor.
    pub fn param_slots(&self) -> Vec<(usize, Option<usize>)> {
        let mut next = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = next;
                next += 1;
                let r = l.recurrent.as_ref().map(|_| {
                    next += 1;
                    next - 1
                });
                (w, r)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_like_params(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// Adds `deltas` (one per parameter) and restores structural zeros.
    pub fn apply_deltas(&mut self, deltas: &[Tensor]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != deltas.len() {
            return Err(Error::Dimension(format!(
                "{} deltas for {} parameters",
                deltas.len(),
                params.len()
            )));
        }
        for (p, d) in params.into_iter().zip(deltas) {
            p.axpy(1.0, d)?;
            p.check_finite("updated weights")?;
        }
        self.enforce_structure();
        Ok(())
    }

    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} tensors for {} parameters",
                values.len(),
                params.len()
            )));
        }
        for (p, v) in params.into_iter().zip(values) {
            p.same_shape(v)?;
            *p = v.clone();
        }
        self.enforce_structure();
        Ok(())
    }

    pub(crate) fn enforce_structure(&mut self) {
        for l in &mut self.layers {
            if let Some(r) = &mut l.recurrent {
                let n = l.units;
                for i in 0..n {
                    r.data_mut()[i * n + i] = 0.0;
                }
            }
        }
    }

    pub fn plan(&self) -> Plan {
        Plan {
            transposed: self
                .layers
                .iter()
                .map(|l| l.dense_weights().map(|w| w.transpose().expect("dense weights are 2-d")))
                .collect(),
            recurrent_t: self
                .layers
                .iter()
                .map(|l| {
                    l.recurrent
                        .as_ref()
                        .map(|r| r.transpose().expect("recurrent weights are 2-d"))
                })
                .collect(),
        }
    }

    pub fn init_state(&self, batch: usize) -> ModelState {
        ModelState {
            layers: self
                .layers
                .iter()
                .map(|l| NeuronState::new(batch, l.units, l.inputs))
                .collect(),
            history: self.spec.record_history.then(Vec::new),
            activity: vec![ActivityCount::default(); self.layers.len()],
            elapsed: 0,
        }
    }

    /// Synaptic current of layer `l` for presynaptic `input`, plus the
    /// recurrent contribution from the layer's previous spikes.
    pub fn layer_current(
        &self,
        plan: &Plan,
        l: usize,
        input: &Tensor,
        prev_spikes: &Tensor,
    ) -> Result<(Tensor, Option<Vec<u32>>)> {
        let layer = &self.layers[l];
        let (batch, n_in) = input.dims2()?;
        if n_in != layer.inputs {
            return Err(Error::Dimension(format!(
                "layer {l} expects {} inputs, got {n_in}",
                layer.inputs
            )));
        }
        let (mut current, pool) = match &layer.synapse {
            Synapse::Dense(_) => {
                let wt = plan.transposed[l].as_ref().expect("plan matches model");
                let mut cur = vec![0.0f32; batch * layer.units];
                gemm_acc(input.data(), batch, n_in, wt.data(), layer.units, &mut cur);
                (Tensor::new(vec![batch, layer.units], cur)?, None)
            }
            Synapse::Conv { geometry, weights } => {
                let (cur, idx) = conv::conv_current(geometry, weights, input)?;
                (cur, Some(idx))
            }
        };
        if let Some(rt) = &plan.recurrent_t[l] {
            gemm_acc(
                prev_spikes.data(),
                batch,
                layer.units,
                rt.data(),
                layer.units,
                current.data_mut(),
            );
        }
        Ok((current, pool))
    }

    /// Advances every layer by one timestep and returns what each layer saw.
    pub fn step(&self, plan: &Plan, state: &mut ModelState, x: &Tensor) -> Result<Vec<LayerRecord>> {
        x.check_finite("model input")?;
        let t = state.elapsed;
        let lif = self.spec.lif;
        let mut records = Vec::with_capacity(self.layers.len());
        let mut input = x.clone();
        for l in 0..self.layers.len() {
            let ns = &mut state.layers[l];
            let (current, pool_index) = self.layer_current(plan, l, &input, &ns.spikes)?;
            let rec_input = self.layers[l].recurrent.as_ref().map(|_| ns.spikes.clone());
            let mut membrane = Tensor::zeros(ns.membrane.shape());
            leaked_membrane(&lif, ns.membrane.data(), ns.spikes.data(), membrane.data_mut());
            membrane.axpy(1.0, &current)?;
            membrane.check_finite("membrane")?;
            let act = self.activation;
            let spikes = membrane.map(|u| act.fire(u, lif.threshold));
            let ones = spikes.data().iter().filter(|&&s| s != 0.0).count() as u64;
            state.activity[l].ones += ones;
            state.activity[l].total += spikes.len() as u64;
            ns.membrane = membrane.clone();
            ns.spikes = spikes.clone();
            records.push(LayerRecord {
                t,
                layer: l,
                input: std::mem::replace(&mut input, spikes.clone()),
                rec_input,
                membrane,
                spikes,
                pool_index,
            });
        }
        state.elapsed += 1;
        if let Some(h) = state.history.as_mut() {
            h.push(records.clone());
        }
        Ok(records)
    }

    /// Runs a whole sequence from a fresh state. Returns output spikes
    /// `[T × batch × out]` and the final state.
    pub fn forward(&self, input: &SpikeTrain) -> Result<(Tensor, ModelState)> {
        if input.units() != self.input_size() {
            return Err(Error::Dimension(format!(
                "model {} expects {} input units, got {}",
                self.name(),
                self.input_size(),
                input.units()
            )));
        }
        let plan = self.plan();
        let mut state = self.init_state(input.batch());
        let mut out = Vec::with_capacity(input.timesteps());
        for t in 0..input.timesteps() {
            let mut rec = self.step(&plan, &mut state, &input.at(t))?;
            out.push(rec.pop().expect("model has layers").spikes);
        }
        Ok((Tensor::stack(&out)?, state))
    }
}

/// Fraction of zero entries across every spike tensor the state has seen.
/// A state that has not run yet counts as silent.
pub fn spike_sparsity(state: &ModelState) -> f64 {
    let (ones, total) = state
        .activity
        .iter()
        .fold((0u64, 0u64), |(o, t), a| (o + a.ones, t + a.total));
    if total == 0 {
        1.0
    } else {
        1.0 - ones as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{encode, EncoderKind, EncoderSpec};

    fn random_input(rng: &mut Rng, t: usize, b: usize, d: usize) -> SpikeTrain {
        let feats = rand_uniform(rng, &[b, d], 0.0, 1.0).unwrap();
        let spec = EncoderSpec::new(EncoderKind::PoissonRate, t, 1.0).unwrap();
        encode(&spec, &feats, rng).unwrap()
    }

    #[test]
    fn fig6_parameter_counts() {
        let mut rng = Rng::new(0);
        let fc = Model::build(ModelSpec::fc(&[784, 256, 10]), &mut rng).unwrap();
        assert_eq!(fc.param_count(), 784 * 256 + 256 * 10);
        assert_eq!(fc.param_count(), 203_264);
        let rc = Model::build(ModelSpec::rc(&[700, 512, 20]), &mut rng).unwrap();
        assert_eq!(rc.param_count(), 700 * 512 + 512 * 512 + 512 * 20);
        assert_eq!(rc.layers()[0].recurrent.as_ref().unwrap().shape(), &[512, 512]);
        assert!(rc.layers()[1].recurrent.is_none());
        for sizes in [
            vec![784, 800, 10],
            vec![3072, 1024, 512, 10],
            vec![2312, 512, 10],
            vec![700, 512, 20],
        ] {
            let m = Model::build(ModelSpec::fc(&sizes), &mut rng).unwrap();
            let expect: usize = sizes.windows(2).map(|w| w[0] * w[1]).sum();
            assert_eq!(m.param_count(), expect);
            let r = Model::build(ModelSpec::rc(&sizes), &mut rng).unwrap();
            let hidden_sq: usize = sizes[1..sizes.len() - 1].iter().map(|h| h * h).sum();
            assert_eq!(r.param_count(), expect + hidden_sq);
        }
        let conv = Model::build(ModelSpec::conv([1, 28, 28], 10), &mut rng).unwrap();
        let expect = 12 * 25 + 32 * 12 * 25 + 32 * 4 * 4 * 10;
        assert_eq!(conv.param_count(), expect);
    }

    #[test]
    fn init_bounds_and_determinism() {
        let spec = ModelSpec::rc(&[20, 8, 3]);
        let a = Model::build(spec.clone(), &mut Rng::new(4)).unwrap();
        let b = Model::build(spec, &mut Rng::new(4)).unwrap();
        assert_eq!(a.params(), b.params());
        let k = 1.0 / 20f32.sqrt();
        assert!(a.params()[0].data().iter().all(|v| v.abs() <= k));
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            Model::build(ModelSpec::fc(&[5]), &mut rng),
            Err(Error::Config(_))
        ));
        let mut c = ModelSpec::conv([1, 28, 28], 10);
        c.conv.as_mut().unwrap().stages.pop();
        assert!(Model::build(c, &mut rng).is_err());
        let tiny = ModelSpec::conv([1, 6, 6], 10);
        assert!(Model::build(tiny, &mut rng).is_err());
    }

    #[test]
    fn silent_input_silent_output() {
        let m = Model::build(ModelSpec::fc(&[6, 4, 2]), &mut Rng::new(2)).unwrap();
        let (out, state) = m.forward(&SpikeTrain::zeros(7, 3, 6)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(spike_sparsity(&state), 1.0);
    }

    #[test]
    fn single_step_is_layer_chain() {
        let mut rng = Rng::new(6);
        let m = Model::build(ModelSpec::fc(&[10, 7, 3]), &mut rng).unwrap();
        let x = random_input(&mut rng, 1, 2, 10);
        let (out, _) = m.forward(&x).unwrap();
        let lif = *m.lif();
        let h = crate::snn::layer_forward(
            m.layers()[0].dense_weights().unwrap(),
            &lif,
            &NeuronState::new(2, 7, 10),
            &x.at(0),
        )
        .unwrap();
        let o = crate::snn::layer_forward(
            m.layers()[1].dense_weights().unwrap(),
            &lif,
            &NeuronState::new(2, 3, 7),
            &h.spikes,
        )
        .unwrap();
        assert_eq!(out.outer(0), o.spikes);
    }

    #[test]
    fn history_replay_reproduces_outputs() {
        let mut rng = Rng::new(8);
        let mut m = Model::build(ModelSpec::rc(&[12, 9, 4]).with_history(true), &mut rng).unwrap();
        let mut params: Vec<Tensor> = m.params().into_iter().cloned().collect();
        params[1] = rand_uniform(&mut rng, &[9, 9], -0.5, 0.5).unwrap();
        m.set_params(&params).unwrap();
        let x = random_input(&mut rng, 15, 3, 12);
        let (out, state) = m.forward(&x).unwrap();
        let hist = state.history.as_ref().unwrap();
        assert_eq!(hist.len(), 15);
        // Replay each layer in isolation from its recorded input.
        let lif = *m.lif();
        for l in 0..2 {
            let layer = &m.layers()[l];
            let mut ns = NeuronState::new(3, layer.units, layer.inputs);
            for (t, recs) in hist.iter().enumerate() {
                ns = match &layer.recurrent {
                    Some(r) => crate::snn::recurrent_layer_forward(
                        layer.dense_weights().unwrap(),
                        r,
                        &lif,
                        &ns,
                        &recs[l].input,
                    ),
                    None => crate::snn::layer_forward(layer.dense_weights().unwrap(), &lif, &ns, &recs[l].input),
                }
                .unwrap();
                assert_eq!(ns.spikes, recs[l].spikes);
                if l == 1 {
                    assert_eq!(ns.spikes, out.outer(t));
                }
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = Rng::new(10);
        let m = Model::build(ModelSpec::fc(&[16, 8, 4]), &mut rng).unwrap();
        let x = random_input(&mut rng, 20, 2, 16);
        let (a, _) = m.forward(&x).unwrap();
        let (b, _) = m.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_off_keeps_no_records() {
        let m = Model::build(ModelSpec::fc(&[4, 2]), &mut Rng::new(1)).unwrap();
        let (_, st) = m.forward(&SpikeTrain::zeros(5, 1, 4)).unwrap();
        assert!(st.history.is_none());
    }

    #[test]
    fn input_mismatch() {
        let m = Model::build(ModelSpec::fc(&[4, 2]), &mut Rng::new(1)).unwrap();
        assert!(matches!(
            m.forward(&SpikeTrain::zeros(5, 1, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sparsity_counts() {
        let mut st = Model::build(ModelSpec::fc(&[4, 2]), &mut Rng::new(1))
            .unwrap()
            .init_state(1);
        st.activity[0] = ActivityCount { ones: 10, total: 10 };
        assert_eq!(spike_sparsity(&st), 0.0);
        st.activity[0] = ActivityCount { ones: 3, total: 12 };
        assert!((spike_sparsity(&st) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sparsity_matches_manual_count() {
        let mut rng = Rng::new(13);
        let m = Model::build(ModelSpec::fc(&[10, 6, 3]).with_history(true), &mut rng).unwrap();
        let x = random_input(&mut rng, 12, 2, 10);
        let (_, st) = m.forward(&x).unwrap();
        let mut zeros = 0usize;
        let mut total = 0usize;
        for recs in st.history.as_ref().unwrap() {
            for r in recs {
                zeros += r.spikes.data().iter().filter(|&&s| s == 0.0).count();
                total += r.spikes.len();
            }
        }
        assert!((spike_sparsity(&st) - zeros as f64 / total as f64).abs() < 1e-12);
    }

    #[test]
    fn conv_model_runs() {
        let mut rng = Rng::new(3);
        let mut spec = ModelSpec::conv([1, 12, 12], 4);
        spec.conv.as_mut().unwrap().stages = vec![
            ConvStage {
                channels: 3,
                kernel: 3,
                pool: 2,
            },
            ConvStage {
                channels: 4,
                kernel: 3,
                pool: 2,
            },
        ];
        let m = Model::build(spec, &mut rng).unwrap();
        assert_eq!(m.layers()[0].units, 3 * 5 * 5);
        assert_eq!(m.layers()[1].units, 4 * 1 * 1);
        let x = random_input(&mut rng, 4, 2, 144);
        let (out, _) = m.forward(&x).unwrap();
        assert_eq!(out.shape(), &[4, 2, 4]);
    }
}
