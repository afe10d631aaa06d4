//! Fixed-topology MLP with exact reverse-mode gradients.
//!
//! Every linear layer except the last is followed by a ReLU; the last layer
//! produces logits that go through a softmax. Layers `[0, encoder_depth)` form
//! the encoder `g`, the remaining layers the classification head `c`.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`.

use rand::distr::{Distribution, Uniform};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Dropout is only ever applied to the outputs of the first this-many layers.
pub const DROPOUT_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut rng::Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            biases: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.biases.clone();
        for (o, row) in self.weights.chunks_exact(self.in_dim).enumerate() {
            out[o] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }
}

/// Forward-pass mode. `Train` carries the seed of the dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train(u64),
}

/// Which layers receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    /// Layers `[encoder_depth, L)`.
    HeadOnly,
    /// Only the final layer.
    LastLayer,
}

impl Scope {
    pub fn first_layer(self, model: &Model) -> usize {
        match self {
            Scope::All => 0,
            Scope::HeadOnly => model.encoder_depth,
            Scope::LastLayer => model.num_layers() - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
    encoder_depth: usize,
    dropout_rate: f64,
}

/// Intermediates of one forward pass, starting at layer `start_layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub start_layer: usize,
    /// `inputs[i]` is the input of layer `start_layer + i`, after ReLU and dropout.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations of each traced layer; the last entry equals `logits`.
    pub pre_activations: Vec<Vec<f64>>,
    /// Inverted-dropout scale factors applied to the output of each traced layer.
    pub dropout_masks: Vec<Option<Vec<f64>>>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ForwardTrace {
    /// Input of layer `layer` (global index), i.e. the activation after layer `layer - 1`.
    pub fn layer_input(&self, layer: usize) -> Option<&[f64]> {
        layer
            .checked_sub(self.start_layer)
            .and_then(|i| self.inputs.get(i))
            .map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Parameter gradients for layers `[start, L)` plus the gradient with respect
/// to the input of layer `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub start: usize,
    pub layers: Vec<DenseGrad>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &Model, scope: Scope) -> Self {
        let start = scope.first_layer(model);
        let layers = model.layers[start..]
            .iter()
            .map(|l| DenseGrad {
                weights: vec![0.0; l.weights.len()],
                biases: vec![0.0; l.biases.len()],
            })
            .collect();
        Self {
            start,
            layers,
            input: vec![0.0; model.layers[start].in_dim],
        }
    }

    /// `self += scale * other`. Both must cover the same layers.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.start, other.start, "gradient scopes differ");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(&mut a.weights, &b.weights, scale);
            axpy(&mut a.biases, &b.biases, scale);
        }
        axpy(&mut self.input, &other.input, scale);
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|v| *v *= s);
        }
        self.input.iter_mut().for_each(|v| *v *= s);
    }

    /// Gradient block of layer `layer` (global index), if in scope.
    pub fn layer(&self, layer: usize) -> Option<&DenseGrad> {
        layer.checked_sub(self.start).and_then(|i| self.layers.get(i))
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Glorot-initialized model drawn from the `init` stream of `seed`.
    pub fn new(layer_dims: &[usize], encoder_depth: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        validate_dims(layer_dims, encoder_depth, dropout_rate)?;
        let mut rng = rng::stream(seed, rng::INIT);
        let layers = layer_dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            encoder_depth,
            dropout_rate,
        })
    }

    pub fn zeros(layer_dims: &[usize], encoder_depth: usize, dropout_rate: f64) -> Result<Self> {
        validate_dims(layer_dims, encoder_depth, dropout_rate)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers: layer_dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            encoder_depth,
            dropout_rate,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, encoder_depth: usize, dropout_rate: f64) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::config("model needs at least one layer"))?;
        let mut dims = vec![first.in_dim];
        for l in &layers {
            if l.in_dim != *dims.last().unwrap() {
                return Err(Error::Shape {
                    expected: *dims.last().unwrap(),
                    actual: l.in_dim,
                });
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.biases.len() != l.out_dim {
                return Err(Error::config("layer parameter lengths do not match its dimensions"));
            }
            dims.push(l.out_dim);
        }
        validate_dims(&dims, encoder_depth, dropout_rate)?;
        let model = Self {
            layer_dims: dims,
            layers,
            encoder_depth,
            dropout_rate,
        };
        if !model.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn encoder_depth(&self) -> usize {
        self.encoder_depth
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        validate_dims(&self.layer_dims, self.encoder_depth, rate)?;
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Width of the representation `z`.
    pub fn representation_dim(&self) -> usize {
        self.layer_dims[self.encoder_depth]
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// Re-draws layers `[from, L)` with Glorot init from `seed`.
    pub fn reinitialize_from(&mut self, from: usize, seed: u64) {
        let mut rng = rng::stream(seed, rng::INIT);
        for layer in &mut self.layers[from..] {
            *layer = Dense::glorot(layer.in_dim, layer.out_dim, &mut rng);
        }
    }

    /// Parameters of the layers before `upto` are bit-identical to `other`'s.
    pub fn same_layers_before(&self, other: &Model, upto: usize) -> bool {
        self.layer_dims == other.layer_dims
            && self.layers[..upto]
                .iter()
                .zip(&other.layers[..upto])
                .all(|(a, b)| {
                    a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits())
                        && a.biases.iter().zip(&b.biases).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    pub fn forward(&self, x: &[f64], mode: Mode) -> Result<ForwardTrace> {
        self.forward_from(0, x, mode)
    }

    /// Runs layers `[start, L)` on `input`, which must have width `layer_dims[start]`.
    pub fn forward_from(&self, start: usize, input: &[f64], mode: Mode) -> Result<ForwardTrace> {
        if start >= self.layers.len() {
            return Err(Error::config(format!("start layer {start} out of range")));
        }
        if input.len() != self.layer_dims[start] {
            return Err(Error::Shape {
                expected: self.layer_dims[start],
                actual: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }

        let mut dropout_rng = match mode {
            Mode::Train(seed) if self.dropout_rate > 0.0 => Some(rng::from_seed(seed)),
            _ => None,
        };
        let last = self.layers.len() - 1;
        let n = self.layers.len() - start;
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut dropout_masks = Vec::with_capacity(n);
        let mut current = input.to_vec();

        for l in start..=last {
            let pre = self.layers[l].affine(&current);
            inputs.push(current);
            if l == last {
                dropout_masks.push(None);
                current = pre.clone();
                pre_activations.push(pre);
                break;
            }
            let mut act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let mask = match dropout_rng.as_mut() {
                Some(r) if l < DROPOUT_LAYERS => {
                    let keep = 1.0 - self.dropout_rate;
                    let mask: Vec<f64> = (0..act.len())
                        .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    act.iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
                    Some(mask)
                }
                _ => None,
            };
            dropout_masks.push(mask);
            pre_activations.push(pre);
            current = act;
        }

        let probabilities = softmax(&current);
        Ok(ForwardTrace {
            start_layer: start,
            inputs,
            pre_activations,
            dropout_masks,
            logits: current,
            probabilities,
        })
    }

    /// Representation `z = g(x)`, eval mode.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        let mut current = x.to_vec();
        for layer in &self.layers[..self.encoder_depth] {
            current = layer.affine(&current).into_iter().map(|v| v.max(0.0)).collect();
        }
        Ok(current)
    }

    /// Softmax output of the head `c(z)`, eval mode.
    pub fn head_forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_from(self.encoder_depth, z, Mode::Eval)?.probabilities)
    }

    pub fn head_trace(&self, z: &[f64], mode: Mode) -> Result<ForwardTrace> {
        self.forward_from(self.encoder_depth, z, mode)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval)?.probabilities)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    pub fn backward(&self, trace: &ForwardTrace, d_logits: &[f64], scope: Scope) -> Result<Gradients> {
        self.backward_injected(trace, d_logits, scope, None)
    }

    /// Backpropagates `d_logits`; `inject = (layer, grad)` adds an extra
    /// upstream gradient at the input of `layer` (e.g. from a second network
    /// reading the representation).
    pub fn backward_injected(
        &self,
        trace: &ForwardTrace,
        d_logits: &[f64],
        scope: Scope,
        inject: Option<(usize, &[f64])>,
    ) -> Result<Gradients> {
        let first = scope.first_layer(self);
        self.check_trace(trace, first)?;
        if d_logits.len() != self.num_classes() {
            return Err(Error::Shape {
                expected: self.num_classes(),
                actual: d_logits.len(),
            });
        }
        if let Some((layer, g)) = inject {
            if layer <= first || layer >= self.layers.len() || g.len() != self.layer_dims[layer] {
                return Err(Error::config(format!("cannot inject gradient at layer {layer}")));
            }
        }

        let mut grads = Gradients::zeros(self, scope);
        let mut delta = d_logits.to_vec();
        for l in (first..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let i = l - trace.start_layer;
            let input = &trace.inputs[i];
            let g = &mut grads.layers[l - first];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                axpy(row, input, d);
            }
            let mut d_input = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                axpy(&mut d_input, &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim], d);
            }
            if let Some((at, extra)) = inject {
                if at == l {
                    axpy(&mut d_input, extra, 1.0);
                }
            }
            if l == first {
                grads.input = d_input;
                break;
            }
            // Through dropout and ReLU of layer l - 1.
            let prev = i - 1;
            let pre = &trace.pre_activations[prev];
            let mask = trace.dropout_masks[prev].as_deref();
            delta = d_input
                .iter()
                .enumerate()
                .map(|(k, &d)| {
                    let m = mask.map_or(1.0, |m| m[k]);
                    if pre[k] > 0.0 {
                        d * m
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        Ok(grads)
    }

    fn check_trace(&self, trace: &ForwardTrace, first: usize) -> Result<()> {
        let n = self.layers.len();
        if trace.start_layer > first {
            return Err(Error::StaleTrace(format!(
                "trace starts at layer {} but gradients are requested from layer {first}",
                trace.start_layer
            )));
        }
        let traced = n - trace.start_layer;
        if trace.inputs.len() != traced || trace.pre_activations.len() != traced || trace.dropout_masks.len() != traced {
            return Err(Error::StaleTrace("layer count differs".into()));
        }
        for (i, l) in (trace.start_layer..n).enumerate() {
            if trace.inputs[i].len() != self.layer_dims[l] || trace.pre_activations[i].len() != self.layer_dims[l + 1] {
                return Err(Error::StaleTrace(format!("widths differ at layer {l}")));
            }
        }
        Ok(())
    }
}

fn validate_dims(layer_dims: &[usize], encoder_depth: usize, dropout_rate: f64) -> Result<()> {
    if layer_dims.len() < 3 {
        return Err(Error::config("need at least one encoder layer and one head layer"));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::config("layer widths must be positive"));
    }
    let n_layers = layer_dims.len() - 1;
    if encoder_depth == 0 || encoder_depth >= n_layers {
        return Err(Error::config(format!(
            "encoder_depth must be in 1..{n_layers}, got {encoder_depth}"
        )));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::config(format!("dropout rate {dropout_rate} not in [0, 1)")));
    }
    Ok(())
}

/// Bias-corrected Adam over a list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// One (weights, biases) block pair per layer of `model`.
    pub fn new(model: &Model, lr: f64) -> Self {
        let sizes: Vec<usize> = model
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.biases.len()])
            .collect();
        Self::for_blocks(&sizes, lr)
    }

    pub fn for_blocks(sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &f64> {
        self.second_moment.iter().flatten()
    }

    /// Advances the shared step counter; call once before the `apply` calls of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates block `block` in place. Assumes `begin_step` was called for this step.
    pub fn apply(&mut self, block: usize, params: &mut [f64], grads: &[f64]) {
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let m = &mut self.first_moment[block];
        let v = &mut self.second_moment[block];
        for k in 0..params.len() {
            let g = grads[k];
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One Adam update of the layers covered by `grads`.
pub fn adam_step(model: &mut Model, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (i, g) in grads.layers.iter().enumerate() {
        if g.weights.iter().chain(&g.biases).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { layer: grads.start + i });
        }
    }
    state.begin_step();
    for (i, g) in grads.layers.iter().enumerate() {
        let l = grads.start + i;
        let layer = &mut model.layers[l];
        state.apply(2 * l, &mut layer.weights, &g.weights);
        state.apply(2 * l + 1, &mut layer.biases, &g.biases);
        if !layer.is_finite() {
            return Err(Error::Divergence { layer: l });
        }
    }
    Ok(())
}
