//! Fully-connected regressor with hand-written forward/backward passes and
//! momentum SGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Layer indices whose gradients are computed but never applied.
    #[serde(default)]
    pub frozen_layers: Vec<usize>,
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "regressor layer dimensions must be >= 1 (input {}, hidden {:?}, output {})",
                self.input_dim, self.hidden_dims, self.output_dim
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        let layers = self.hidden_dims.len() + 1;
        if let Some(bad) = self.frozen_layers.iter().find(|&&l| l >= layers) {
            return Err(Error::Config(format!(
                "frozen layer {bad} does not exist ({layers} layers)"
            )));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.output_dim))
        {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    /// Hex SHA-256 of the JSON form; checkpoints refuse to load across a mismatch.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Dense layer, `weights` row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Layer {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    /// Weights then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorState {
    pub layers: Vec<Layer>,
    pub velocity: Vec<Layer>,
    pub step: u64,
    pub activation: Activation,
}

/// Parameter gradients with the same shapes as the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(state: &RegressorState) -> Gradients {
        Gradients {
            layers: state
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.values_mut().zip(b.values()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for x in l.values_mut() {
                *x *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.values())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Activations recorded by [`forward`] for the matching [`backward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    step: u64,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

pub fn init(config: &RegressorConfig) -> Result<RegressorState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::new();
    let mut velocity = Vec::new();
    for (fan_in, fan_out) in config.layer_dims() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Layer::zeros(fan_in, fan_out);
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
        layers.push(layer);
        velocity.push(Layer::zeros(fan_in, fan_out));
    }
    Ok(RegressorState {
        layers,
        velocity,
        step: 0,
        activation: config.activation,
    })
}

impl RegressorState {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.values().all(|v| v.is_finite()))
    }

    /// Check shapes against a config (used when loading checkpoints).
    pub fn check_shapes(&self, config: &RegressorConfig) -> Result<()> {
        let dims = config.layer_dims();
        let ok = self.layers.len() == dims.len()
            && self.velocity.len() == dims.len()
            && self.activation == config.activation
            && self
                .layers
                .iter()
                .zip(&self.velocity)
                .zip(&dims)
                .all(|((l, v), &(i, o))| {
                    l.in_dim == i
                        && l.out_dim == o
                        && l.weights.len() == i * o
                        && l.biases.len() == o
                        && v.weights.len() == i * o
                        && v.biases.len() == o
                });
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "regressor state shapes do not match the configuration".into(),
            ))
        }
    }
}

/// Dot product with eight independent partial sums, so the additions pipeline
/// instead of forming one serial dependency chain.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn forward(state: &RegressorState, features: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if features.len() != state.input_dim() {
        return Err(Error::Dimension {
            context: "regressor input",
            expected: state.input_dim(),
            actual: features.len(),
        });
    }
    let n = state.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n.saturating_sub(1));
    let mut x = features.to_vec();
    for (li, layer) in state.layers.iter().enumerate() {
        let mut z = layer.biases.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            *zo += dot(&layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim], &x);
        }
        inputs.push(std::mem::take(&mut x));
        if li + 1 < n {
            x = z.iter().map(|&v| state.activation.apply(v)).collect();
            pre.push(z);
        } else {
            x = z;
        }
    }
    Ok((
        x,
        ForwardCache {
            step: state.step,
            inputs,
            pre,
        },
    ))
}

/// Reverse-mode gradients of a scalar loss given `grad_output = dL/d(output)`.
pub fn backward(
    state: &RegressorState,
    cache: &ForwardCache,
    grad_output: &[f64],
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(state);
    backward_into(state, cache, grad_output, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but adds the gradients into `grads`, so a batch can share one
/// buffer. Returns `dL/d(input)`.
pub fn backward_into(
    state: &RegressorState,
    cache: &ForwardCache,
    grad_output: &[f64],
    grads: &mut Gradients,
) -> Result<Vec<f64>> {
    if cache.step != state.step || cache.inputs.len() != state.layers.len() {
        return Err(Error::Usage(format!(
            "forward cache from step {} used at step {}",
            cache.step, state.step
        )));
    }
    if grad_output.len() != state.output_dim() {
        return Err(Error::Dimension {
            context: "regressor output gradient",
            expected: state.output_dim(),
            actual: grad_output.len(),
        });
    }
    if grads.layers.len() != state.layers.len()
        || grads
            .layers
            .iter()
            .zip(&state.layers)
            .any(|(g, l)| g.weights.len() != l.weights.len())
    {
        return Err(Error::Dimension {
            context: "gradient buffer",
            expected: state.layers.len(),
            actual: grads.layers.len(),
        });
    }
    let mut delta = grad_output.to_vec();
    for li in (0..state.layers.len()).rev() {
        let layer = &state.layers[li];
        let input = &cache.inputs[li];
        let g = &mut grads.layers[li];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g.biases[o] += d;
            let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (gw, &xi) in row.iter_mut().zip(input) {
                *gw += d * xi;
            }
        }
        let mut next = vec![0.0; layer.in_dim];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (n, &w) in next.iter_mut().zip(row) {
                *n += d * w;
            }
        }
        if li == 0 {
            return Ok(next);
        }
        for (n, &z) in next.iter_mut().zip(&cache.pre[li - 1]) {
            *n *= state.activation.derivative(z);
        }
        delta = next;
    }
    unreachable!("a regressor has at least one layer")
}

/// `v <- momentum * v - lr * g; w <- w + v`, skipping frozen layers.
pub fn sgd_step(
    state: &mut RegressorState,
    grads: &Gradients,
    config: &RegressorConfig,
) -> Result<()> {
    if grads.layers.len() != state.layers.len()
        || grads
            .layers
            .iter()
            .zip(&state.layers)
            .any(|(g, l)| g.weights.len() != l.weights.len() || g.biases.len() != l.biases.len())
    {
        return Err(Error::Dimension {
            context: "gradient shapes",
            expected: state.layers.len(),
            actual: grads.layers.len(),
        });
    }
    if !grads
        .layers
        .iter()
        .all(|g| all_finite(&g.weights) && all_finite(&g.biases))
    {
        return Err(Error::Divergence {
            step: state.step,
            message: "non-finite gradient".into(),
            last_good: None,
        });
    }
    let (m, lr) = (config.momentum, config.learning_rate);
    let mut probe = 0.0;
    for (li, ((layer, vel), g)) in state
        .layers
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(&grads.layers)
        .enumerate()
    {
        if config.frozen_layers.contains(&li) {
            continue;
        }
        for (w, v, gv) in [
            (&mut layer.weights, &mut vel.weights, &g.weights),
            (&mut layer.biases, &mut vel.biases, &g.biases),
        ] {
            for ((w, v), &gv) in w.iter_mut().zip(v.iter_mut()).zip(gv.iter()) {
                *v = m * *v - lr * gv;
                *w += *v;
                probe += *w * 0.0;
            }
        }
    }
    state.step += 1;
    if !probe.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            message: "non-finite parameter after update".into(),
            last_good: None,
        });
    }
    Ok(())
}

/// Branch-free finiteness test: `x * 0` is NaN exactly when `x` is not finite.
fn all_finite(xs: &[f64]) -> bool {
    xs.iter().fold(0.0, |acc, x| acc + x * 0.0) == 0.0
}
