//! Multilayer perceptron `Q_theta(x, u)` with rectifier hidden layers, written
//! out by hand: forward pass, reverse-mode gradients with respect to the input
//! and to the parameters, Adam, and soft target updates.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::AugmentedState;
use crate::rng::{streams, RngState};

pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];
pub const CHECKPOINT_FORMAT: &str = "ctql-checkpoint-v1";

#[derive(Debug, Error)]
pub enum QNetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged: {0}")]
    TrainingDivergence(String),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("soft-update coefficient must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Dense layer `y = W x + b`, `W` stored row-major as `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()),
        );
    }

    fn is_consistent(&self) -> bool {
        self.weights.len() == self.inputs * self.outputs && self.bias.len() == self.outputs
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Rectifier derivative, taken as 0 at exactly 0.
#[inline]
fn relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Random initialisation of the network parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights uniform on `+-sqrt(6 / fan_in)`, biases zero.
    HeUniform,
    /// Weights and biases uniform on `+-1 / sqrt(fan_in)`.
    FanInUniform,
}

/// Parameters of `Q_theta`. Hidden layers use the rectifier, the output
/// layer (width 1) is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    pub layers: Vec<Layer>,
}

/// The slowly tracking copy `theta^-` used inside the Bellman targets.
pub type TargetParams = QNetwork;

/// Intermediate values of one forward pass.
struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
    /// (after the rectifier for hidden layers).
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl QNetwork {
    /// Zero network with the given widths `[input, hidden.., 1]`.
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        Self {
            layers: widths
                .windows(2)
                .map(|w| Layer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    /// Weights uniform on `+-sqrt(6 / fan_in)`, biases zero.
    pub fn random(input_dim: usize, hidden: &[usize], rng: &mut RngState) -> Self {
        Self::random_with(input_dim, hidden, InitScheme::HeUniform, rng)
    }

    pub fn random_with(
        input_dim: usize,
        hidden: &[usize],
        scheme: InitScheme,
        rng: &mut RngState,
    ) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut net = Self::zeros(&widths);
        for layer in &mut net.layers {
            let fan_in = layer.inputs as f64;
            let (w_lim, b_lim) = match scheme {
                InitScheme::HeUniform => ((6.0 / fan_in).sqrt(), 0.0),
                InitScheme::FanInUniform => (fan_in.sqrt().recip(), fan_in.sqrt().recip()),
            };
            for w in &mut layer.weights {
                *w = rng.uniform_in(-w_lim, w_lim);
            }
            if b_lim > 0.0 {
                for b in &mut layer.bias {
                    *b = rng.uniform_in(-b_lim, b_lim);
                }
            }
        }
        net
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, QNetError> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), QNetError> {
        if self.layers.is_empty() {
            return Err(QNetError::ShapeMismatch("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !l.is_consistent() {
                return Err(QNetError::ShapeMismatch(format!(
                    "layer {i}: {} weights / {} biases for a {}x{} layer",
                    l.weights.len(),
                    l.bias.len(),
                    l.outputs,
                    l.inputs
                )));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(QNetError::ShapeMismatch(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        if self.layers.last().map(|l| l.outputs) != Some(1) {
            return Err(QNetError::ShapeMismatch("output width must be 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// `[input, hidden.., output]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn same_shape(&self, other: &QNetwork) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    fn check_shape(&self, other: &QNetwork) -> Result<(), QNetError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(QNetError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.widths(),
                other.widths()
            )))
        }
    }

    fn check_input(&self, len: usize) -> Result<(), QNetError> {
        if len != self.input_dim() {
            return Err(QNetError::ShapeMismatch(format!(
                "input of length {len} for a network with input width {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer (weights then biases).
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn max_abs_diff(&self, other: &QNetwork) -> f64 {
        self.params()
            .zip(other.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn trace(&self, z: &[f64]) -> Trace {
        let depth = self.layers.len();
        let mut acts = Vec::with_capacity(depth + 1);
        let mut pre = Vec::with_capacity(depth);
        acts.push(z.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut p = Vec::with_capacity(layer.outputs);
            layer.forward_into(&acts[i], &mut p);
            let a = if i + 1 < depth {
                p.iter().map(|&v| relu(v)).collect()
            } else {
                p.clone()
            };
            pre.push(p);
            acts.push(a);
        }
        Trace { acts, pre }
    }

    /// Unchecked forward pass on a flat `[x; u]` input.
    pub fn value(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.input_dim());
        let mut cur = z.to_vec();
        let mut next = Vec::new();
        let depth = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, &mut next);
            if i + 1 < depth {
                next.iter_mut().for_each(|v| *v = relu(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    pub fn forward(&self, z: &AugmentedState) -> Result<f64, QNetError> {
        let flat = z.to_flat();
        self.check_input(flat.len())?;
        Ok(self.value(&flat))
    }

    /// Backpropagates `d(out)` from the output to the input, optionally
    /// accumulating `scale * dQ/dtheta` into `grads`. Returns `dQ/dz`.
    fn backward(&self, trace: &Trace, scale: f64, mut grads: Option<&mut QNetwork>) -> Vec<f64> {
        let depth = self.layers.len();
        let mut delta = vec![scale];
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let input = &trace.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[l];
                for (j, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut gl.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
                    gl.bias[j] += d;
                }
            }
            let mut prev = vec![0.0; layer.inputs];
            for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                if *d == 0.0 {
                    continue;
                }
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
            }
            if l > 0 {
                prev.iter_mut()
                    .zip(&trace.pre[l - 1])
                    .for_each(|(p, pre)| *p *= relu_grad(*pre));
            }
            delta = prev;
        }
        delta
    }

    /// Unchecked `Q(z)` and `dQ/dz`.
    pub fn value_and_input_gradient(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let trace = self.trace(z);
        let q = trace.acts[self.layers.len()][0];
        (q, self.backward(&trace, 1.0, None))
    }

    /// `dQ/dz` by reverse-mode differentiation.
    pub fn input_gradient(&self, z: &AugmentedState) -> Result<Vec<f64>, QNetError> {
        let flat = z.to_flat();
        self.check_input(flat.len())?;
        Ok(self.value_and_input_gradient(&flat).1)
    }

    /// Gradient of `(1/K) sum_i (Q(z_i) - y_i)^2` with respect to the
    /// parameters, plus the loss itself.
    pub fn loss_and_gradient(&self, batch: &[(Vec<f64>, f64)]) -> Result<(f64, QNetwork), QNetError> {
        if batch.is_empty() {
            return Err(QNetError::EmptyBatch);
        }
        let k = batch.len() as f64;
        let mut grads = QNetwork::zeros(&self.widths());
        let mut loss = 0.0;
        for (z, y) in batch {
            self.check_input(z.len())?;
            let trace = self.trace(z);
            let err = trace.acts[self.layers.len()][0] - y;
            loss += err * err / k;
            self.backward(&trace, 2.0 * err / k, Some(&mut grads));
        }
        Ok((loss, grads))
    }

    pub fn mse_loss(&self, batch: &[(Vec<f64>, f64)]) -> Result<f64, QNetError> {
        if batch.is_empty() {
            return Err(QNetError::EmptyBatch);
        }
        let k = batch.len() as f64;
        batch.iter().try_fold(0.0, |acc, (z, y)| {
            self.check_input(z.len())?;
            let e = self.value(z) - y;
            Ok(acc + e * e / k)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: QNetwork,
    pub second_moment: QNetwork,
}

impl AdamState {
    pub fn new(shape: &QNetwork, learning_rate: f64) -> Self {
        let zeros = QNetwork::zeros(&shape.widths());
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn apply(&mut self, params: &mut QNetwork, grads: &QNetwork) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, g), m), v) in params
            .params_mut()
            .zip(grads.params())
            .zip(self.first_moment.params_mut())
            .zip(self.second_moment.params_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One Adam step on the K-sample MSE. Returns the loss before the update.
///
/// The targets `y_i` are constants: no gradient flows through them.
pub fn mse_train_step(
    params: &mut QNetwork,
    adam: &mut AdamState,
    batch: &[(Vec<f64>, f64)],
) -> Result<f64, QNetError> {
    params.check_shape(&adam.first_moment)?;
    let (loss, grads) = params.loss_and_gradient(batch)?;
    if !loss.is_finite() {
        return Err(QNetError::TrainingDivergence(format!("loss = {loss}")));
    }
    if grads.params().any(|g| !g.is_finite()) {
        return Err(QNetError::TrainingDivergence("non-finite gradient".into()));
    }
    adam.apply(params, &grads);
    Ok(loss)
}

/// `target <- tau * theta + (1 - tau) * target`, entrywise.
pub fn soft_update(theta: &QNetwork, target: &mut TargetParams, tau: f64) -> Result<(), QNetError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(QNetError::InvalidTau(tau));
    }
    theta.check_shape(target)?;
    if tau == 1.0 {
        target.clone_from(theta);
    } else if tau > 0.0 {
        for (t, p) in target.params_mut().zip(theta.params()) {
            *t = tau * p + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

/// Live network, target copy and fresh Adam state for an `n + m` input with
/// the default two 128-wide hidden layers and learning rate `1e-3`.
pub fn init_params(n: usize, m: usize, seed: u64) -> (QNetwork, TargetParams, AdamState) {
    init_params_with(n + m, &DEFAULT_HIDDEN, seed, 1e-3)
}

pub fn init_params_with(
    input_dim: usize,
    hidden: &[usize],
    seed: u64,
    learning_rate: f64,
) -> (QNetwork, TargetParams, AdamState) {
    init_params_scheme(input_dim, hidden, InitScheme::HeUniform, seed, learning_rate)
}

pub fn init_params_scheme(
    input_dim: usize,
    hidden: &[usize],
    scheme: InitScheme,
    seed: u64,
    learning_rate: f64,
) -> (QNetwork, TargetParams, AdamState) {
    let mut rng = RngState::stream(seed, streams::NETWORK_INIT);
    let net = QNetwork::random_with(input_dim, hidden, scheme, &mut rng);
    let adam = AdamState::new(&net, learning_rate);
    (net.clone(), net, adam)
}

/// Serialized training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// `[outputs, inputs]` per layer.
    pub layer_shapes: Vec<[usize; 2]>,
    pub iteration: usize,
    pub config_fingerprint: String,
    pub network: QNetwork,
    pub target: TargetParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn new(
        network: &QNetwork,
        target: &TargetParams,
        adam: &AdamState,
        iteration: usize,
        config_fingerprint: &str,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            layer_shapes: network
                .layers
                .iter()
                .map(|l| [l.outputs, l.inputs])
                .collect(),
            iteration,
            config_fingerprint: config_fingerprint.to_string(),
            network: network.clone(),
            target: target.clone(),
            adam: adam.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), QNetError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(QNetError::Format(format!("unknown format `{}`", self.format)));
        }
        self.network.validate()?;
        let shapes: Vec<[usize; 2]> = self
            .network
            .layers
            .iter()
            .map(|l| [l.outputs, l.inputs])
            .collect();
        if shapes != self.layer_shapes {
            return Err(QNetError::ShapeMismatch(format!(
                "declared layer shapes {:?} but stored {:?}",
                self.layer_shapes, shapes
            )));
        }
        for (name, other) in [
            ("target", &self.target),
            ("adam first moment", &self.adam.first_moment),
            ("adam second moment", &self.adam.second_moment),
        ] {
            other.validate()?;
            if !self.network.same_shape(other) {
                return Err(QNetError::ShapeMismatch(format!(
                    "{name} shape {:?} differs from network {:?}",
                    other.widths(),
                    self.network.widths()
                )));
            }
        }
        Ok(())
    }

    /// Rejects a checkpoint whose input width differs from `input_dim`.
    pub fn check_input_dim(&self, input_dim: usize) -> Result<(), QNetError> {
        if self.network.input_dim() != input_dim {
            return Err(QNetError::ShapeMismatch(format!(
                "checkpoint expects input width {}, environment has n + m = {input_dim}",
                self.network.input_dim()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), QNetError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| QNetError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, QNetError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| QNetError::Format(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
