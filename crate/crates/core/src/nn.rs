//! Minimal feed-forward networks with explicit backpropagation, an adaptive
//! moment optimizer, and Polyak target updates. Everything is plain `Vec<f64>`
//! so training is bit-deterministic given a seed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("network file parse error: {0}")]
    Parse(String),
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const WEIGHT_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// One dense layer, weights row-major `[output_dim x input_dim]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A multi-layer perceptron.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Cached pre-activations and outputs from a forward pass, consumed by
/// [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `values[0]` is the input; `values[k+1]` the output of layer `k`.
    values: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("cache has at least the input")
    }
}

/// Parameter gradients with the same shape as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }
}

impl Mlp {
    /// Build with uniform fan-in initialization `U(-1/sqrt(fan_in), ..)`.
    /// `dims` lists layer widths including input and output; `activations`
    /// has one entry per weight layer.
    pub fn new<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert_eq!(dims.len() - 1, activations.len(), "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (input_dim, output_dim) = (w[0], w[1]);
                let bound = 1.0 / (input_dim as f64).sqrt();
                Layer {
                    input_dim,
                    output_dim,
                    weights: (0..input_dim * output_dim)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    bias: (0..output_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    /// Shrink the final layer's parameters, e.g. so a fresh actor outputs
    /// near-zero pre-activations.
    pub fn scale_final_layer(&mut self, s: f64) {
        let last = self.layers.last_mut().expect("network has layers");
        for w in last.weights.iter_mut().chain(last.bias.iter_mut()) {
            *w *= s;
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("network has layers").input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("network has layers").output_dim
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).0
    }

    pub fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, ForwardCache) {
        assert_eq!(input.len(), self.input_dim(), "input width mismatch");
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        values.push(input.to_vec());
        for layer in &self.layers {
            let x = values.last().expect("non-empty");
            let mut z = layer.bias.clone();
            for o in 0..layer.output_dim {
                let row = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                let mut acc = 0.0;
                for (w, xi) in row.iter().zip(x) {
                    acc += w * xi;
                }
                z[o] += acc;
            }
            let y: Vec<f64> = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
            pre.push(z);
            values.push(y);
        }
        (values.last().expect("non-empty").clone(), ForwardCache { values, pre })
    }

    /// Backpropagate `upstream` (dLoss/dOutput) through the cached forward
    /// pass. Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> (MlpGrads, Vec<f64>) {
        assert_eq!(cache.values.len(), self.layers.len() + 1, "stale cache");
        assert_eq!(upstream.len(), self.output_dim(), "upstream width mismatch");
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[k];
            let y = &cache.values[k + 1];
            let x = &cache.values[k];
            for o in 0..layer.output_dim {
                delta[o] *= layer.activation.derivative(z[o], y[o]);
            }
            for o in 0..layer.output_dim {
                let row = &mut grads.weights[k][o * layer.input_dim..(o + 1) * layer.input_dim];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += delta[o] * xi;
                }
                grads.bias[k][o] += delta[o];
            }
            let mut prev = vec![0.0; layer.input_dim];
            for o in 0..layer.output_dim {
                let row = &layer.weights[o * layer.input_dim..(o + 1) * layer.input_dim];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += delta[o] * w;
                }
            }
            if k == 0 {
                return (grads, prev);
            }
            delta = prev;
        }
        unreachable!("loop returns at the first layer")
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            format: &'static str,
            version: u32,
            layers: &'a [Layer],
        }
        serde_json::to_string(&File {
            format: "mlp",
            version: WEIGHT_FILE_VERSION,
            layers: &self.layers,
        })
        .expect("mlp serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        #[derive(Deserialize)]
        struct File {
            #[serde(default)]
            #[allow(dead_code)]
            format: String,
            version: u32,
            layers: Vec<Layer>,
        }
        let file: File = serde_json::from_str(text).map_err(|e| NnError::Parse(e.to_string()))?;
        if file.version != WEIGHT_FILE_VERSION {
            return Err(NnError::Version(file.version));
        }
        Ok(Self { layers: file.layers })
    }

    pub fn parameters_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .all(|w| w.is_finite())
    }
}

/// Adam with bias correction, one state slot per parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m_weights: Vec<Vec<f64>>,
    v_weights: Vec<Vec<f64>>,
    m_bias: Vec<Vec<f64>>,
    v_bias: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m_weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            v_weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            m_bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            v_bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, layer) in net.layers.iter_mut().enumerate() {
            update_slice(
                &mut layer.weights,
                &grads.weights[k],
                &mut self.m_weights[k],
                &mut self.v_weights[k],
                (self.learning_rate, self.beta1, self.beta2, self.epsilon, bc1, bc2),
            );
            update_slice(
                &mut layer.bias,
                &grads.bias[k],
                &mut self.m_bias[k],
                &mut self.v_bias[k],
                (self.learning_rate, self.beta1, self.beta2, self.epsilon, bc1, bc2),
            );
        }
    }
}

fn update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    (lr, beta1, beta2, eps, bc1, bc2): (f64, f64, f64, f64, f64, f64),
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Polyak update `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) {
    assert!(tau > 0.0 && tau <= 1.0, "tau outside (0, 1]");
    assert_eq!(target.layers.len(), online.layers.len(), "shape mismatch");
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        assert_eq!(t.weights.len(), o.weights.len(), "shape mismatch");
        for (tw, ow) in t.weights.iter_mut().zip(&o.weights) {
            *tw = tau * ow + (1.0 - tau) * *tw;
        }
        for (tb, ob) in t.bias.iter_mut().zip(&o.bias) {
            *tb = tau * ob + (1.0 - tau) * *tb;
        }
    }
}

/// Maximum absolute parameter difference between two same-shaped networks.
pub fn param_distance(a: &Mlp, b: &Mlp) -> f64 {
    let mut d: f64 = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (x, y) in la.weights.iter().zip(&lb.weights) {
            d = d.max((x - y).abs());
        }
        for (x, y) in la.bias.iter().zip(&lb.bias) {
            d = d.max((x - y).abs());
        }
    }
    d
}
