//! Feed-forward ReLU network with explicit forward and reverse passes.
//!
//! All parameters live in one flat vector (per layer: row-major weights of
//! shape `out x in`, then biases) so that gradients and optimizer moments
//! share the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    #[default]
    Identity,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    head: OutputHead,
    params: Vec<f64>,
    /// l1 bound on the weights, kept for reporting only.
    pub l1_norm_bound: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    layer_sizes: Vec<usize>,
    head: OutputHead,
    layers: Vec<LayerRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    l1_norm_bound: Option<f64>,
}

impl From<MlpParams> for MlpRepr {
    fn from(p: MlpParams) -> Self {
        let layers = (0..p.n_layers())
            .map(|l| {
                let (n_in, n_out) = (p.layer_sizes[l], p.layer_sizes[l + 1]);
                let (w, b) = p.layer_slices(l);
                LayerRepr {
                    weights: (0..n_out).map(|o| w[o * n_in..(o + 1) * n_in].to_vec()).collect(),
                    bias: b.to_vec(),
                }
            })
            .collect();
        MlpRepr {
            layer_sizes: p.layer_sizes,
            head: p.head,
            layers,
            l1_norm_bound: p.l1_norm_bound,
        }
    }
}

impl TryFrom<MlpRepr> for MlpParams {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        let mut p = MlpParams::zeros(&r.layer_sizes, r.head)?;
        if r.layers.len() != p.n_layers() {
            return Err(Error::DimensionMismatch {
                what: "network layers",
                expected: p.n_layers(),
                got: r.layers.len(),
            });
        }
        let mut flat: Vec<f64> = Vec::with_capacity(p.params.len());
        for (l, layer) in r.layers.iter().enumerate() {
            let (n_in, n_out) = (p.layer_sizes[l], p.layer_sizes[l + 1]);
            if layer.weights.len() != n_out
                || layer.weights.iter().any(|row| row.len() != n_in)
                || layer.bias.len() != n_out
            {
                return Err(Error::DimensionMismatch {
                    what: "layer weights",
                    expected: n_in * n_out + n_out,
                    got: layer.weights.iter().map(Vec::len).sum::<usize>() + layer.bias.len(),
                });
            }
            flat.extend(layer.weights.iter().flatten());
            flat.extend(&layer.bias);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("network parameters must be finite".into()));
        }
        p.params = flat;
        p.l1_norm_bound = r.l1_norm_bound;
        Ok(p)
    }
}

/// Activations retained by [`MlpParams::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[input, hidden x R, output]` with `hidden` units per layer.
pub fn layer_sizes(input: usize, hidden: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat(hidden).take(depth));
    sizes.push(output);
    sizes
}

impl MlpParams {
    pub fn zeros(layer_sizes: &[usize], head: OutputHead) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(
                "network needs at least two positive layer sizes".into(),
            ));
        }
        let count = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            head,
            params: vec![0.0; count],
            l1_norm_bound: None,
        })
    }

    /// Uniform fan-in initialization: every parameter of a layer with `n`
    /// inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn init<R: Rng + ?Sized>(layer_sizes: &[usize], head: OutputHead, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes, head)?;
        let mut off = 0;
        for l in 0..p.n_layers() {
            let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            for v in &mut p.params[off..off + n_in * n_out + n_out] {
                *v = rng.gen_range(-bound..bound);
            }
            off += n_in * n_out + n_out;
        }
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.layer_sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Weights (row-major, `out x in`) and biases of one layer.
    pub fn layer_slices(&self, layer: usize) -> (&[f64], &[f64]) {
        let off = self.layer_offset(layer);
        let (n_in, n_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    pub fn layer_slices_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.layer_offset(layer);
        let (n_in, n_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let (w, rest) = self.params[off..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    /// Sets every bias of the output layer to `value`.
    pub fn set_output_bias(&mut self, value: f64) {
        let last = self.n_layers() - 1;
        self.layer_slices_mut(last).1.fill(value);
    }

    /// Sum of absolute weights and biases.
    pub fn l1_norm(&self) -> f64 {
        self.params.iter().map(|v| v.abs()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut h = input.to_vec();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer_slices(l);
            let n_in = self.layer_sizes[l];
            let y: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bo)| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    bo + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let last = l + 1 == self.n_layers();
            let out = if last {
                match self.head {
                    OutputHead::Identity => y.clone(),
                    OutputHead::Softplus => y.iter().map(|&v| softplus(v)).collect(),
                }
            } else {
                y.iter().map(|&v| v.max(0.0)).collect()
            };
            inputs.push(std::mem::replace(&mut h, out));
            pre.push(y);
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Reverse pass. Returns the parameter gradient (flat layout) and the
    /// gradient with respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "network upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if cache.pre.len() != self.n_layers() {
            return Err(Error::DimensionMismatch {
                what: "forward cache",
                expected: self.n_layers(),
                got: cache.pre.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let last = self.n_layers() - 1;
        let mut delta: Vec<f64> = match self.head {
            OutputHead::Identity => upstream.to_vec(),
            OutputHead::Softplus => upstream
                .iter()
                .zip(&cache.pre[last])
                .map(|(g, &y)| g * sigmoid(y))
                .collect(),
        };
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = self.layer_offset(l);
            let input = &cache.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let gw = &mut grads[off + o * n_in..off + (o + 1) * n_in];
                    for (g, x) in gw.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
                grads[off + n_in * n_out + o] += d;
            }
            let (w, _) = self.layer_slices(l);
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
            }
            if l > 0 {
                for (p, &y) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                    if y <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Plain,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Self {
        let moments = if matches!(kind, OptimizerKind::Adam { .. }) { n_params } else { 0 };
        Self {
            kind,
            learning_rate,
            step: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        }
    }
}

pub fn optimizer_step(params: &mut MlpParams, grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.n_params() {
        return Err(Error::DimensionMismatch {
            what: "parameter gradient",
            expected: params.n_params(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::Plain => {
            for (p, g) in params.params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, epsilon } => {
            if state.first_moment.len() != grads.len() {
                state.first_moment = vec![0.0; grads.len()];
                state.second_moment = vec![0.0; grads.len()];
            }
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (k, g) in grads.iter().enumerate() {
                let m = &mut state.first_moment[k];
                let v = &mut state.second_moment[k];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                params.params[k] -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            }
        }
    }
    Ok(())
}
