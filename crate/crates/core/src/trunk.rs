//! Dense feed-forward trunks and their gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GimError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer `x · W + b` followed by an activation.
///
/// `weights` is `in × out`, `bias` is `1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrunkParams {
    layers: Vec<Layer>,
}

impl<'de> Deserialize<'de> for TrunkParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            layers: Vec<Layer>,
        }
        let raw = Raw::deserialize(d)?;
        TrunkParams::new(raw.layers).map_err(serde::de::Error::custom)
    }
}

/// Layer widths of a trunk, input first: `[in, h1, ..., out]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkSpec {
    pub widths: Vec<usize>,
    /// Activation of the final layer; hidden layers always use the rectifier.
    pub output_activation: Activation,
}

impl TrunkSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        TrunkSpec {
            widths,
            output_activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Same trunk with an extra `output_dim → classes` linear layer; the
    /// former output layer becomes a rectified hidden layer.
    pub fn with_classifier(&self, classes: usize) -> TrunkSpec {
        let mut widths = self.widths.clone();
        widths.push(classes);
        TrunkSpec {
            widths,
            output_activation: Activation::Identity,
        }
    }

    pub fn activations(&self) -> Vec<Activation> {
        let n = self.widths.len() - 1;
        (0..n)
            .map(|i| if i + 1 == n { self.output_activation } else { Activation::Relu })
            .collect()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> Result<TrunkParams> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(GimError::Shape(format!(
                "trunk widths must be positive and at least two, got {:?}",
                self.widths
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .widths
            .windows(2)
            .zip(self.activations())
            .map(|(w, activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
                Layer {
                    weights: Tensor::from_parts(vec![fan_in, fan_out], data),
                    bias: Tensor::zeros(1, fan_out),
                    activation,
                }
            })
            .collect();
        TrunkParams::new(layers)
    }
}

/// Tape slots created by [`TrunkParams::forward`].
#[derive(Debug)]
pub struct TrunkForward {
    pub output: Var,
    weights: Vec<Var>,
    biases: Vec<Var>,
}

/// Per-layer gradients, aligned with [`TrunkParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl TrunkGrads {
    /// Tensors in parameter order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }
}

impl TrunkForward {
    pub fn grads(&self, g: &Gradients) -> TrunkGrads {
        TrunkGrads {
            weights: self.weights.iter().map(|&w| g.wrt(w)).collect(),
            biases: self.biases.iter().map(|&b| g.wrt(b)).collect(),
        }
    }
}

impl TrunkParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(GimError::Shape("trunk needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.shape().len() != 2 || l.bias.shape() != [1, l.out_dim()] {
                return Err(GimError::Shape(format!(
                    "layer {i}: weights {:?} with bias {:?}",
                    l.weights.shape(),
                    l.bias.shape()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(GimError::Shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(TrunkParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    fn tensor_mut(&mut self, k: usize) -> &mut Tensor {
        let layer = &mut self.layers[k / 2];
        if k % 2 == 0 {
            &mut layer.weights
        } else {
            &mut layer.bias
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(GimError::Shape(format!(
                "layer 0 expects input width {}, got batch of shape {:?}",
                self.input_dim(),
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `batch` (`n × in`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &Tensor) -> Result<TrunkForward> {
        self.check_input(batch)?;
        let mut x = tape.constant(batch.clone());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.param(layer.weights.clone());
            let b = tape.param(layer.bias.clone());
            let z = tape.matmul(x, w)?;
            let z = tape.add_bias(z, b)?;
            x = match layer.activation {
                Activation::Relu => tape.relu(z),
                Activation::Identity => z,
            };
            weights.push(w);
            biases.push(b);
        }
        Ok(TrunkForward {
            output: x,
            weights,
            biases,
        })
    }

    /// Tape-free evaluation of `batch`.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut x = batch.matmul(&self.layers[0].weights)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.matmul(&layer.weights)?;
            }
            let c = x.cols();
            let bias = layer.bias.data();
            for row in x.data_mut().chunks_exact_mut(c) {
                for (v, &b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if layer.activation == Activation::Relu && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(x)
    }

    /// [`infer`](Self::infer) over a large matrix in row chunks.
    pub fn infer_chunked(&self, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
        self.check_input(inputs)?;
        let n = inputs.rows();
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n * self.output_dim());
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            out.extend(self.infer(&inputs.select_rows(&idx)?)?.into_data());
        }
        Ok(Tensor::from_parts(vec![n, self.output_dim()], out))
    }

    /// Applies `f` to every parameter tensor alongside its gradient, in
    /// `w0, b0, w1, b1, ...` order.
    pub(crate) fn update(&mut self, grads: &TrunkGrads, mut f: impl FnMut(usize, &mut [f64], &[f64])) {
        for (k, (p, g)) in self.tensors_mut().zip(grads.tensors()).enumerate() {
            f(k, p.data_mut(), g.data());
        }
    }
}

/// Central-difference estimate of `∂loss/∂θ` for every trunk parameter.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &TrunkParams, step: f64) -> Result<TrunkGrads>
where
    F: FnMut(&TrunkParams) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(GimError::Contract(format!("step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let mut grads = Vec::with_capacity(2 * params.layers.len());
    for k in 0..2 * params.layers.len() {
        let shape = probe.tensor_mut(k).shape().to_vec();
        let mut g = vec![0.0; probe.tensor_mut(k).len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = probe.tensor_mut(k).data()[j];
            probe.tensor_mut(k).data_mut()[j] = orig + step;
            let up = loss_fn(&probe)?;
            probe.tensor_mut(k).data_mut()[j] = orig - step;
            let down = loss_fn(&probe)?;
            probe.tensor_mut(k).data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        grads.push(Tensor::from_parts(shape, g));
    }
    let (mut weights, mut biases) = (Vec::new(), Vec::new());
    for (k, t) in grads.into_iter().enumerate() {
        if k % 2 == 0 {
            weights.push(t);
        } else {
            biases.push(t);
        }
    }
    Ok(TrunkGrads { weights, biases })
}
