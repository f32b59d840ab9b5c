//! Fully-connected and non-overlapping-patch convolutional networks.
//!
//! Every layer is an affine map `x -> c · W x + b` applied to groups of the
//! input: the whole input for fully-connected layers, consecutive patches of
//! `s` positions for convolutional ones. Row-major storage makes the patch
//! regrouping a plain reshape. Hidden layers use `c = fan_in^(-1/2)`, the
//! readout uses `c = 1/H` and has no bias (maximal update parametrization).
//!
//! Gradients come from a reverse sweep over the cached forward pass.

mod io;
mod train;

pub use io::{read_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use train::{evaluate, train, EvalReport, EpochRecord, LrScaling, TrainConfig, TEST_CAP};

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RhmError};
use crate::grammar::RhmParams;
use crate::seed::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Fc,
    Cnn,
}

impl std::str::FromStr for ArchKind {
    type Err = RhmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(ArchKind::Fc),
            "cnn" => Ok(ArchKind::Cnn),
            other => Err(RhmError::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Architecture descriptor. `depth` counts linear layers, readout included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub depth: usize,
    pub width: usize,
    pub filter_size: usize,
    pub input_len: usize,
    pub channels: usize,
    pub num_outputs: usize,
}

/// Static shape of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Number of positions the layer is applied to (spatial size of its output).
    pub groups: usize,
    pub bias: bool,
}

impl ArchSpec {
    /// Depth-`(L+1)` CNN with filter size `s` matched to the grammar.
    pub fn cnn(params: &RhmParams, width: usize) -> Self {
        Self {
            kind: ArchKind::Cnn,
            depth: params.depth + 1,
            width,
            filter_size: params.branching,
            input_len: params.input_dim(),
            channels: params.vocab_size,
            num_outputs: params.num_classes,
        }
    }

    pub fn fc(params: &RhmParams, depth: usize, width: usize) -> Self {
        Self {
            kind: ArchKind::Fc,
            depth,
            width,
            filter_size: params.input_dim(),
            input_len: params.input_dim(),
            channels: params.vocab_size,
            num_outputs: params.num_classes,
        }
    }

    /// Default width `8 · v^s`.
    pub fn default_width(params: &RhmParams) -> usize {
        8 * params.vocab_size.pow(params.branching as u32)
    }

    pub fn input_size(&self) -> usize {
        self.input_len * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.channels == 0 || self.num_outputs == 0 || self.input_len == 0 {
            return Err(RhmError::Shape(format!("degenerate architecture {self:?}")));
        }
        if self.kind == ArchKind::Cnn {
            let s = self.filter_size;
            if s < 2 {
                return Err(RhmError::Shape("cnn filter size must be at least 2".into()));
            }
            let expected = s.checked_pow((self.depth - 1) as u32);
            if expected != Some(self.input_len) {
                return Err(RhmError::Shape(format!(
                    "cnn of depth {} with filter {s} needs input length {}, got {}",
                    self.depth,
                    expected.map_or("overflow".to_string(), |e| e.to_string()),
                    self.input_len
                )));
            }
        }
        Ok(())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.depth);
        match self.kind {
            ArchKind::Fc => {
                let mut fan_in = self.input_size();
                for _ in 0..self.depth - 1 {
                    shapes.push(LayerShape {
                        fan_in,
                        fan_out: self.width,
                        groups: 1,
                        bias: true,
                    });
                    fan_in = self.width;
                }
                shapes.push(LayerShape {
                    fan_in,
                    fan_out: self.num_outputs,
                    groups: 1,
                    bias: false,
                });
            }
            ArchKind::Cnn => {
                let s = self.filter_size;
                let mut spatial = self.input_len;
                let mut channels = self.channels;
                for _ in 0..self.depth - 1 {
                    spatial /= s;
                    shapes.push(LayerShape {
                        fan_in: s * channels,
                        fan_out: self.width,
                        groups: spatial,
                        bias: true,
                    });
                    channels = self.width;
                }
                shapes.push(LayerShape {
                    fan_in: spatial * channels,
                    fan_out: self.num_outputs,
                    groups: 1,
                    bias: false,
                });
            }
        }
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|l| l.fan_in * l.fan_out + if l.bias { l.fan_out } else { 0 })
            .sum()
    }

    /// Size of the flattened activations of layer `k` (1-based).
    pub fn activation_size(&self, k: usize) -> usize {
        let shape = self.layer_shapes()[k - 1];
        shape.groups * shape.fan_out
    }
}

/// One affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `(fan_out, fan_in)`.
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub prefactor: f64,
    pub groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub layers: Vec<Layer>,
}

/// Parameter gradients, laid out like [`Network::layers`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Option<Array1<f64>>>,
}

/// Cached forward pass: the (regrouped) input and pre-activation of each layer.
struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Builds a network with i.i.d. standard Gaussian weights and zero biases.
pub fn build_network(arch: &ArchSpec, seed: u64) -> Result<Network> {
    arch.validate()?;
    let mut rng = rng_from_seed(seed);
    let shapes = arch.layer_shapes();
    let last = shapes.len() - 1;
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let weight = Array2::from_shape_simple_fn((shape.fan_out, shape.fan_in), || {
                StandardNormal.sample(&mut rng)
            });
            let prefactor = if i == last {
                1.0 / shape.fan_in as f64
            } else {
                1.0 / (shape.fan_in as f64).sqrt()
            };
            Layer {
                weight,
                bias: shape.bias.then(|| Array1::zeros(shape.fan_out)),
                prefactor,
                groups: shape.groups,
            }
        })
        .collect();
    Ok(Network { arch: *arch, layers })
}

impl Network {
    /// Assembles a network from explicit layers (used for custom parametrizations).
    pub fn from_layers(arch: ArchSpec, layers: Vec<Layer>) -> Result<Self> {
        let shapes = arch.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(RhmError::Shape(format!("expected {} layers, got {}", shapes.len(), layers.len())));
        }
        for (shape, layer) in shapes.iter().zip(&layers) {
            if layer.weight.dim() != (shape.fan_out, shape.fan_in) || layer.groups != shape.groups {
                return Err(RhmError::Shape(format!(
                    "layer weight {:?} does not match {:?}",
                    layer.weight.dim(),
                    shape
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.arch.input_size() {
            return Err(RhmError::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.arch.input_size()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Array2<f64>, upto: usize, record: bool) -> (Array2<f64>, Option<Tape>) {
        let batch = x.nrows();
        let mut tape = record.then(|| Tape {
            inputs: Vec::with_capacity(upto),
            pre: Vec::with_capacity(upto),
        });
        let mut current = x.as_standard_layout().into_owned();
        for (i, layer) in self.layers.iter().take(upto).enumerate() {
            let rows = batch * layer.groups;
            let fan_in = layer.weight.ncols();
            let input = current
                .into_shape_with_order((rows, fan_in))
                .expect("activation regrouping is contiguous");
            let mut z = input.dot(&layer.weight.t());
            z *= layer.prefactor;
            if let Some(b) = &layer.bias {
                z += b;
            }
            let is_last = i == self.layers.len() - 1;
            let out = if is_last { z.clone() } else { z.mapv(|v| v.max(0.0)) };
            if let Some(t) = tape.as_mut() {
                t.inputs.push(input);
                t.pre.push(z);
            }
            let width = layer.groups * layer.weight.nrows();
            current = out
                .into_shape_with_order((batch, width))
                .expect("activation regrouping is contiguous");
        }
        (current, tape)
    }

    /// Network output, `(batch, n_c)`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.run(x, self.depth(), false).0)
    }

    /// Post-nonlinearity activations of layer `k` (1-based), flattened per datum.
    /// Layer `depth` is the network output.
    pub fn activations(&self, x: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
        if k == 0 || k > self.depth() {
            return Err(RhmError::LayerOutOfRange { k, depth: self.depth() });
        }
        self.check_input(x)?;
        Ok(self.run(x, k, false).0)
    }

    /// Mean cross-entropy loss and its gradient.
    pub fn loss_and_grad(&self, x: &Array2<f64>, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (loss, grads, _) = self.loss_grad_logits(x, labels)?;
        Ok((loss, grads))
    }

    /// Like [`loss_and_grad`](Self::loss_and_grad), also returning the logits.
    pub fn loss_grad_logits(&self, x: &Array2<f64>, labels: &[usize]) -> Result<(f64, Gradients, Array2<f64>)> {
        self.check_input(x)?;
        if labels.len() != x.nrows() {
            return Err(RhmError::Shape(format!("{} labels for {} inputs", labels.len(), x.nrows())));
        }
        let (logits, tape) = self.run(x, self.depth(), true);
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels);
        Ok((loss, self.backward(tape.expect("recorded"), dlogits), logits))
    }

    /// Reverse sweep from the gradient of the loss with respect to the logits.
    fn backward(&self, tape: Tape, dlogits: Array2<f64>) -> Gradients {
        let depth = self.depth();
        let batch = dlogits.nrows();
        let mut weight = Vec::with_capacity(depth);
        let mut bias = Vec::with_capacity(depth);
        let mut upstream = dlogits;
        for i in (0..depth).rev() {
            let layer = &self.layers[i];
            let rows = batch * layer.groups;
            let mut dz = upstream
                .into_shape_with_order((rows, layer.weight.nrows()))
                .expect("gradient regrouping is contiguous");
            if i != depth - 1 {
                // ReLU
                ndarray::Zip::from(&mut dz)
                    .and(&tape.pre[i])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0
                        }
                    });
            }
            let mut dw = dz.t().dot(&tape.inputs[i]);
            dw *= layer.prefactor;
            weight.push(dw);
            bias.push(layer.bias.as_ref().map(|_| dz.sum_axis(Axis(0))));
            if i > 0 {
                let mut da = dz.dot(&layer.weight);
                da *= layer.prefactor;
                let prev = &self.layers[i - 1];
                upstream = da
                    .into_shape_with_order((batch * prev.groups, prev.weight.nrows()))
                    .expect("gradient regrouping is contiguous");
            } else {
                upstream = Array2::zeros((0, 0));
            }
        }
        weight.reverse();
        bias.reverse();
        Gradients { weight, bias }
    }

    /// Plain gradient step `θ <- θ - lr · g`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for ((layer, gw), gb) in self.layers.iter_mut().zip(&grads.weight).zip(&grads.bias) {
            layer.weight.scaled_add(-lr, gw);
            if let (Some(b), Some(g)) = (layer.bias.as_mut(), gb.as_ref()) {
                b.scaled_add(-lr, g);
            }
        }
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    /// Parameter `index` in the flat order: per layer, weights row-major then biases.
    pub fn parameter(&self, index: usize) -> f64 {
        *self.locate(index)
    }

    pub fn set_parameter(&mut self, index: usize, value: f64) {
        *self.locate_mut(index) = value;
    }

    fn locate(&self, mut index: usize) -> &f64 {
        for layer in &self.layers {
            let nw = layer.weight.len();
            if index < nw {
                return &layer.weight.as_slice().expect("standard layout")[index];
            }
            index -= nw;
            if let Some(b) = &layer.bias {
                if index < b.len() {
                    return &b[index];
                }
                index -= b.len();
            }
        }
        panic!("parameter index out of range");
    }

    fn locate_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weight.len();
            if index < nw {
                return &mut layer.weight.as_slice_mut().expect("standard layout")[index];
            }
            index -= nw;
            if let Some(b) = &mut layer.bias {
                if index < b.len() {
                    return &mut b[index];
                }
                index -= b.len();
            }
        }
        panic!("parameter index out of range");
    }
}

impl Gradients {
    /// Gradient entry in the flat parameter order of [`Network::parameter`].
    pub fn get(&self, mut index: usize) -> f64 {
        for (w, b) in self.weight.iter().zip(&self.bias) {
            if index < w.len() {
                return w.as_slice().expect("standard layout")[index];
            }
            index -= w.len();
            if let Some(b) = b {
                if index < b.len() {
                    return b[index];
                }
                index -= b.len();
            }
        }
        panic!("parameter index out of range");
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let batch = logits.nrows();
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for ((row, mut g), &label) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - row[label];
        for (gj, &z) in g.iter_mut().zip(row.iter()) {
            *gj = (z - log_sum).exp() / batch as f64;
        }
        g[label] -= 1.0 / batch as f64;
    }
    (loss / batch as f64, grad)
}

/// Index of the largest entry of each row (first one on ties).
pub fn argmax_rows(out: &Array2<f64>) -> Vec<usize> {
    out.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
