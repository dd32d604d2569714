//! A small fully connected network with a sinusoidal time embedding,
//! plus the exact analytic gradient of its mean-squared training loss.
//!
//! The network maps `concat(x, embed(t))` to a vector the size of `x`.
//! Everything is written against flat `f64` buffers: weights are row-major
//! `out x in` matrices, and the whole parameter set can be viewed as one
//! flat vector for the optimizer and for checkpointing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::util::{pairwise_sum, stream_rng};
use crate::{Error, Result};

/// Elementwise nonlinearity used on hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected network; hidden layers use [`Activation`], the output
/// layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// Widths from input to output, e.g. `[d + time_embed_dim, h, h, d]`.
    pub layer_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    /// One row-major `out x in` matrix per layer.
    pub weights: Vec<Vec<f64>>,
    /// One bias vector per layer.
    pub biases: Vec<Vec<f64>>,
}

/// Per-parameter gradients shaped exactly like [`Network`] weights/biases.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientBuffer {
    /// All-zero gradients matching the network's shapes.
    pub fn zeros_like(net: &Network) -> Self {
        GradientBuffer {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Gradients flattened in the same order as [`Network::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        let squares: Vec<f64> = self.flat().iter().map(|&g| g * g).collect();
        pairwise_sum(&squares).sqrt()
    }
}

/// Builds a network with SiLU hidden layers.
///
/// `layer_dims[0]` must equal the input data dimension plus
/// `time_embed_dim`; the final width is the output dimension. Weights are
/// drawn uniformly from `[-sqrt(1/fan_in), sqrt(1/fan_in)]`; biases start
/// at zero. Identical seeds give identical networks.
pub fn init_network(layer_dims: &[usize], time_embed_dim: usize, seed: u64) -> Result<Network> {
    init_network_with(layer_dims, time_embed_dim, Activation::Silu, seed)
}

/// As [`init_network`] with an explicit activation.
pub fn init_network_with(
    layer_dims: &[usize],
    time_embed_dim: usize,
    activation: Activation,
    seed: u64,
) -> Result<Network> {
    if layer_dims.len() < 3 {
        return Err(Error::Config(format!(
            "need input, at least one hidden, and output layer; got dims {layer_dims:?}"
        )));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::Config("layer widths must be positive".into()));
    }
    if time_embed_dim < 2 || time_embed_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "time_embed_dim must be even and at least 2, got {time_embed_dim}"
        )));
    }
    if layer_dims[0] <= time_embed_dim {
        return Err(Error::Config(format!(
            "input width {} must exceed time_embed_dim {}",
            layer_dims[0], time_embed_dim
        )));
    }
    let mut rng = stream_rng(seed, 0x11E7_0001);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for l in 0..layer_dims.len() - 1 {
        let fan_in = layer_dims[l];
        let fan_out = layer_dims[l + 1];
        let bound = (1.0 / fan_in as f64).sqrt();
        let w: Vec<f64> =
            (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(Network {
        layer_dims: layer_dims.to_vec(),
        time_embed_dim,
        activation,
        weights,
        biases,
    })
}

impl Network {
    /// Dimension of the data vectors the network consumes. Usually equals
    /// [`Network::out_dim`]; conditional models consume concatenated inputs
    /// twice as wide as their output.
    pub fn data_dim(&self) -> usize {
        self.layer_dims[0] - self.time_embed_dim
    }

    /// Dimension of the vectors the network produces.
    pub fn out_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// All parameters as one vector: per layer, weights then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in
    /// [`Network::flat_params`] order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wn = w.len();
            w.copy_from_slice(&flat[k..k + wn]);
            k += wn;
            let bn = b.len();
            b.copy_from_slice(&flat[k..k + bn]);
            k += bn;
        }
        Ok(())
    }

    /// Writes the sinusoidal embedding of `t` into `out`.
    ///
    /// Frequencies are geometrically spaced from 1 to 1000 over the
    /// embedding half-width; each contributes a `(sin, cos)` pair.
    pub fn embed_time(&self, t: f64, out: &mut [f64]) {
        let half = self.time_embed_dim / 2;
        for i in 0..half {
            let expo = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            let freq = 1000.0_f64.powf(expo);
            out[2 * i] = (freq * t).sin();
            out[2 * i + 1] = (freq * t).cos();
        }
    }

    fn check_io(&self, xs: &Batch, ts: &[f64]) -> Result<()> {
        if xs.dim() != self.data_dim() {
            return Err(Error::Shape(format!(
                "input dimension {} does not match network data dimension {}",
                xs.dim(),
                self.data_dim()
            )));
        }
        if ts.len() != xs.count() {
            return Err(Error::Shape(format!(
                "{} time values for {} samples",
                ts.len(),
                xs.count()
            )));
        }
        Ok(())
    }
}

/// Per-sample forward/backward workspace, reused across a batch.
struct Scratch {
    input: Vec<f64>,
    /// Pre-activation values per layer.
    pres: Vec<Vec<f64>>,
    /// Post-activation values per layer (last layer is the linear output).
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(net: &Network) -> Self {
        let widths = &net.layer_dims[1..];
        Scratch {
            input: vec![0.0; net.layer_dims[0]],
            pres: widths.iter().map(|&w| vec![0.0; w]).collect(),
            acts: widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    fn load(&mut self, net: &Network, x: &[f64], t: f64, in_scale: f64) {
        let d = net.data_dim();
        for j in 0..d {
            self.input[j] = in_scale * x[j];
        }
        net.embed_time(t, &mut self.input[d..]);
    }

    /// Runs the network on the loaded input; output lands in the last
    /// `acts` entry.
    fn forward(&mut self, net: &Network) {
        let n_layers = net.weights.len();
        for l in 0..n_layers {
            let fan_in = net.layer_dims[l];
            let fan_out = net.layer_dims[l + 1];
            let w = &net.weights[l];
            let src: &[f64] = if l == 0 { &self.input } else { &self.acts[l - 1] };
            // Work around the borrow of acts[l-1] by splitting pre/act fills.
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = net.biases[l][o];
                for (wi, si) in row.iter().zip(src) {
                    acc += wi * si;
                }
                self.pres[l][o] = acc;
            }
            let last = l == n_layers - 1;
            for o in 0..fan_out {
                self.acts[l][o] = if last {
                    self.pres[l][o]
                } else {
                    net.activation.apply(self.pres[l][o])
                };
            }
        }
    }

    fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// Backpropagates from `dloss_dout`, accumulating into `grads`.
    fn backward(&mut self, net: &Network, dloss_dout: &[f64], grads: &mut GradientBuffer) {
        let n_layers = net.weights.len();
        self.deltas[n_layers - 1].copy_from_slice(dloss_dout);
        for l in (0..n_layers).rev() {
            let fan_in = net.layer_dims[l];
            let fan_out = net.layer_dims[l + 1];
            let src: &[f64] = if l == 0 { &self.input } else { &self.acts[l - 1] };
            for o in 0..fan_out {
                let d = self.deltas[l][o];
                grads.biases[l][o] += d;
                let grow = &mut grads.weights[l][o * fan_in..(o + 1) * fan_in];
                for (gi, si) in grow.iter_mut().zip(src) {
                    *gi += d * si;
                }
            }
            if l > 0 {
                let w = &net.weights[l];
                let (head, tail) = self.deltas.split_at_mut(l);
                let prev = &mut head[l - 1];
                let cur = &tail[0];
                for i in 0..fan_in {
                    let mut acc = 0.0;
                    for o in 0..fan_out {
                        acc += w[o * fan_in + i] * cur[o];
                    }
                    prev[i] = acc * net.activation.derivative(self.pres[l - 1][i]);
                }
            }
        }
    }
}

/// Evaluates the network on a batch with per-sample times.
pub fn forward(net: &Network, xs: &Batch, ts: &[f64]) -> Result<Batch> {
    net.check_io(xs, ts)?;
    let mut out = Batch::zeros(xs.count(), net.out_dim());
    let mut scratch = Scratch::new(net);
    for i in 0..xs.count() {
        scratch.load(net, xs.row(i), ts[i], 1.0);
        scratch.forward(net);
        out.row_mut(i).copy_from_slice(scratch.output());
    }
    Ok(out)
}

/// Mean-squared loss over batch and dimensions, with its exact gradient.
///
/// `loss = sum_i |net(x_i, t_i) - y_i|^2 / (batch * dim)`. Per-sample
/// losses are combined with pairwise summation, so permuting the batch
/// changes the result only at rounding level.
pub fn loss_and_grad(
    net: &Network,
    xs: &Batch,
    ts: &[f64],
    targets: &Batch,
) -> Result<(f64, GradientBuffer)> {
    net.check_io(xs, ts)?;
    if targets.count() != xs.count() || targets.dim() != net.out_dim() {
        return Err(Error::Shape(format!(
            "targets are {}x{}, expected {}x{}",
            targets.count(),
            targets.dim(),
            xs.count(),
            net.out_dim()
        )));
    }
    if xs.is_empty() {
        return Err(Error::Shape("cannot take the loss of an empty batch".into()));
    }
    let d = net.out_dim();
    let denom = (xs.count() * d) as f64;
    let mut grads = GradientBuffer::zeros_like(net);
    let mut scratch = Scratch::new(net);
    let mut sample_losses = Vec::with_capacity(xs.count());
    let mut dloss = vec![0.0; d];
    for i in 0..xs.count() {
        scratch.load(net, xs.row(i), ts[i], 1.0);
        scratch.forward(net);
        let y = targets.row(i);
        let mut sq = 0.0;
        for j in 0..d {
            let r = scratch.output()[j] - y[j];
            sq += r * r;
            dloss[j] = 2.0 * r / denom;
        }
        sample_losses.push(sq);
        scratch.backward(net, &dloss, &mut grads);
    }
    Ok((pairwise_sum(&sample_losses) / denom, grads))
}

/// Recovers the clean-state estimate from a noise prediction:
/// `x0 = x_t - sigma * eps`.
pub fn predict_x0(x_t: &[f64], eps: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if x_t.len() != eps.len() {
        return Err(Error::Shape(format!(
            "x_t has dimension {} but eps has {}",
            x_t.len(),
            eps.len()
        )));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Config(format!("sigma must be finite and nonnegative, got {sigma}")));
    }
    Ok(x_t.iter().zip(eps).map(|(&x, &e)| x - sigma * e).collect())
}

/// Evaluates the network under input/output preconditioning:
/// `x0_pred = c_skip * x_t - c_out * net(c_in * x_t, t)`.
pub fn precondition_forward(
    net: &Network,
    coeffs: &crate::bridge::PreconditionCoeffs,
    x_t: &Batch,
    ts: &[f64],
) -> Result<Batch> {
    net.check_io(x_t, ts)?;
    if net.out_dim() != net.data_dim() {
        return Err(Error::Shape(format!(
            "skip connection needs matching input/output widths, got {} and {}",
            net.data_dim(),
            net.out_dim()
        )));
    }
    let d = net.data_dim();
    let mut out = Batch::zeros(x_t.count(), d);
    let mut scratch = Scratch::new(net);
    for i in 0..x_t.count() {
        scratch.load(net, x_t.row(i), ts[i], coeffs.c_in);
        scratch.forward(net);
        let xrow = x_t.row(i);
        let orow = out.row_mut(i);
        for j in 0..d {
            orow[j] = coeffs.c_skip * xrow[j] - coeffs.c_out * scratch.output()[j];
        }
    }
    Ok(out)
}
