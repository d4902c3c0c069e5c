//! Small dense networks with hand-rolled backprop.
//!
//! Everything here is f64 and allocation-happy by design: the networks are a
//! few thousand parameters and determinism plus auditability matter more than
//! throughput. Parameters flatten to a single vector in a fixed order (per
//! layer: weights row-major, then biases) shared by the optimizer and the
//! finite-difference checks.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// What the final layer applies. Hidden layers always use tanh; the output
/// layer of a network that feeds another network must use [`Tanh`] so the
/// composition behaves exactly like one deeper net.
///
/// [`Tanh`]: OutputActivation::Tanh
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Fully connected network, tanh hidden layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    /// Per layer, row-major `(out_dim, in_dim)`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    output_activation: OutputActivation,
}

/// Post-activation values captured during a forward pass; `layers[0]` is the
/// input and `layers[l]` the output of layer `l`. Tanh derivatives only need
/// post-activation values, so this is the whole tape.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    layers: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trace has at least the input")
    }
}

/// Parameter gradients in the same per-layer layout as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.d_weights {
            for x in w {
                *x *= s;
            }
        }
        for b in &mut self.d_biases {
            for x in b {
                *x *= s;
            }
        }
    }

    /// Flatten in the same order as [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

fn tanh_vec(xs: &mut [f64]) {
    for x in xs {
        *x = x.tanh();
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases. Layers draw from `rng` in order,
    /// each weight row-major, so splitting one network into two (backbone
    /// plus head) reproduces the exact same draws as initializing the single
    /// deeper network.
    pub fn init(dims: &[usize], output_activation: OutputActivation, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.uniform(-limit, limit))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
            output_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                what: "mlp input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward_trace(input)?;
        Ok(trace.layers.pop().unwrap())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<MlpTrace> {
        self.check_input(input)?;
        let mut layers = Vec::with_capacity(self.n_layers() + 1);
        layers.push(input.to_vec());
        for l in 0..self.n_layers() {
            let x = layers.last().unwrap();
            let (in_dim, out_dim) = (self.dims[l], self.dims[l + 1]);
            let mut y = self.biases[l].clone();
            for o in 0..out_dim {
                let row = &self.weights[l][o * in_dim..(o + 1) * in_dim];
                let mut acc = 0.0;
                for (w, xi) in row.iter().zip(x) {
                    acc += w * xi;
                }
                y[o] += acc;
            }
            let is_output = l == self.n_layers() - 1;
            if !is_output || self.output_activation == OutputActivation::Tanh {
                tanh_vec(&mut y);
            }
            layers.push(y);
        }
        Ok(MlpTrace { layers })
    }

    /// Backpropagate `d_output` (gradient w.r.t. the network output) through
    /// the trace. Returns parameter gradients and the gradient w.r.t. the
    /// input, which a head hands back to its backbone.
    pub fn backward(&self, trace: &MlpTrace, d_output: &[f64]) -> (MlpGrads, Vec<f64>) {
        assert_eq!(d_output.len(), self.output_dim(), "d_output dim");
        let mut grads = self.zero_grads();
        let mut d_upstream = d_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (in_dim, out_dim) = (self.dims[l], self.dims[l + 1]);
            let x = &trace.layers[l];
            let y = &trace.layers[l + 1];
            let is_output = l == self.n_layers() - 1;
            let through_tanh = !is_output || self.output_activation == OutputActivation::Tanh;
            // Post-activation grad -> pre-activation grad.
            let mut d_pre = d_upstream;
            if through_tanh {
                for (d, a) in d_pre.iter_mut().zip(y) {
                    *d *= 1.0 - a * a;
                }
            }
            let mut d_x = vec![0.0; in_dim];
            for o in 0..out_dim {
                let row = &self.weights[l][o * in_dim..(o + 1) * in_dim];
                let dw_row = &mut grads.d_weights[l][o * in_dim..(o + 1) * in_dim];
                let d = d_pre[o];
                for i in 0..in_dim {
                    dw_row[i] += d * x[i];
                    d_x[i] += d * row[i];
                }
                grads.d_biases[l][o] += d;
            }
            d_upstream = d_x;
        }
        (grads, d_upstream)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            d_weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Load parameters from a flat cursor, consuming exactly
    /// [`param_count`](Self::param_count) values.
    pub fn set_params(&mut self, cursor: &mut ParamCursor<'_>) -> Result<()> {
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            cursor.take_into(w)?;
            cursor.take_into(b)?;
        }
        Ok(())
    }
}

/// Reader over a flat parameter vector shared by several networks.
pub struct ParamCursor<'a> {
    flat: &'a [f64],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(flat: &'a [f64]) -> Self {
        ParamCursor { flat, pos: 0 }
    }

    fn take_into(&mut self, dst: &mut [f64]) -> Result<()> {
        let end = self.pos + dst.len();
        if end > self.flat.len() {
            return Err(Error::ShapeMismatch {
                what: "flat params",
                expected: end,
                got: self.flat.len(),
            });
        }
        dst.copy_from_slice(&self.flat[self.pos..end]);
        self.pos = end;
        Ok(())
    }

    /// Fails unless every value was consumed, catching layout drift between
    /// writer and reader.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.flat.len() {
            return Err(Error::ShapeMismatch {
                what: "flat params",
                expected: self.pos,
                got: self.flat.len(),
            });
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                what: "adam step",
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
