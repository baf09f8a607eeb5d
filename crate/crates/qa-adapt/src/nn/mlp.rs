//! One-hidden-layer perceptrons with ReLU hidden units, exact
//! backpropagation, and the losses used throughout the toolkit.
//!
//! Everything here is deliberately serial and f64: training runs must be
//! bit-reproducible given (seed, architecture, data order).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Probability clipping bound for the cross-entropy loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

impl OutputActivation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            OutputActivation::Sigmoid => 0,
            OutputActivation::Identity => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(OutputActivation::Sigmoid),
            1 => Ok(OutputActivation::Identity),
            other => Err(Error::InvalidConfig(format!("unknown activation tag {other}"))),
        }
    }
}

/// Numerically stable logistic function, clamped to the open unit
/// interval so downstream logs stay finite even at saturation.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Parameters of `act_out(W2 relu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub output: OutputActivation,
}

impl MlpParams {
    /// Symmetric uniform init in +-sqrt(6 / (fan_in + fan_out)); biases zero.
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, output: OutputActivation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Matrix::from_vec(rows, cols, data).expect("finite init")
        };
        MlpParams {
            in_dim,
            hidden_dim,
            out_dim,
            w1: init(hidden_dim, in_dim),
            b1: vec![0.0; hidden_dim],
            w2: init(out_dim, hidden_dim),
            b2: vec![0.0; out_dim],
            output,
        }
    }

    /// Zeroes the output layer so the net computes a constant (0 pre-activation).
    pub fn zero_output_layer(&mut self) {
        self.w2 = Matrix::zeros(self.out_dim, self.hidden_dim);
        self.b2 = vec![0.0; self.out_dim];
    }

    pub fn param_count(&self) -> usize {
        self.hidden_dim * self.in_dim + self.hidden_dim + self.out_dim * self.hidden_dim + self.out_dim
    }

    /// Flattens parameters in the fixed block order (w1, b1, w2, b2).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    /// Writes flat values back in the fixed block order.
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        let w1 = self.w1.data_mut();
        w1.copy_from_slice(&flat[off..off + w1.len()]);
        off += w1.len();
        let b1_len = self.b1.len();
        self.b1.copy_from_slice(&flat[off..off + b1_len]);
        off += b1_len;
        let w2 = self.w2.data_mut();
        w2.copy_from_slice(&flat[off..off + w2.len()]);
        off += w2.len();
        let b2_len = self.b2.len();
        self.b2.copy_from_slice(&flat[off..off + b2_len]);
    }
}

/// Pre- and post-activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre_hidden: Matrix,
    hidden: Matrix,
    output: Matrix,
}

/// Gradients shaped like [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            w1: Matrix::zeros(params.hidden_dim, params.in_dim),
            b1: vec![0.0; params.hidden_dim],
            w2: Matrix::zeros(params.out_dim, params.hidden_dim),
            b2: vec![0.0; params.out_dim],
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.w1.data_mut().iter_mut().zip(other.w1.data()) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.data_mut().iter_mut().zip(other.w2.data()) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }
}

/// Batched forward pass. `batch` is (n x in_dim), one example per row.
pub fn mlp_forward(params: &MlpParams, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if batch.cols() != params.in_dim {
        return Err(Error::dim("mlp input", params.in_dim, batch.cols()));
    }
    let mut pre_hidden = batch.matmul_transpose_b(&params.w1);
    pre_hidden.add_row_broadcast(&params.b1);
    let hidden = pre_hidden.map(|v| v.max(0.0));
    let mut pre_out = hidden.matmul_transpose_b(&params.w2);
    pre_out.add_row_broadcast(&params.b2);
    let output = match params.output {
        OutputActivation::Sigmoid => pre_out.map(sigmoid),
        OutputActivation::Identity => pre_out,
    };
    let cache = ForwardCache {
        input: batch.clone(),
        pre_hidden,
        hidden,
        output: output.clone(),
    };
    Ok((output, cache))
}

/// Exact gradients of the composed net given dLoss/dOutput (post-activation).
/// Also returns dLoss/dInput so losses can chain through upstream transforms.
pub fn mlp_backward(params: &MlpParams, cache: &ForwardCache, output_grad: &Matrix) -> Result<(MlpGrads, Matrix)> {
    if output_grad.rows() != cache.output.rows() || output_grad.cols() != cache.output.cols() {
        return Err(Error::dim(
            "mlp output gradient",
            cache.output.rows() * cache.output.cols(),
            output_grad.rows() * output_grad.cols(),
        ));
    }
    if cache.input.cols() != params.in_dim || cache.hidden.cols() != params.hidden_dim {
        return Err(Error::ModeMismatch("forward cache does not match these parameters".into()));
    }

    // Through the output activation.
    let mut d_pre_out = output_grad.clone();
    if params.output == OutputActivation::Sigmoid {
        for (g, &y) in d_pre_out.data_mut().iter_mut().zip(cache.output.data()) {
            *g *= y * (1.0 - y);
        }
    }

    let w2_grad = d_pre_out.matmul_transpose_a(&cache.hidden);
    let b2_grad = d_pre_out.col_sum();

    // Through the hidden layer.
    let mut d_pre_hidden = d_pre_out.matmul(&params.w2);
    for (g, &z) in d_pre_hidden.data_mut().iter_mut().zip(cache.pre_hidden.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }

    let w1_grad = d_pre_hidden.matmul_transpose_a(&cache.input);
    let b1_grad = d_pre_hidden.col_sum();
    let input_grad = d_pre_hidden.matmul(&params.w1);

    Ok((
        MlpGrads {
            w1: w1_grad,
            b1: b1_grad,
            w2: w2_grad,
            b2: b2_grad,
        },
        input_grad,
    ))
}

/// Mean binary cross-entropy and its gradient with respect to the
/// predictions. Predictions are clipped into [BCE_EPS, 1 - BCE_EPS].
pub fn bce_loss(predictions: &Matrix, labels: &Matrix) -> Result<(f64, Matrix)> {
    if predictions.rows() != labels.rows() || predictions.cols() != labels.cols() {
        return Err(Error::dim(
            "bce labels",
            predictions.rows() * predictions.cols(),
            labels.rows() * labels.cols(),
        ));
    }
    let n = (predictions.rows() * predictions.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(predictions.rows(), predictions.cols());
    for (i, (&p, &y)) in predictions.data().iter().zip(labels.data()).enumerate() {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.data_mut()[i] = (-y / p + (1.0 - y) / (1.0 - p)) / n;
    }
    Ok((loss / n, grad))
}

/// Mean squared error and its gradient; used for identity-output nets.
pub fn mse_loss(predictions: &Matrix, labels: &Matrix) -> Result<(f64, Matrix)> {
    if predictions.rows() != labels.rows() || predictions.cols() != labels.cols() {
        return Err(Error::dim(
            "mse labels",
            predictions.rows() * predictions.cols(),
            labels.rows() * labels.cols(),
        ));
    }
    let n = (predictions.rows() * predictions.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(predictions.rows(), predictions.cols());
    for (i, (&p, &y)) in predictions.data().iter().zip(labels.data()).enumerate() {
        let d = p - y;
        loss += d * d;
        grad.data_mut()[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

fn loss_for(params: &MlpParams, predictions: &Matrix, labels: &Matrix) -> Result<(f64, Matrix)> {
    match params.output {
        OutputActivation::Sigmoid => bce_loss(predictions, labels),
        OutputActivation::Identity => mse_loss(predictions, labels),
    }
}

/// Compares analytic parameter gradients against central finite
/// differences (h = 1e-5) on the loss matched to the net's output
/// activation, returning the max relative error. Intended for small nets.
pub fn gradient_check(params: &MlpParams, batch: &Matrix, labels: &Matrix) -> Result<f64> {
    let h = 1e-5;
    let (out, cache) = mlp_forward(params, batch)?;
    let (_, out_grad) = loss_for(params, &out, labels)?;
    let (grads, _) = mlp_backward(params, &cache, &out_grad)?;
    let analytic = grads.flatten();

    let mut work = params.clone();
    let mut flat = params.flatten();
    let mut max_rel = 0.0f64;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        work.unflatten(&flat);
        let (out_p, _) = mlp_forward(&work, batch)?;
        let (loss_p, _) = loss_for(&work, &out_p, labels)?;
        flat[i] = orig - h;
        work.unflatten(&flat);
        let (out_m, _) = mlp_forward(&work, batch)?;
        let (loss_m, _) = loss_for(&work, &out_m, labels)?;
        flat[i] = orig;
        let numeric = (loss_p - loss_m) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    work.unflatten(&flat);
    Ok(max_rel)
}
