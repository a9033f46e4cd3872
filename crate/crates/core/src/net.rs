//! Minimal reverse-mode dense network: stacked affine layers with
//! elementwise (or row-softmax) activations, a forward tape, and exact
//! backpropagation through it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Activation applied after a layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    /// Row-wise softmax (numerically stabilized by max subtraction).
    Softmax,
}

impl Activation {
    fn apply(self, m: &mut Matrix) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for v in m.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for v in m.as_mut_slice() {
                    *v = sigmoid(*v);
                }
            }
            Activation::Softmax => {
                for i in 0..m.rows() {
                    let row = m.row_mut(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        }
    }

    /// Given post-activation outputs and dL/d(output), writes dL/d(pre-activation).
    fn backward(self, output: &Matrix, d_output: &Matrix) -> Matrix {
        let mut dz = d_output.clone();
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for (g, &y) in dz.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (g, &y) in dz.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    *g *= y * (1.0 - y);
                }
            }
            Activation::Softmax => {
                for i in 0..dz.rows() {
                    let y = output.row(i);
                    let dy = d_output.row(i);
                    let dot: f64 = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                    for (g, (&yi, &dyi)) in dz.row_mut(i).iter_mut().zip(y.iter().zip(dy)) {
                        *g = yi * (dyi - dot);
                    }
                }
            }
        }
        dz
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer `y = act(x W + b)` with `W` of shape `in_dim x out_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut weight = Matrix::zeros(in_dim, out_dim);
        for v in weight.as_mut_slice() {
            *v = rng.gen_range(-limit..limit);
        }
        DenseLayer {
            weight,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// A stack of dense layers with chained dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

/// Forward values recorded for the backward pass: `acts[0]` is the input,
/// `acts[i+1]` the post-activation output of layer `i`.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Matrix>,
    dims: Vec<(usize, usize)>,
}

impl Tape {
    /// Post-activation output of layer `i`.
    pub fn output(&self, layer: usize) -> &Matrix {
        &self.acts[layer + 1]
    }

    pub fn final_output(&self) -> &Matrix {
        self.acts.last().expect("tape holds at least the input")
    }

    pub fn batch_rows(&self) -> usize {
        self.acts[0].rows()
    }
}

/// Parameter gradients mirroring a `DenseNet`'s shape.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrads {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn push_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
    }
}

impl DenseNet {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid_input("a DenseNet needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::invalid_input(format!(
                    "layer dims do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(DenseNet { layers })
    }

    /// Glorot-initialized stack over `dims = [in, h1, ..., out]`, the last
    /// layer using `final_activation` and all hidden layers `hidden_activation`.
    pub fn glorot_stack<R: Rng + ?Sized>(
        dims: &[usize],
        hidden_activation: Activation,
        final_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid_input(
                "need at least input and output dimensions",
            ));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let act = if i + 2 == dims.len() {
                final_activation
            } else {
                hidden_activation
            };
            layers.push(DenseLayer::glorot(dims[i], dims[i + 1], act, rng));
        }
        DenseNet::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim(), l.out_dim())).collect()
    }

    /// Batch forward pass. Rows of `input` are independent examples.
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Tape)> {
        if input.cols() != self.in_dim() {
            return Err(Error::invalid_input(format!(
                "input has {} columns but the first layer expects {}",
                input.cols(),
                self.in_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let mut z = acts.last().unwrap().matmul(&layer.weight);
            z.add_row_broadcast(&layer.bias);
            layer.activation.apply(&mut z);
            acts.push(z);
        }
        let output = acts.last().unwrap().clone();
        Ok((
            output,
            Tape {
                acts,
                dims: self.dims(),
            },
        ))
    }

    /// Backpropagates `d_output = dL/d(final output)` through the tape,
    /// returning parameter gradients and `dL/d(input)`.
    pub fn backward(&self, tape: &Tape, d_output: &Matrix) -> Result<(NetGrads, Matrix)> {
        if tape.dims != self.dims() {
            return Err(Error::invalid_state(
                "tape does not match this network's layers",
            ));
        }
        let last = tape.final_output();
        if d_output.rows() != last.rows() || d_output.cols() != last.cols() {
            return Err(Error::invalid_input(format!(
                "output gradient is {}x{} but the forward output was {}x{}",
                d_output.rows(),
                d_output.cols(),
                last.rows(),
                last.cols()
            )));
        }
        let mut grads = NetGrads::zeros_like(self);
        let mut d_out = d_output.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let output = &tape.acts[idx + 1];
            let input = &tape.acts[idx];
            let dz = layer.activation.backward(output, &d_out);
            grads.biases[idx] = dz.column_sums();
            grads.weights[idx] = input.matmul_tn(&dz);
            d_out = dz.matmul_nt(&layer.weight);
        }
        Ok((grads, d_out))
    }

    /// Appends all parameters (layer by layer: weights row-major, then bias)
    /// to `out`. The same order is used by `set_params_flat` and `NetGrads`.
    pub fn push_params_flat(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
    }

    /// Reads back parameters from the canonical flat layout; returns the
    /// number of values consumed.
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let needed = self.param_count();
        if flat.len() < needed {
            return Err(Error::invalid_input(format!(
                "flat parameter buffer has {} values, need {}",
                flat.len(),
                needed
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let w = layer.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + b]);
            off += b;
        }
        Ok(needed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(dim: usize) -> DenseNet {
        let mut weight = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weight.set(i, i, 1.0);
        }
        DenseNet::from_layers(vec![DenseLayer {
            weight,
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_net(2);
        let x = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weight_sigmoid_outputs_half() {
        let net = DenseNet::from_layers(vec![DenseLayer {
            weight: Matrix::zeros(3, 4),
            bias: vec![0.0; 4],
            activation: Activation::Sigmoid,
        }])
        .unwrap();
        let x = Matrix::from_vec(2, 3, vec![5.0, -2.0, 0.1, 0.0, 9.0, -7.0]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_weight_identity_broadcasts_bias() {
        let net = DenseNet::from_layers(vec![DenseLayer {
            weight: Matrix::zeros(2, 3),
            bias: vec![1.0, -2.5, 0.25],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = Matrix::from_vec(2, 2, vec![3.0, 4.0, -1.0, 0.5]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y.row(0), &[1.0, -2.5, 0.25]);
        assert_eq!(y.row(1), &[1.0, -2.5, 0.25]);
    }

    /// Independent oracle: per-example loops over output units and inputs.
    fn naive_forward(net: &DenseNet, x: &Matrix) -> Matrix {
        let mut cur = x.clone();
        for layer in net.layers() {
            let mut next = Matrix::zeros(cur.rows(), layer.out_dim());
            for r in 0..cur.rows() {
                for o in 0..layer.out_dim() {
                    let mut acc = layer.bias[o];
                    for i in 0..layer.in_dim() {
                        acc += cur.get(r, i) * layer.weight.get(i, o);
                    }
                    next.set(r, o, acc);
                }
            }
            layer.activation.apply(&mut next);
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::glorot_stack(&[5, 7, 4], Activation::Relu, Activation::Sigmoid, &mut rng)
            .unwrap();
        let x = Matrix::from_vec(
            3,
            5,
            (0..15)
                .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
                .collect(),
        )
        .unwrap();
        let (got, _) = net.forward(&x).unwrap();
        let want = naive_forward(&net, &x);
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let net = identity_net(2);
        let x = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net =
            DenseNet::glorot_stack(&[3, 6], Activation::Relu, Activation::Softmax, &mut rng)
                .unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|i| i as f64 - 6.0).collect()).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_backward_is_outer_product() {
        // y = x W, loss = y[0]; dW must be outer(x, e0).
        let net = DenseNet::from_layers(vec![DenseLayer {
            weight: Matrix::zeros(3, 2),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = Matrix::from_vec(1, 3, vec![2.0, -1.0, 0.5]).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        let d_out = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let (grads, d_in) = net.backward(&tape, &d_out).unwrap();
        for i in 0..3 {
            assert_eq!(grads.weights[0].get(i, 0), x.get(0, i));
            assert_eq!(grads.weights[0].get(i, 1), 0.0);
        }
        assert_eq!(grads.biases[0], vec![1.0, 0.0]);
        // dL/dx = e0 W^T = 0 since W = 0.
        assert!(d_in.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net =
            DenseNet::glorot_stack(&[4, 5, 3], Activation::Sigmoid, Activation::Softmax, &mut rng)
                .unwrap();
        let x = Matrix::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        let d_out = Matrix::zeros(2, 3);
        let (grads, d_in) = net.backward(&tape, &d_out).unwrap();
        for w in &grads.weights {
            assert!(w.as_slice().iter().all(|&v| v == 0.0));
        }
        for b in &grads.biases {
            assert!(b.iter().all(|&v| v == 0.0));
        }
        assert!(d_in.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net_a =
            DenseNet::glorot_stack(&[3, 4], Activation::Relu, Activation::Identity, &mut rng)
                .unwrap();
        let net_b =
            DenseNet::glorot_stack(&[3, 5], Activation::Relu, Activation::Identity, &mut rng)
                .unwrap();
        let x = Matrix::from_vec(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let (_, tape) = net_a.forward(&x).unwrap();
        let d_out = Matrix::zeros(1, 5);
        assert!(matches!(
            net_b.backward(&tape, &d_out),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net =
            DenseNet::glorot_stack(&[4, 6, 3], Activation::Sigmoid, Activation::Sigmoid, &mut rng)
                .unwrap();
        let x = Matrix::from_vec(
            3,
            4,
            (0..12)
                .map(|_| rand::Rng::gen_range(&mut rng, -1.5..1.5))
                .collect(),
        )
        .unwrap();

        // Loss = sum of outputs; d_out = ones.
        let (_, tape) = net.forward(&x).unwrap();
        let ones = Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap();
        let (grads, _) = net.backward(&tape, &ones).unwrap();
        let mut analytic = Vec::new();
        grads.push_flat(&mut analytic);

        let mut params = Vec::new();
        net.push_params_flat(&mut params);
        let h = 1e-5;
        for (idx, &a) in analytic.iter().enumerate() {
            let orig = params[idx];
            params[idx] = orig + h;
            net.set_params_flat(&params).unwrap();
            let plus: f64 = net.forward(&x).unwrap().0.as_slice().iter().sum();
            params[idx] = orig - h;
            net.set_params_flat(&params).unwrap();
            let minus: f64 = net.forward(&x).unwrap().0.as_slice().iter().sum();
            params[idx] = orig;
            net.set_params_flat(&params).unwrap();
            let numeric = (plus - minus) / (2.0 * h);
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() / scale < 1e-4,
                "param {idx}: analytic {a}, numeric {numeric}"
            );
        }
    }
}
