//! Dense networks: deterministic init, plain forward, SGD application.
//!
//! Gradients live in [`crate::tape`]; this module only knows how to run a
//! net forward and how to apply a gradient map to its parameters.

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng;
use crate::tape::Grads;
use crate::tensor::{Matrix, ParamTensor};
use alloc::format;
use alloc::vec::Vec;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
            Activation::Sigmoid => 1.0 / (1.0 + fmath::exp(-z)),
        }
    }

    /// Derivative expressed in terms of the activation output.
    #[inline]
    pub fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => out * (1.0 - out),
        }
    }
}

/// One affine layer: `weight` is `[out x in]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub activation: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `out = act(x . W^T + b)` for a row-major batch `x`.
    pub fn forward_into(&self, x: &Matrix, out: &mut Matrix) {
        let (od, id) = (self.out_dim(), self.in_dim());
        debug_assert_eq!(x.cols(), id);
        debug_assert_eq!(out.cols(), od);
        let w = self.weight.data();
        let b = self.bias.data();
        for r in 0..x.rows() {
            let xr = x.row(r);
            let or = &mut out.data_mut()[r * od..(r + 1) * od];
            for (o, acc) in or.iter_mut().enumerate() {
                let wr = &w[o * id..(o + 1) * id];
                let mut z = b[o];
                for (xi, wi) in xr.iter().zip(wr) {
                    z += xi * wi;
                }
                *acc = self.activation.apply(z);
            }
        }
    }
}

/// A stack of dense layers over a fixed input width.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl DenseNet {
    /// Glorot-uniform weights (`a = sqrt(6 / (fan_in + fan_out))`), zero
    /// biases, drawn from a dedicated stream of `seed`.
    pub fn init(
        input_dim: usize,
        widths: &[usize],
        activations: &[Activation],
        seed: u64,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Empty { what: "layer widths" });
        }
        if input_dim == 0 || widths.contains(&0) {
            return Err(Error::InvalidConfig {
                reason: format!("zero layer width in {input_dim} -> {widths:?}"),
            });
        }
        if widths.len() != activations.len() {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "{} widths but {} activations",
                    widths.len(),
                    activations.len()
                ),
            });
        }
        let mut rng = rng::stream(seed, &[]);
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for (&w, &act) in widths.iter().zip(activations) {
            let a = fmath::sqrt(6.0 / (fan_in + w) as f64);
            let data: Vec<f64> = (0..w * fan_in).map(|_| rng.gen_range(-a..a)).collect();
            layers.push(Layer {
                weight: ParamTensor::new(alloc::vec![w, fan_in], data)?,
                bias: ParamTensor::zeros(alloc::vec![w])?,
                activation: act,
            });
            fan_in = w;
        }
        Ok(DenseNet { input_dim, layers })
    }

    /// Common head shape: ReLU through the hidden layers, linear output.
    pub fn relu_stack(input_dim: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let mut acts = alloc::vec![Activation::Relu; widths.len()];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        Self::init(input_dim, widths, &acts, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Plain batch forward. Errors name the offending layer on width
    /// mismatch; non-finite inputs are rejected up front.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        if !batch.all_finite() {
            return Err(Error::NonFiniteInput { what: "forward batch" });
        }
        if batch.cols() != self.input_dim {
            return Err(Error::LayerInputMismatch {
                layer: 0,
                expected: self.input_dim,
                got: batch.cols(),
            });
        }
        let mut cur = batch.clone();
        for layer in &self.layers {
            let mut next = Matrix::zeros(cur.rows(), layer.out_dim());
            layer.forward_into(&cur, &mut next);
            cur = next;
        }
        Ok(cur)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamTensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    /// Applies `p <- p - lr * g` to every parameter present in `grads`.
    /// Parameters without a gradient entry are left untouched.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        if lr == 0.0 {
            // A zero step must be a bitwise no-op, including for parameters
            // sitting at -0.0 (where `p - 0.0 * g` could flip the sign bit).
            return Ok(());
        }
        for p in self.params_mut() {
            if let Some(g) = grads.get(p.id()) {
                p.sgd_step(g, lr)?;
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        crate::tensor::fingerprint(self.params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn set_layer(net: &mut DenseNet, idx: usize, w: &[f64], b: &[f64]) {
        net.layers[idx].weight.data_mut().copy_from_slice(w);
        net.layers[idx].bias.data_mut().copy_from_slice(b);
    }

    #[test]
    fn identity_single_layer_is_affine() {
        let mut net = DenseNet::init(2, &[2], &[Activation::Identity], 0).unwrap();
        set_layer(&mut net, 0, &[1.0, 0.0, 0.0, 1.0], &[0.5, -0.5]);
        let x = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.row(0), &[2.5, 2.5]);
    }

    #[test]
    fn relu_clamps_negative_preactivations() {
        let mut net = DenseNet::init(1, &[2], &[Activation::Relu], 0).unwrap();
        set_layer(&mut net, 0, &[1.0, -1.0], &[0.0, 0.0]);
        let y = net
            .forward(&Matrix::from_rows(&[vec![3.0]]).unwrap())
            .unwrap();
        assert_eq!(y.row(0), &[3.0, 0.0]);
    }

    #[test]
    fn two_layer_forward_matches_hand_matrix_arithmetic() {
        // Oracle: direct matrix arithmetic done by hand below.
        let mut net = DenseNet::init(
            2,
            &[2, 1],
            &[Activation::Relu, Activation::Identity],
            0,
        )
        .unwrap();
        set_layer(&mut net, 0, &[1.0, 2.0, -1.0, 1.0], &[0.0, 1.0]);
        set_layer(&mut net, 1, &[3.0, -2.0], &[0.25]);
        let x = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        // row 0: h = relu([1-2, -1-1+1]) = relu([-1, -1]) = [0, 0]; y = 0.25
        // row 1: h = relu([0.5+4, -0.5+2+1]) = [4.5, 2.5]; y = 13.5 - 5 + 0.25
        let y = net.forward(&x).unwrap();
        assert!((y.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((y.get(1, 0) - 8.75).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_bounds_and_midpoint() {
        let mut net = DenseNet::init(1, &[1], &[Activation::Sigmoid], 0).unwrap();
        set_layer(&mut net, 0, &[1.0], &[0.0]);
        let y = net
            .forward(&Matrix::from_rows(&[vec![0.0], vec![100.0], vec![-100.0]]).unwrap())
            .unwrap();
        assert_eq!(y.get(0, 0), 0.5);
        assert!(y.get(1, 0) > 0.0 && y.get(1, 0) <= 1.0);
        assert!(y.get(2, 0) >= 0.0 && y.get(2, 0) < 1e-40);
    }

    #[test]
    fn forward_rejects_width_mismatch_naming_layer() {
        let net = DenseNet::relu_stack(3, &[4, 2], 0).unwrap();
        let bad = Matrix::zeros(2, 5);
        match net.forward(&bad) {
            Err(Error::LayerInputMismatch { layer: 0, expected: 3, got: 5 }) => {}
            other => panic!("expected layer mismatch, got {other:?}"),
        }
    }

    #[test]
    fn forward_rejects_non_finite_batch() {
        let net = DenseNet::relu_stack(2, &[2], 0).unwrap();
        let mut x = Matrix::zeros(1, 2);
        x.set(0, 1, f64::NAN);
        assert!(matches!(
            net.forward(&x),
            Err(Error::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn init_is_deterministic_and_in_glorot_range() {
        let a = DenseNet::relu_stack(8, &[16, 4], 42).unwrap();
        let b = DenseNet::relu_stack(8, &[16, 4], 42).unwrap();
        let c = DenseNet::relu_stack(8, &[16, 4], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound0 = crate::fmath::sqrt(6.0 / (8.0 + 16.0));
        assert!(a.layers()[0]
            .weight
            .data()
            .iter()
            .all(|w| w.abs() < bound0));
        assert!(a.layers()[0].bias.data().iter().all(|&b| b == 0.0));
        // Not degenerate: draws actually vary.
        let first = a.layers()[0].weight.data()[0];
        assert!(a.layers()[0].weight.data().iter().any(|&w| w != first));
    }

    #[test]
    fn init_rejects_bad_specs() {
        assert!(DenseNet::init(2, &[], &[], 0).is_err());
        assert!(DenseNet::init(2, &[0], &[Activation::Relu], 0).is_err());
        assert!(DenseNet::init(0, &[2], &[Activation::Relu], 0).is_err());
        assert!(DenseNet::init(2, &[2], &[], 0).is_err());
    }

    #[test]
    fn batch_forward_matches_per_row_forward() {
        let net = DenseNet::relu_stack(3, &[5, 2], 7).unwrap();
        let rows = vec![
            vec![0.1, -0.2, 0.3],
            vec![1.0, 2.0, -3.0],
            vec![0.0, 0.0, 0.0],
        ];
        let batch = net.forward(&Matrix::from_rows(&rows).unwrap()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let single = net
                .forward(&Matrix::from_rows(core::slice::from_ref(r)).unwrap())
                .unwrap();
            assert_eq!(single.row(0), batch.row(i), "row {i}");
        }
    }
}
