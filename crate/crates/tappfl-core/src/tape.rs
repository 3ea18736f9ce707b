//! Reverse-mode gradients over batch-level graph nodes.
//!
//! A [`GradTape`] records the forward pass as a list of matrix-valued nodes.
//! [`GradTape::backward`] walks the list in reverse from a scalar loss node
//! and returns the gradient of that loss with respect to every parameter
//! tensor touched on the tape, keyed by parameter id. A tensor that appears
//! in several places (for example a critic applied to both the positive and
//! the negative pairing) accumulates all of its contributions into one slot.
//!
//! One tape supports exactly one backward pass; a second call without a
//! fresh forward is an error rather than silent reuse of stale values.

use crate::error::{Error, Result};
use crate::fmath;
use crate::nn::{DenseNet, Layer};
use crate::objectives;
use crate::tensor::{Matrix, ParamTensor};
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum NodeOp<'n> {
    /// Raw data; no gradient flows past it.
    Input,
    /// One dense layer applied to `x`.
    Dense { x: NodeId, layer: &'n Layer },
    /// Column-wise concatenation.
    Concat { parts: Vec<NodeId> },
    /// Mean softmax cross-entropy against integer targets; `probs` are the
    /// row softmaxes kept for the backward pass.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix,
    },
    /// The Jensen-Shannon mutual-information estimate from positive and
    /// negative pair scores (both `[b x 1]`).
    JsdMi { pos: NodeId, neg: NodeId },
    /// Sum of all entries.
    Sum { x: NodeId },
    /// `a * x + b * y` for scalar nodes.
    Axpby { a: f64, x: NodeId, b: f64, y: NodeId },
}

struct Node<'n> {
    op: NodeOp<'n>,
    value: Matrix,
}

/// Gradients of one scalar loss, keyed by [`ParamTensor::id`].
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: BTreeMap<u64, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    pub fn for_param(&self, p: &ParamTensor) -> Option<&[f64]> {
        self.get(p.id())
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.map.keys().copied()
    }

    fn slot(&mut self, id: u64, len: usize) -> &mut [f64] {
        self.map.entry(id).or_insert_with(|| alloc::vec![0.0; len])
    }

    /// Linear combination of gradient maps. Keys missing from a term are
    /// treated as zero; lengths for shared keys must agree.
    pub fn scaled_sum(terms: &[(f64, &Grads)]) -> Result<Grads> {
        let mut out = Grads::default();
        for (coef, g) in terms {
            for (id, v) in &g.map {
                match out.map.get_mut(id) {
                    Some(acc) => {
                        if acc.len() != v.len() {
                            return Err(Error::ShapeMismatch {
                                context: String::from("gradient maps disagree on tensor length"),
                            });
                        }
                        for (a, x) in acc.iter_mut().zip(v) {
                            *a += coef * x;
                        }
                    }
                    None => {
                        out.map
                            .insert(*id, v.iter().map(|x| coef * x).collect());
                    }
                }
            }
        }
        Ok(out)
    }
}

pub struct GradTape<'n> {
    nodes: Vec<Node<'n>>,
    consumed: bool,
}

impl<'n> Default for GradTape<'n> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'n> GradTape<'n> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, op: NodeOp<'n>, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidNode { index: id.0 })
        }
    }

    pub fn value(&self, id: NodeId) -> Result<&Matrix> {
        self.check(id)?;
        Ok(&self.nodes[id.0].value)
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id)?;
        if !v.is_scalar() {
            return Err(Error::NotScalarLoss {
                rows: v.rows(),
                cols: v.cols(),
            });
        }
        Ok(v.get(0, 0))
    }

    /// Registers raw data. Rejects non-finite entries up front so the
    /// all-finite engine invariant holds downstream.
    pub fn input(&mut self, m: Matrix) -> Result<NodeId> {
        if !m.all_finite() {
            return Err(Error::NonFiniteInput { what: "tape input" });
        }
        Ok(self.push(NodeOp::Input, m))
    }

    /// Records `net` applied to `x`, one node per layer; returns the output
    /// node. Matches [`DenseNet::forward`] exactly on values.
    pub fn forward(&mut self, net: &'n DenseNet, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        if self.nodes[x.0].value.cols() != net.input_dim() {
            return Err(Error::LayerInputMismatch {
                layer: 0,
                expected: net.input_dim(),
                got: self.nodes[x.0].value.cols(),
            });
        }
        let mut cur = x;
        for layer in net.layers() {
            let cur_val = &self.nodes[cur.0].value;
            let mut out = Matrix::zeros(cur_val.rows(), layer.out_dim());
            layer.forward_into(cur_val, &mut out);
            cur = self.push(NodeOp::Dense { x: cur, layer }, out);
        }
        Ok(cur)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for p in parts {
            self.check(*p)?;
        }
        let mats: Vec<&Matrix> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = Matrix::hconcat(&mats)?;
        Ok(self.push(
            NodeOp::Concat {
                parts: parts.to_vec(),
            },
            value,
        ))
    }

    /// Mean softmax cross-entropy of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let lv = &self.nodes[logits.0].value;
        let arity = lv.cols();
        let loss = objectives::ce_privacy_loss(lv, targets, arity)?;
        let probs = objectives::softmax_rows(lv);
        Ok(self.push(
            NodeOp::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Matrix::scalar(loss),
        ))
    }

    /// The mutual-information estimate from `[b x 1]` score columns.
    pub fn jsd_mi(&mut self, pos: NodeId, neg: NodeId) -> Result<NodeId> {
        self.check(pos)?;
        self.check(neg)?;
        let (pv, nv) = (&self.nodes[pos.0].value, &self.nodes[neg.0].value);
        if pv.cols() != 1 || nv.cols() != 1 {
            return Err(Error::ShapeMismatch {
                context: String::from("pair scores must be single columns"),
            });
        }
        let estimate = objectives::jsd_mi_estimate(pv.data(), nv.data())?;
        Ok(self.push(NodeOp::JsdMi { pos, neg }, Matrix::scalar(estimate)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        Ok(self.push(NodeOp::Sum { x }, Matrix::scalar(total)))
    }

    /// Scalar combination `a*x + b*y`; both operands must be scalar nodes.
    pub fn axpby(&mut self, a: f64, x: NodeId, b: f64, y: NodeId) -> Result<NodeId> {
        let xv = self.scalar_value(x)?;
        let yv = self.scalar_value(y)?;
        Ok(self.push(
            NodeOp::Axpby { a, x, b, y },
            Matrix::scalar(a * xv + b * yv),
        ))
    }

    /// Reverse pass from a scalar `loss` node. Consumes the recorded pass:
    /// a second call errors until a fresh forward builds a new tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.check(loss)?;
        {
            let v = &self.nodes[loss.0].value;
            if !v.is_scalar() {
                return Err(Error::NotScalarLoss {
                    rows: v.rows(),
                    cols: v.cols(),
                });
            }
        }
        self.consumed = true;

        let mut adjoints: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Matrix::scalar(1.0));
        let mut grads = Grads::default();

        for i in (0..=loss.0).rev() {
            let adj = match adjoints[i].take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[i].op {
                NodeOp::Input => {}
                NodeOp::Dense { x, layer } => {
                    let out = &self.nodes[i].value;
                    let xv = &self.nodes[x.0].value;
                    let (b, od, id) = (out.rows(), layer.out_dim(), layer.in_dim());
                    let w = layer.weight.data();
                    let gw = grads.slot(layer.weight.id(), od * id);
                    // dpre = adj (.) act'(out); accumulate dW and db, then dX.
                    let mut dpre = Matrix::zeros(b, od);
                    for r in 0..b {
                        for o in 0..od {
                            let d = adj.get(r, o)
                                * layer.activation.derivative_from_output(out.get(r, o));
                            dpre.set(r, o, d);
                            let xr = xv.row(r);
                            let gwr = &mut gw[o * id..(o + 1) * id];
                            for (gwi, xi) in gwr.iter_mut().zip(xr) {
                                *gwi += d * xi;
                            }
                        }
                    }
                    let gb = grads.slot(layer.bias.id(), od);
                    for r in 0..b {
                        for (o, g) in gb.iter_mut().enumerate() {
                            *g += dpre.get(r, o);
                        }
                    }
                    let dx = adjoints[x.0].get_or_insert_with(|| Matrix::zeros(b, id));
                    for r in 0..b {
                        for o in 0..od {
                            let d = dpre.get(r, o);
                            let wr = &w[o * id..(o + 1) * id];
                            let dxr = &mut dx.data_mut()[r * id..(r + 1) * id];
                            for (dxi, wi) in dxr.iter_mut().zip(wr) {
                                *dxi += d * wi;
                            }
                        }
                    }
                }
                NodeOp::Concat { parts } => {
                    let rows = adj.rows();
                    let mut at = 0;
                    for p in parts.clone() {
                        let w = self.nodes[p.0].value.cols();
                        let dp = adjoints[p.0].get_or_insert_with(|| Matrix::zeros(rows, w));
                        for r in 0..rows {
                            for c in 0..w {
                                let v = dp.get(r, c) + adj.get(r, at + c);
                                dp.set(r, c, v);
                            }
                        }
                        at += w;
                    }
                }
                NodeOp::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = adj.get(0, 0) / probs.rows() as f64;
                    let (b, a) = (probs.rows(), probs.cols());
                    let targets = targets.clone();
                    let probs = probs.clone();
                    let dl = adjoints[logits.0].get_or_insert_with(|| Matrix::zeros(b, a));
                    for (r, &t) in targets.iter().enumerate().take(b) {
                        for c in 0..a {
                            let indicator = if t == c { 1.0 } else { 0.0 };
                            let v = dl.get(r, c) + scale * (probs.get(r, c) - indicator);
                            dl.set(r, c, v);
                        }
                    }
                }
                NodeOp::JsdMi { pos, neg } => {
                    let s = adj.get(0, 0);
                    let (pos, neg) = (*pos, *neg);
                    let b = self.nodes[pos.0].value.rows() as f64;
                    // d/dp mean(-sp(-p)) = sigma(-p)/b ; d/dn mean(-sp(n)) = -sigma(n)/b
                    let pv = self.nodes[pos.0].value.clone();
                    let dp = adjoints[pos.0].get_or_insert_with(|| Matrix::zeros(pv.rows(), 1));
                    for r in 0..pv.rows() {
                        let v = dp.get(r, 0) + s * sigmoid(-pv.get(r, 0)) / b;
                        dp.set(r, 0, v);
                    }
                    let nv = self.nodes[neg.0].value.clone();
                    let dn = adjoints[neg.0].get_or_insert_with(|| Matrix::zeros(nv.rows(), 1));
                    for r in 0..nv.rows() {
                        let v = dn.get(r, 0) - s * sigmoid(nv.get(r, 0)) / b;
                        dn.set(r, 0, v);
                    }
                }
                NodeOp::Sum { x } => {
                    let s = adj.get(0, 0);
                    let xv_rows = self.nodes[x.0].value.rows();
                    let xv_cols = self.nodes[x.0].value.cols();
                    let x = *x;
                    let dx = adjoints[x.0].get_or_insert_with(|| Matrix::zeros(xv_rows, xv_cols));
                    for v in dx.data_mut() {
                        *v += s;
                    }
                }
                NodeOp::Axpby { a, x, b, y } => {
                    let s = adj.get(0, 0);
                    let (a, b, x, y) = (*a, *b, *x, *y);
                    let dx = adjoints[x.0].get_or_insert_with(|| Matrix::zeros(1, 1));
                    dx.set(0, 0, dx.get(0, 0) + a * s);
                    let dy = adjoints[y.0].get_or_insert_with(|| Matrix::zeros(1, 1));
                    dy.set(0, 0, dy.get(0, 0) + b * s);
                }
            }
        }
        Ok(grads)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + fmath::exp(-z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use alloc::vec;

    fn single_layer(w: &[f64], b: &[f64], act: Activation, in_dim: usize) -> DenseNet {
        let mut net = DenseNet::init(in_dim, &[b.len()], &[act], 0).unwrap();
        {
            let mut params = net.params_mut();
            params.next().unwrap().data_mut().copy_from_slice(w);
            params.next().unwrap().data_mut().copy_from_slice(b);
        }
        net
    }

    #[test]
    fn gradient_of_w_times_x() {
        // loss = w*x with x=3, w=2: dloss/dw = 3, dloss/db = 1.
        let net = single_layer(&[2.0], &[0.0], Activation::Identity, 1);
        let mut tape = GradTape::new();
        let x = tape.input(Matrix::from_rows(&[vec![3.0]]).unwrap()).unwrap();
        let y = tape.forward(&net, x).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(tape.scalar_value(loss).unwrap(), 6.0);
        let grads = tape.backward(loss).unwrap();
        let mut ps = net.params();
        let (w, b) = (ps.next().unwrap(), ps.next().unwrap());
        assert_eq!(grads.for_param(w).unwrap(), &[3.0]);
        assert_eq!(grads.for_param(b).unwrap(), &[1.0]);
    }

    #[test]
    fn sigmoid_preactivation_gradient_at_zero_is_quarter() {
        let net = single_layer(&[1.0], &[0.0], Activation::Sigmoid, 1);
        let mut tape = GradTape::new();
        let x = tape.input(Matrix::from_rows(&[vec![0.0]]).unwrap()).unwrap();
        let y = tape.forward(&net, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let bias = net.params().nth(1).unwrap();
        // The bias gradient equals the preactivation gradient.
        assert!((grads.for_param(bias).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn second_backward_without_reforward_errors() {
        let net = single_layer(&[1.0], &[0.0], Activation::Identity, 1);
        let mut tape = GradTape::new();
        let x = tape.input(Matrix::scalar(1.0)).unwrap();
        let y = tape.forward(&net, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let net = single_layer(&[1.0, 0.0], &[0.0, 0.0], Activation::Identity, 1);
        let mut tape = GradTape::new();
        let x = tape.input(Matrix::scalar(1.0)).unwrap();
        let y = tape.forward(&net, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(Error::NotScalarLoss { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let net = DenseNet::relu_stack(4, &[6, 3], 11).unwrap();
        let batch = Matrix::from_rows(&[
            vec![0.5, -1.0, 2.0, 0.0],
            vec![1.5, 0.25, -0.75, 3.0],
        ])
        .unwrap();
        let plain = net.forward(&batch).unwrap();
        let mut tape = GradTape::new();
        let x = tape.input(batch).unwrap();
        let y = tape.forward(&net, x).unwrap();
        assert_eq!(tape.value(y).unwrap(), &plain);
    }

    #[test]
    fn input_rejects_non_finite() {
        let mut tape = GradTape::new();
        assert!(tape.input(Matrix::scalar(f64::INFINITY)).is_err());
    }

    fn finite_difference(
        net_builder: impl Fn() -> DenseNet,
        loss_of: impl Fn(&DenseNet) -> f64,
        analytic: &Grads,
        net: &DenseNet,
        tol: f64,
    ) {
        let h = 1e-5;
        let params: Vec<(usize, usize)> = net
            .params()
            .enumerate()
            .flat_map(|(pi, p)| (0..p.len()).map(move |ei| (pi, ei)))
            .collect();
        for (pi, ei) in params {
            let mut plus = net_builder();
            plus.params_mut().nth(pi).unwrap().data_mut()[ei] += h;
            let mut minus = net_builder();
            minus.params_mut().nth(pi).unwrap().data_mut()[ei] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let id = net.params().nth(pi).unwrap().id();
            let an = analytic.get(id).unwrap()[ei];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "param {pi}[{ei}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let build = || {
            let mut n = DenseNet::relu_stack(3, &[4, 3], 21).unwrap();
            // Shift biases so ReLUs are not sitting on their kink.
            for p in n.params_mut() {
                for v in p.data_mut() {
                    *v += 0.05;
                }
            }
            n
        };
        let net = build();
        let batch = Matrix::from_rows(&[
            vec![0.4, -0.9, 1.3],
            vec![-0.2, 0.8, 0.1],
            vec![1.1, 0.3, -0.5],
        ])
        .unwrap();
        let targets = [0usize, 2, 1];
        let loss_of = |n: &DenseNet| {
            let logits = n.forward(&batch).unwrap();
            objectives::ce_privacy_loss(&logits, &targets, 3).unwrap()
        };
        let mut tape = GradTape::new();
        let x = tape.input(batch.clone()).unwrap();
        let logits = tape.forward(&net, x).unwrap();
        let loss = tape.cross_entropy(logits, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        finite_difference(build, loss_of, &grads, &net, 1e-6);
    }

    #[test]
    fn concat_and_jsd_gradients_match_finite_differences() {
        let build = || DenseNet::relu_stack(5, &[4, 1], 33).unwrap();
        let net = build();
        let x = Matrix::from_rows(&[vec![0.3, -0.2], vec![0.9, 0.4], vec![-1.2, 0.7]]).unwrap();
        let r = Matrix::from_rows(&[vec![0.5, 0.1, -0.3], vec![0.2, -0.6, 0.8], vec![0.0, 0.4, 0.9]])
            .unwrap();
        let xbar = Matrix::from_rows(&[vec![0.9, 0.4], vec![-1.2, 0.7], vec![0.3, -0.2]]).unwrap();
        let loss_of = |n: &DenseNet| {
            let pos_in = Matrix::hconcat(&[&x, &r]).unwrap();
            let neg_in = Matrix::hconcat(&[&xbar, &r]).unwrap();
            let pos = n.forward(&pos_in).unwrap();
            let neg = n.forward(&neg_in).unwrap();
            objectives::jsd_mi_estimate(pos.data(), neg.data()).unwrap()
        };
        let mut tape = GradTape::new();
        let xn = tape.input(x.clone()).unwrap();
        let rn = tape.input(r.clone()).unwrap();
        let xbn = tape.input(xbar.clone()).unwrap();
        let pos_in = tape.concat(&[xn, rn]).unwrap();
        let neg_in = tape.concat(&[xbn, rn]).unwrap();
        let pos = tape.forward(&net, pos_in).unwrap();
        let neg = tape.forward(&net, neg_in).unwrap();
        let mi = tape.jsd_mi(pos, neg).unwrap();
        let grads = tape.backward(mi).unwrap();
        finite_difference(build, loss_of, &grads, &net, 1e-6);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2) within 1e-10.
        let net = DenseNet::relu_stack(2, &[3, 2], 5).unwrap();
        let batch = Matrix::from_rows(&[vec![0.7, -0.1], vec![0.2, 0.9]]).unwrap();
        let targets = [1usize, 0];
        let (a, b) = (0.3, -1.7);

        let run = |combine: bool| -> (Grads, Option<(Grads, Grads)>) {
            if combine {
                let mut tape = GradTape::new();
                let x = tape.input(batch.clone()).unwrap();
                let logits = tape.forward(&net, x).unwrap();
                let l1 = tape.cross_entropy(logits, &targets).unwrap();
                let l2 = tape.sum(logits).unwrap();
                let lc = tape.axpby(a, l1, b, l2).unwrap();
                (tape.backward(lc).unwrap(), None)
            } else {
                let mut t1 = GradTape::new();
                let x1 = t1.input(batch.clone()).unwrap();
                let lg1 = t1.forward(&net, x1).unwrap();
                let l1 = t1.cross_entropy(lg1, &targets).unwrap();
                let g1 = t1.backward(l1).unwrap();
                let mut t2 = GradTape::new();
                let x2 = t2.input(batch.clone()).unwrap();
                let lg2 = t2.forward(&net, x2).unwrap();
                let l2 = t2.sum(lg2).unwrap();
                let g2 = t2.backward(l2).unwrap();
                (Grads::default(), Some((g1, g2)))
            }
        };
        let (combined, _) = run(true);
        let (_, separate) = run(false);
        let (g1, g2) = separate.unwrap();
        let manual = Grads::scaled_sum(&[(a, &g1), (b, &g2)]).unwrap();
        for p in net.params() {
            let c = combined.for_param(p).unwrap();
            let m = manual.for_param(p).unwrap();
            for (cv, mv) in c.iter().zip(m) {
                assert!((cv - mv).abs() < 1e-10, "{cv} vs {mv}");
            }
        }
    }

    #[test]
    fn shared_parameters_accumulate_across_uses() {
        // The same net applied to two inputs: gradients must sum.
        let net = single_layer(&[1.5], &[0.0], Activation::Identity, 1);
        let mut tape = GradTape::new();
        let x1 = tape.input(Matrix::scalar(2.0)).unwrap();
        let x2 = tape.input(Matrix::scalar(5.0)).unwrap();
        let y1 = tape.forward(&net, x1).unwrap();
        let y2 = tape.forward(&net, x2).unwrap();
        let s1 = tape.sum(y1).unwrap();
        let s2 = tape.sum(y2).unwrap();
        let total = tape.axpby(1.0, s1, 1.0, s2).unwrap();
        let grads = tape.backward(total).unwrap();
        let w = net.params().next().unwrap();
        assert_eq!(grads.for_param(w).unwrap(), &[7.0]);
    }
}
