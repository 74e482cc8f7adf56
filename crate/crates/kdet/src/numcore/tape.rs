//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records one forward episode; node creation order is already a
//! topological order, so the backward pass is a single reverse sweep. Tapes
//! are thread-confined; the tensors going in and out are plain values.

use super::kernels as k;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    SigmoidCe { target: Tensor, logit: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, pad: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Permute { input: Var, axes: Vec<usize> },
    SliceLast { input: Var, start: usize },
    ConcatCh(Var, Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Tracked leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Untracked leaf: treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, zeros if backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap(),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Gradient of `v`, or None if backward never reached it.
    pub fn grad_opt(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap())
    }

    /// Clear all accumulated gradients.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = k::add_fwd(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = k::sub_fwd(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = k::mul_fwd(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::Mul(a, b)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = k::square_fwd(self.value(x));
        let req = self.requires(x);
        self.push(value, req, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let value = k::scale_fwd(self.value(x), alpha);
        let req = self.requires(x);
        self.push(value, req, Op::Scale(x, alpha))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = k::sum_fwd(self.value(x));
        let req = self.requires(x);
        self.push(value, req, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = k::mean_fwd(self.value(x));
        let req = self.requires(x);
        self.push(value, req, Op::Mean(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = k::sigmoid_fwd(self.value(x));
        let req = self.requires(x);
        self.push(value, req, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let value = k::leaky_relu_fwd(self.value(x), slope)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::LeakyRelu(x, slope)))
    }

    /// Sigmoid cross entropy against a constant target.
    pub fn sigmoid_ce(&mut self, target: Tensor, logit: Var) -> Result<Var> {
        let value = k::sigmoid_ce_fwd(&target, self.value(logit))?;
        let req = self.requires(logit);
        Ok(self.push(value, req, Op::SigmoidCe { target, logit }))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = k::conv2d_fwd(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            pad,
        )?;
        let req = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(
            value,
            req,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, k_win: usize) -> Result<Var> {
        let (value, argmax) = k::max_pool2d_fwd(self.value(input), k_win)?;
        let req = self.requires(input);
        Ok(self.push(value, req, Op::MaxPool { input, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = k::permute_fwd(self.value(x), axes)?;
        let req = self.requires(x);
        Ok(self.push(
            value,
            req,
            Op::Permute {
                input: x,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = k::slice_last_fwd(self.value(x), start, len)?;
        let req = self.requires(x);
        Ok(self.push(value, req, Op::SliceLast { input: x, start }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = k::concat_channels_fwd(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, req, Op::ConcatCh(a, b)))
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        if !self.requires(loss) {
            return Ok(()); // nothing tracked upstream
        }

        // Per-call flow buffers; merged into persistent grads at the end.
        let mut flow: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        flow[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = flow[i].take() else { continue };
            let g_tensor = Tensor::new(self.nodes[i].value.shape().to_vec(), g.clone()).unwrap();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.flow_into(&mut flow, *a, g_tensor.data());
                    self.flow_into(&mut flow, *b, g_tensor.data());
                }
                Op::Sub(a, b) => {
                    self.flow_into(&mut flow, *a, g_tensor.data());
                    let neg: Vec<f64> = g_tensor.data().iter().map(|v| -v).collect();
                    self.flow_into(&mut flow, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let ga: Vec<f64> = g_tensor
                            .data()
                            .iter()
                            .zip(self.nodes[b.0].value.data())
                            .map(|(g, bv)| g * bv)
                            .collect();
                        self.flow_into(&mut flow, a, &ga);
                    }
                    if self.requires(b) {
                        let gb: Vec<f64> = g_tensor
                            .data()
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(g, av)| g * av)
                            .collect();
                        self.flow_into(&mut flow, b, &gb);
                    }
                }
                Op::Square(x) => {
                    let x = *x;
                    let gx: Vec<f64> = g_tensor
                        .data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, xv)| 2.0 * g * xv)
                        .collect();
                    self.flow_into(&mut flow, x, &gx);
                }
                Op::Scale(x, alpha) => {
                    let (x, alpha) = (*x, *alpha);
                    let gx: Vec<f64> = g_tensor.data().iter().map(|g| g * alpha).collect();
                    self.flow_into(&mut flow, x, &gx);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let gv = g_tensor.data()[0];
                    let gx = vec![gv; self.nodes[x.0].value.numel()];
                    self.flow_into(&mut flow, x, &gx);
                }
                Op::Mean(x) => {
                    let x = *x;
                    let n = self.nodes[x.0].value.numel();
                    let gv = g_tensor.data()[0] / n as f64;
                    let gx = vec![gv; n];
                    self.flow_into(&mut flow, x, &gx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let gx = k::sigmoid_bwd(&self.nodes[i].value, &g_tensor);
                    self.flow_into(&mut flow, x, gx.data());
                }
                Op::LeakyRelu(x, slope) => {
                    let (x, slope) = (*x, *slope);
                    let gx = k::leaky_relu_bwd(&self.nodes[x.0].value, slope, &g_tensor);
                    self.flow_into(&mut flow, x, gx.data());
                }
                Op::SigmoidCe { target, logit } => {
                    let logit = *logit;
                    let gx = k::sigmoid_ce_bwd(target, &self.nodes[logit.0].value, &g_tensor);
                    self.flow_into(&mut flow, logit, gx.data());
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let (input, kernel, bias, stride, pad) = (*input, *kernel, *bias, *stride, *pad);
                    let (gi, gk, gb) = k::conv2d_bwd(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        stride,
                        pad,
                        &g_tensor,
                        self.requires(input),
                    );
                    if let Some(gi) = gi {
                        self.flow_into(&mut flow, input, gi.data());
                    }
                    self.flow_into(&mut flow, kernel, gk.data());
                    self.flow_into(&mut flow, bias, gb.data());
                }
                Op::MaxPool { input, argmax } => {
                    let input = *input;
                    let gx = k::max_pool2d_bwd(
                        self.nodes[input.0].value.shape(),
                        argmax,
                        &g_tensor,
                    );
                    self.flow_into(&mut flow, input, gx.data());
                }
                Op::Reshape(x) => {
                    let x = *x;
                    self.flow_into(&mut flow, x, g_tensor.data());
                }
                Op::Permute { input, axes } => {
                    let input = *input;
                    let inv = k::invert_axes(axes);
                    let gx = k::permute_fwd(&g_tensor, &inv).unwrap();
                    self.flow_into(&mut flow, input, gx.data());
                }
                Op::SliceLast { input, start } => {
                    let (input, start) = (*input, *start);
                    let gx =
                        k::slice_last_bwd(self.nodes[input.0].value.shape(), start, &g_tensor);
                    self.flow_into(&mut flow, input, gx.data());
                }
                Op::ConcatCh(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a.0].value.shape()[1];
                    let cb = self.nodes[b.0].value.shape()[1];
                    let (ga, gb) = k::concat_channels_bwd(&g_tensor, ca, cb);
                    self.flow_into(&mut flow, a, ga.data());
                    self.flow_into(&mut flow, b, gb.data());
                }
            }
            // Merge this call's flow into the persistent gradient.
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, gv) in acc.iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn flow_into(&self, flow: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        if !self.requires(v) {
            return;
        }
        match &mut flow[v.0] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => flow[v.0] = Some(contrib.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let mut rng = stream(1, "tape", 0);
        let x = tape.leaf(Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let mut rng = stream(2, "tape", 0);
        let xt = Tensor::rand_uniform(&[5], -2.0, 2.0, &mut rng);
        let x = tape.leaf(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        for (g, &v) in tape.grad(x).data().iter().zip(xt.data()) {
            assert!((g - 2.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).data().iter().all(|&g| g == 2.0));
        tape.reset_grads();
        assert!(tape.grad_opt(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 3.0));
        let c = tape.constant(Tensor::full(&[2], 2.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 2.0]);
        assert!(tape.grad_opt(c).is_none());
    }

    #[test]
    fn gradients_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let mut rng = stream(7, "det", 0);
            let x = tape.leaf(Tensor::rand_uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng));
            let k = tape.leaf(Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng));
            let b = tape.leaf(Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng));
            let c = tape.conv2d(x, k, b, 1, 1).unwrap();
            let r = tape.leaky_relu(c, 0.1).unwrap();
            let p = tape.max_pool2d(r, 2).unwrap();
            let s = tape.sigmoid(p);
            let loss = tape.mean(s);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item().unwrap(),
                tape.grad(k).into_data(),
                tape.grad(x).into_data(),
            )
        };
        let (l1, gk1, gx1) = run();
        let (l2, gk2, gx2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(gk1, gk2);
        assert_eq!(gx1, gx2);
    }

    #[test]
    fn finite_gradients_through_deep_chain() {
        let mut tape = Tape::new();
        let mut rng = stream(3, "finite", 0);
        let x = tape.leaf(Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng));
        let k1 = tape.leaf(Tensor::randn(&[4, 3, 3, 3], 0.3, &mut rng));
        let b1 = tape.leaf(Tensor::zeros(&[4]));
        let c1 = tape.conv2d(x, k1, b1, 1, 1).unwrap();
        let a1 = tape.leaky_relu(c1, 0.1).unwrap();
        let p1 = tape.max_pool2d(a1, 2).unwrap();
        let tgt = Tensor::full(&[1, 4, 4, 4], 0.5);
        let ce = tape.sigmoid_ce(tgt, p1).unwrap();
        let loss = tape.mean(ce);
        tape.backward(loss).unwrap();
        for v in [x, k1, b1] {
            assert!(tape.grad(v).all_finite());
        }
    }
}
