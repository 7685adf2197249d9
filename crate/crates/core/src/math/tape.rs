//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every value produced during one forward pass. Leaves
//! are either trainable (`leaf`) or constant; gradients are only propagated
//! along paths that start at a trainable leaf. Composite losses enter the tape
//! as [`Op::Loss`] nodes carrying their analytic local gradients.

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Upsample {
        x: Var,
        from: (usize, usize),
    },
    Softmax(Var),
    Sum(Vec<(Var, f64)>),
    Loss {
        inputs: Vec<Var>,
        local: Vec<Tensor>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape node on a path from a
/// trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached leaf: no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, in_c, in_h, in_w] = self.value(x).dims4()?;
        let [out_c, w_in, kh, kw] = self.value(w).dims4()?;
        if w_in != in_c || kh != kw || self.value(b).len() != out_c {
            return Err(Error::contract(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw || stride == 0 {
            return Err(Error::contract("conv kernel larger than padded input"));
        }
        let geom = ConvGeometry {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(&[n, out_c, geom.out_h(), geom.out_w()], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu(x, slope), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    /// Bilinear resize of the two spatial axes.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let out = kernels::upsample_forward(n * c, (h, w), (out_h, out_w), self.value(x).data());
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Upsample { x, from: (h, w) }, needs))
    }

    /// Softmax over the channel axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let out = kernels::softmax_channels(n, c, h * w, self.value(x).data());
        let value = Tensor::new(&[n, c, h, w], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax(x), needs))
    }

    /// `Σ kᵢ · termᵢ` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::contract("weighted_sum needs at least one term"))?;
        let mut acc = Tensor::zeros(self.value(first.0).shape());
        for &(v, k) in terms {
            self.value(v).ensure_same_shape(&acc)?;
            acc.axpy(k, self.value(v));
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(acc, Op::Sum(terms.to_vec()), needs))
    }

    /// Scalar node whose derivative with respect to each input is supplied
    /// by the caller.
    pub fn loss(&mut self, inputs: Vec<Var>, value: f64, local: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::contract("one local gradient per loss input"));
        }
        for (v, g) in inputs.iter().zip(&local) {
            self.value(*v).ensure_same_shape(g)?;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::scalar(value), Op::Loss { inputs, local }, needs))
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if !self.needs(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    n,
                    xv.data(),
                    self.value(*w).data(),
                    dy.data(),
                    self.needs(*x),
                    self.needs(*w) || self.needs(*b),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.value(*w).shape(), dw)?);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?);
                }
            }
            Op::Relu(x) => {
                let g = self.value(*x).zip_map(dy, |v, d| if v > 0.0 { d } else { 0.0 })?;
                self.accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let g = self
                    .value(*x)
                    .zip_map(dy, |v, d| if v > 0.0 { d } else { s * d })?;
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = node.value.zip_map(dy, |y, d| d * y * (1.0 - y))?;
                self.accumulate(grads, *x, g);
            }
            Op::Upsample { x, from } => {
                let [n, c, oh, ow] = node.value.dims4()?;
                let dx = kernels::upsample_backward(n * c, *from, (oh, ow), dy.data());
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::Softmax(x) => {
                let [n, c, h, w] = node.value.dims4()?;
                let dx = kernels::softmax_channels_backward(n, c, h * w, node.value.data(), dy.data());
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::Sum(terms) => {
                for &(v, k) in terms {
                    self.accumulate(grads, v, dy.scale(k));
                }
            }
            Op::Loss { inputs, local } => {
                let upstream = dy.item();
                for (v, g) in inputs.iter().zip(local) {
                    self.accumulate(grads, *v, g.scale(upstream));
                }
            }
        }
        Ok(())
    }

    /// `∂loss/∂wrt`, failing when `wrt` is detached or unreachable.
    pub fn grad(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        if !self.needs(wrt) || wrt.0 > loss.0 {
            return Err(Error::NoGradientPath);
        }
        let mut grads = self.backward(loss)?;
        grads.take(wrt).ok_or(Error::NoGradientPath)
    }
}
