//! Reverse-mode differentiation over an explicit, per-computation tape.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep. Nothing is global: independent tapes can run on separate
//! threads.

use crate::ops;
use crate::tensor::{Padding, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Pool {
        input: Var,
        argmax: Vec<u32>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    ChannelMean {
        input: Var,
        channel: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    differentiable_leaf: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the differentiable leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a differentiable leaf; `None` for any other node.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            differentiable_leaf: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient `backward` reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].differentiable_leaf = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(input), self.value(bias))?;
        let rg = self.needs(input) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { input, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.needs(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn maxpool(&mut self, input: Var, window: usize, stride: usize, padding: Padding) -> Result<Var> {
        let (out, argmax) = ops::maxpool_with_argmax(self.value(input), window, stride, padding)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Pool { input, argmax }, rg))
    }

    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::global_max_pool_with_argmax(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Pool { input, argmax }, rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(out, Op::Dense { input, weights, bias }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy_with_probs(self.value(logits), target)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss)?,
            Op::SoftmaxCrossEntropy { logits, target, probs },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).data().iter().map(|&v| f64::from(v)).sum();
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(s as f32)?, Op::Sum { input }, rg))
    }

    /// Spatial mean of one channel of a `[H, W, C]` node.
    pub fn channel_mean(&mut self, input: Var, channel: usize) -> Result<Var> {
        let map = ops::channel(self.value(input), channel)?;
        let mean = map.data().iter().map(|&v| f64::from(v)).sum::<f64>() / map.len() as f64;
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(mean as f32)?, Op::ChannelMean { input, channel }, rg))
    }

    /// Reverse sweep from a scalar node.
    ///
    /// Differentiable leaves the loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                reason: format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            });
        }
        let mut acc: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        acc[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = acc[idx].take() else { continue };
            self.propagate(node, &grad, &mut acc)?;
        }

        let mut grads = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.differentiable_leaf {
                grads.push(None);
                continue;
            }
            let g = match acc.get_mut(i).and_then(Option::take) {
                Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g, "backward")?,
                None => Tensor::from_parts(node.value.shape().to_vec(), vec![0.0; node.value.len()], "backward")?,
            };
            grads.push(Some(g));
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, grad: &[f32], acc: &mut [Option<Vec<f32>>]) -> Result<()> {
        let mut add = |v: Var, g: Vec<f32>| match &mut acc[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gx, gk) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *stride,
                    *padding,
                    grad,
                    self.needs(*input),
                    self.needs(*kernel),
                )?;
                if let Some(gx) = gx {
                    add(*input, gx);
                }
                if let Some(gk) = gk {
                    add(*kernel, gk);
                }
            }
            Op::AddBias { input, bias } => {
                if self.needs(*bias) {
                    let c = self.value(*bias).len();
                    add(*bias, ops::channel_bias_backward(grad, c));
                }
                if self.needs(*input) {
                    add(*input, grad.to_vec());
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    add(*input, ops::relu_backward(&node.value, grad));
                }
            }
            Op::Pool { input, argmax } => {
                if self.needs(*input) {
                    add(*input, ops::scatter_backward(self.value(*input).len(), argmax, grad));
                }
            }
            Op::Concat { inputs } => {
                let widths: Vec<usize> = inputs.iter().map(|&v| self.value(v).shape()[2]).collect();
                let total: usize = widths.iter().sum();
                let pixels = grad.len() / total;
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(&widths) {
                    if self.needs(v) {
                        let mut g = Vec::with_capacity(pixels * c);
                        for p in 0..pixels {
                            g.extend_from_slice(&grad[p * total + offset..p * total + offset + c]);
                        }
                        add(v, g);
                    }
                    offset += c;
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    add(*input, grad.to_vec());
                }
            }
            Op::Dense { input, weights, bias } => {
                let (gx, gw) = ops::dense_backward(
                    self.value(*input),
                    self.value(*weights),
                    grad,
                    self.needs(*input),
                    self.needs(*weights),
                );
                if let Some(gx) = gx {
                    add(*input, gx);
                }
                if let Some(gw) = gw {
                    add(*weights, gw);
                }
                if self.needs(*bias) {
                    add(*bias, grad.to_vec());
                }
            }
            Op::SoftmaxCrossEntropy { logits, target, probs } => {
                if self.needs(*logits) {
                    let upstream = f64::from(grad[0]);
                    let g = probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            let onehot = if i == *target { 1.0 } else { 0.0 };
                            ((p - onehot) * upstream) as f32
                        })
                        .collect();
                    add(*logits, g);
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    add(*input, vec![grad[0]; self.value(*input).len()]);
                }
            }
            Op::ChannelMean { input, channel } => {
                if self.needs(*input) {
                    let value = self.value(*input);
                    let c = value.shape()[2];
                    let pixels = value.len() / c;
                    let share = grad[0] / pixels as f32;
                    let mut g = vec![0f32; value.len()];
                    for p in 0..pixels {
                        g[p * c + channel] = share;
                    }
                    add(*input, g);
                }
            }
        }
        Ok(())
    }
}
