//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations in execution order; one backward
//! traversal then yields gradients for every tensor that was marked as
//! requiring them. Tapes are confined to a single thread; independent tapes
//! may run concurrently.

pub mod kernels;

use crate::error::{CoreError, Result};
use crate::field::SoftmaxField;
use crate::labelmap::LabelMap;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: Var,
    },
    PixelSoftmax {
        logits: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: LabelMap,
        mask: Option<Vec<bool>>,
    },
    Sum {
        input: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    GlobalAvgPool {
        input: Var,
    },
    Affine {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Sigmoid {
        input: Var,
    },
    Bce {
        prob: Var,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations with cached forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are produced only for inputs
    /// registered with `requires_grad = true` (and values derived from them).
    pub fn input(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        self.push(tensor, requires_grad, Op::Input)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = kernels::conv2d_forward(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            stride,
            padding,
        )?;
        let rg = self.needs_grad(&[input, kernels, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = kernels::relu_forward(self.value(input));
        let rg = self.needs_grad(&[input]);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn pixel_softmax(&mut self, logits: Var) -> Result<Var> {
        let value = kernels::pixel_softmax_forward(self.value(logits))?;
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(value, rg, Op::PixelSoftmax { logits }))
    }

    /// Mean cross entropy over all pixels (Eq-style pixel-wise loss).
    pub fn cross_entropy(&mut self, probs: Var, labels: &LabelMap) -> Result<Var> {
        self.cross_entropy_masked(probs, labels, None)
    }

    /// Mean cross entropy restricted to pixels where the mask is true.
    pub fn cross_entropy_masked(
        &mut self,
        probs: Var,
        labels: &LabelMap,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let loss = kernels::cross_entropy_forward(self.value(probs), labels, mask)?;
        let rg = self.needs_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                probs,
                labels: labels.clone(),
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(kernels::sum_forward(self.value(input)));
        let rg = self.needs_grad(&[input]);
        self.push(value, rg, Op::Sum { input })
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(CoreError::shape_mismatch(
                "elementwise mul",
                self.value(lhs).shape(),
                self.value(rhs).shape(),
            ));
        }
        let data = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor::from_vec(self.value(lhs).shape(), data)?;
        let rg = self.needs_grad(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Mul { lhs, rhs }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let data = self.value(input).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(self.value(input).shape(), data).expect("scale keeps shape");
        let rg = self.needs_grad(&[input]);
        self.push(value, rg, Op::Scale { input, factor })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let value = kernels::global_avg_pool_forward(self.value(input))?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input }))
    }

    pub fn affine(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let value =
            kernels::affine_forward(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.needs_grad(&[input, weights, bias]);
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::Affine {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = kernels::sigmoid_forward(self.value(input));
        let rg = self.needs_grad(&[input]);
        self.push(value, rg, Op::Sigmoid { input })
    }

    /// Binary cross entropy of a scalar probability against a 0/1 target.
    pub fn bce_loss(&mut self, prob: Var, target: f64) -> Result<Var> {
        if self.value(prob).len() != 1 {
            return Err(CoreError::InvalidArgument(
                "bce_loss expects a scalar probability".into(),
            ));
        }
        let value = kernels::bce_forward(self.value(prob).item(), target);
        let rg = self.needs_grad(&[prob]);
        Ok(self.push(Tensor::scalar(value), rg, Op::Bce { prob, target }))
    }

    /// Wraps a softmax output var as a validated field (cheap view copy).
    pub fn softmax_field(&self, probs: Var) -> SoftmaxField {
        SoftmaxField::from_tensor_unchecked(self.value(probs).clone())
    }

    /// Runs the backward pass from a scalar loss. Returns a gradient for
    /// every var recorded with `requires_grad` that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let grad_out = match grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Conv2d {
                    input,
                    kernels: kvar,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gin, gker, gbias) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*kvar),
                        *stride,
                        *padding,
                        &grad_out,
                    )?;
                    self.accumulate(&mut grads, *input, gin);
                    self.accumulate(&mut grads, *kvar, gker);
                    self.accumulate(&mut grads, *bias, gbias);
                }
                Op::Relu { input } => {
                    let gin = kernels::relu_backward(self.value(*input), &grad_out);
                    self.accumulate(&mut grads, *input, gin);
                }
                Op::PixelSoftmax { logits } => {
                    let gin = kernels::pixel_softmax_backward(&self.nodes[idx].value, &grad_out);
                    self.accumulate(&mut grads, *logits, gin);
                }
                Op::CrossEntropy { probs, labels, mask } => {
                    let gin = kernels::cross_entropy_backward(
                        self.value(*probs),
                        labels,
                        mask.as_deref(),
                        grad_out.item(),
                    )?;
                    self.accumulate(&mut grads, *probs, gin);
                }
                Op::Sum { input } => {
                    let gin = kernels::sum_backward(self.value(*input), grad_out.item());
                    self.accumulate(&mut grads, *input, gin);
                }
                Op::Mul { lhs, rhs } => {
                    let glhs = {
                        let data = self
                            .value(*rhs)
                            .data()
                            .iter()
                            .zip(grad_out.data())
                            .map(|(&b, &g)| b * g)
                            .collect();
                        Tensor::from_vec(self.value(*lhs).shape(), data)?
                    };
                    let grhs = {
                        let data = self
                            .value(*lhs)
                            .data()
                            .iter()
                            .zip(grad_out.data())
                            .map(|(&a, &g)| a * g)
                            .collect();
                        Tensor::from_vec(self.value(*rhs).shape(), data)?
                    };
                    self.accumulate(&mut grads, *lhs, glhs);
                    self.accumulate(&mut grads, *rhs, grhs);
                }
                Op::Scale { input, factor } => {
                    let data = grad_out.data().iter().map(|&g| g * factor).collect();
                    let gin = Tensor::from_vec(self.value(*input).shape(), data)?;
                    self.accumulate(&mut grads, *input, gin);
                }
                Op::GlobalAvgPool { input } => {
                    let gin = kernels::global_avg_pool_backward(self.value(*input), &grad_out);
                    self.accumulate(&mut grads, *input, gin);
                }
                Op::Affine {
                    input,
                    weights,
                    bias,
                } => {
                    let g = grad_out.item();
                    let gin = {
                        let data = self.value(*weights).data().iter().map(|&w| w * g).collect();
                        Tensor::from_vec(self.value(*input).shape(), data)?
                    };
                    let gw = {
                        let data = self.value(*input).data().iter().map(|&x| x * g).collect();
                        Tensor::from_vec(self.value(*weights).shape(), data)?
                    };
                    self.accumulate(&mut grads, *input, gin);
                    self.accumulate(&mut grads, *weights, gw);
                    self.accumulate(&mut grads, *bias, Tensor::from_vec(&[1], vec![g])?);
                }
                Op::Sigmoid { input } => {
                    let gin = kernels::sigmoid_backward(&self.nodes[idx].value, &grad_out);
                    self.accumulate(&mut grads, *input, gin);
                }
                Op::Bce { prob, target } => {
                    let g = kernels::bce_backward(
                        self.value(*prob).item(),
                        *target,
                        grad_out.item(),
                    );
                    self.accumulate(&mut grads, *prob, Tensor::from_vec(self.value(*prob).shape(), vec![g])?);
                }
            }
            // Inner nodes no longer need their accumulated gradient once
            // it has been propagated; inputs keep theirs for the caller.
            if !matches!(self.nodes[idx].op, Op::Input) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, grad: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradient map produced by one backward traversal.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a var that is known to require one.
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.get(var).expect("gradient requested for untracked var")
    }
}
