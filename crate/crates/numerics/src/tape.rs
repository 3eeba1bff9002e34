use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumericsError, Result};
use crate::ops::Op;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    pub(crate) index: usize,
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drop every recorded node. Vars handed out before the reset become invalid.
    pub fn reset(&mut self) {
        *self = Self::new();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Every piecewise decision taken so far: ReLU signs and max-pool winners.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    /// Only operations that track gradients are recorded, so build with [`Tape::leaf`].
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(
                    self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .map(|&v| usize::from(v > 0.0)),
                ),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumericsError::NoTape);
        }
        Ok(v.index)
    }

    pub(crate) fn val(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Record `value` as the result of `op`; gradient tracking follows the inputs.
    pub(crate) fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push(value, op, requires_grad)
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Gradients accumulate additively when a value feeds several operations.
    /// A tape supports one backward pass; call [`Tape::reset`] to reuse it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.consumed {
            return Err(NumericsError::AlreadyBackpropagated);
        }
        let loss_shape = self.nodes[root].value.shape();
        if self.nodes[root].value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for index in (0..=root).rev() {
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if !matches!(node.op, Op::Leaf) {
                node.op.backward(self, index, &upstream, &mut grads);
            }
            grads[index] = Some(upstream);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a path to it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

/// Add `contribution` into the gradient slot of node `index`.
pub(crate) fn accumulate(
    tape: &Tape,
    grads: &mut [Option<Vec<f64>>],
    index: usize,
    contribution: Vec<f64>,
) {
    if !tape.nodes[index].requires_grad {
        return;
    }
    match &mut grads[index] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Like [`accumulate`] but lets the caller write straight into the slot.
pub(crate) fn grad_slot<'g>(
    tape: &Tape,
    grads: &'g mut [Option<Vec<f64>>],
    index: usize,
) -> Option<&'g mut Vec<f64>> {
    if !tape.nodes[index].requires_grad {
        return None;
    }
    let len = tape.nodes[index].value.numel();
    Some(grads[index].get_or_insert_with(|| vec![0.0; len]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert_eq!(b.backward(x).unwrap_err(), NumericsError::NoTape);
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(
            tape.backward(y).unwrap_err(),
            NumericsError::AlreadyBackpropagated
        );
        tape.reset();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.sum(x);
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn reuse_accumulates() {
        // y = x + x + x  =>  dy/dx = 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.7));
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }
}
