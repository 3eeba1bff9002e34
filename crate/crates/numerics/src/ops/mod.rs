//! Primitive operations. Each forward lives as a method on [`Tape`]
//! and records an [`Op`] whose backward rule is dispatched from here.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod shape;

use crate::tape::Tape;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    ScaleBy { x: usize, s: usize },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Matmul { a: usize, b: usize },
    TransposeLast2(usize),
    Linear { x: usize, w: usize, b: usize },
    Conv2d(conv::Conv2dRecord),
    MaxPool { x: usize, argmax: Vec<usize> },
    GlobalAvgPool(usize),
    BatchNormTrain(norm::NormRecord),
    BatchNormEval(norm::NormRecord),
    LayerNorm(norm::NormRecord),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    BceWithLogits { logits: usize, labels: Vec<f64> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Matmul { a, b } => vec![*a, *b],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::Affine { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Slice { x, .. }
            | Op::Permute { x, .. } => vec![*x],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::TransposeLast2(x)
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x) => vec![*x],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d(r) => {
                let mut v = vec![r.x, r.w];
                v.extend(r.b);
                v
            }
            Op::BatchNormTrain(r) | Op::BatchNormEval(r) | Op::LayerNorm(r) => {
                vec![r.x, r.gamma, r.beta]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }

    pub(crate) fn backward(
        &self,
        tape: &Tape,
        out: usize,
        grad: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => elementwise::add_backward(tape, *a, *b, grad, grads),
            Op::Sub(a, b) => elementwise::sub_backward(tape, *a, *b, grad, grads),
            Op::Mul(a, b) => elementwise::mul_backward(tape, *a, *b, grad, grads),
            Op::Affine { x, scale } => elementwise::affine_backward(tape, *x, *scale, grad, grads),
            Op::ScaleBy { x, s } => elementwise::scale_by_backward(tape, *x, *s, grad, grads),
            Op::Relu(x) => elementwise::relu_backward(tape, *x, grad, grads),
            Op::Sigmoid(x) => elementwise::sigmoid_backward(tape, *x, out, grad, grads),
            Op::Softmax(x) => elementwise::softmax_backward(tape, *x, out, grad, grads),
            Op::Sum(x) => elementwise::sum_backward(tape, *x, 1.0, grad, grads),
            Op::Mean(x) => {
                let n = tape.val(*x).numel() as f64;
                elementwise::sum_backward(tape, *x, 1.0 / n, grad, grads)
            }
            Op::Matmul { a, b } => linalg::matmul_backward(tape, *a, *b, grad, grads),
            Op::TransposeLast2(x) => linalg::transpose_backward(tape, *x, grad, grads),
            Op::Linear { x, w, b } => linalg::linear_backward(tape, *x, *w, *b, grad, grads),
            Op::Conv2d(r) => conv::conv2d_backward(tape, r, grad, grads),
            Op::MaxPool { x, argmax } => pool::maxpool_backward(tape, *x, argmax, grad, grads),
            Op::GlobalAvgPool(x) => pool::global_avgpool_backward(tape, *x, grad, grads),
            Op::BatchNormTrain(r) => norm::batch_norm_train_backward(tape, r, grad, grads),
            Op::BatchNormEval(r) => norm::batch_norm_eval_backward(tape, r, grad, grads),
            Op::LayerNorm(r) => norm::layer_norm_backward(tape, r, grad, grads),
            Op::Concat { inputs, axis } => shape::concat_backward(tape, inputs, *axis, grad, grads),
            Op::Slice { x, axis, start } => {
                shape::slice_backward(tape, *x, *axis, *start, out, grad, grads)
            }
            Op::Reshape(x) => crate::tape::accumulate(tape, grads, *x, grad.to_vec()),
            Op::Permute { x, perm } => shape::permute_backward(tape, *x, perm, grad, grads),
            Op::BceWithLogits { logits, labels } => {
                loss::bce_backward(tape, *logits, labels, grad, grads)
            }
        }
    }
}
