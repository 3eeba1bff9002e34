use crate::error::{shape_err, Result};
use crate::ops::Op;
use crate::tape::{accumulate, grad_slot, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok((ia, ib))
    }

    fn zip_with(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, b) = (self.val(ia), self.val(ib));
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, ix: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.val(ix);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("add", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x + y);
        Ok(self.record(out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("sub", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x - y);
        Ok(self.record(out, Op::Sub(ia, ib)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("mul", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x * y);
        Ok(self.record(out, Op::Mul(ia, ib)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.map(ix, |v| scale * v + shift);
        Ok(self.record(out, Op::Affine { x: ix, scale }))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Multiply every element of `x` by the one-element variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        let Some(sv) = self.val(is).item() else {
            return Err(shape_err(
                "scale_by",
                format!(
                    "scale must have one element, got {:?}",
                    self.val(is).shape()
                ),
            ));
        };
        let out = self.map(ix, |v| sv * v);
        Ok(self.record(out, Op::ScaleBy { x: ix, s: is }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.map(ix, |v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        Ok(self.record(out, Op::Relu(ix)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.map(ix, sigmoid);
        Ok(self.record(out, Op::Sigmoid(ix)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        let Some(&cols) = xv.shape().last() else {
            return Err(shape_err("softmax", "rank-0 input"));
        };
        if cols == 0 {
            return Err(shape_err("softmax", "empty last axis"));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Softmax(ix)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.check(x).expect("var on tape");
        let s: f64 = self.val(ix).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(ix))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let ix = self.check(x).expect("var on tape");
        let t = self.val(ix);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.record(Tensor::scalar(m), Op::Mean(ix))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn add_backward(
    tape: &Tape,
    a: usize,
    b: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    accumulate(tape, grads, a, g.to_vec());
    accumulate(tape, grads, b, g.to_vec());
}

pub(crate) fn sub_backward(
    tape: &Tape,
    a: usize,
    b: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    accumulate(tape, grads, a, g.to_vec());
    accumulate(tape, grads, b, g.iter().map(|v| -v).collect());
}

pub(crate) fn mul_backward(
    tape: &Tape,
    a: usize,
    b: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (av, bv) = (tape.val(a).data(), tape.val(b).data());
    accumulate(
        tape,
        grads,
        a,
        g.iter().zip(bv).map(|(g, y)| g * y).collect(),
    );
    accumulate(
        tape,
        grads,
        b,
        g.iter().zip(av).map(|(g, x)| g * x).collect(),
    );
}

pub(crate) fn affine_backward(
    tape: &Tape,
    x: usize,
    scale: f64,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    accumulate(tape, grads, x, g.iter().map(|v| v * scale).collect());
}

pub(crate) fn scale_by_backward(
    tape: &Tape,
    x: usize,
    s: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let sv = tape.val(s).data()[0];
    let xv = tape.val(x).data();
    accumulate(tape, grads, x, g.iter().map(|v| v * sv).collect());
    let ds: f64 = g.iter().zip(xv).map(|(g, x)| g * x).sum();
    accumulate(tape, grads, s, vec![ds]);
}

pub(crate) fn relu_backward(tape: &Tape, x: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let xv = tape.val(x).data();
    let dx = g
        .iter()
        .zip(xv)
        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
        .collect();
    accumulate(tape, grads, x, dx);
}

pub(crate) fn sigmoid_backward(
    tape: &Tape,
    x: usize,
    out: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let y = tape.val(out).data();
    let dx = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
    accumulate(tape, grads, x, dx);
}

pub(crate) fn softmax_backward(
    tape: &Tape,
    x: usize,
    out: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let y = tape.val(out);
    let cols = *y.shape().last().expect("rank >= 1");
    let Some(dx) = grad_slot(tape, grads, x) else {
        return;
    };
    for ((dxr, yr), gr) in dx
        .chunks_mut(cols)
        .zip(y.data().chunks(cols))
        .zip(g.chunks(cols))
    {
        let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
        for ((d, y), g) in dxr.iter_mut().zip(yr).zip(gr) {
            *d += y * (g - inner);
        }
    }
}

pub(crate) fn sum_backward(
    tape: &Tape,
    x: usize,
    factor: f64,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let n = tape.val(x).numel();
    accumulate(tape, grads, x, vec![g[0] * factor; n]);
}
