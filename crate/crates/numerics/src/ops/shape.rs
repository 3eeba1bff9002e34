use crate::error::{shape_err, Result};
use crate::ops::Op;
use crate::tape::{accumulate, grad_slot, Tape, Var};
use crate::tensor::Tensor;

/// Sizes of the axes before and after `axis`.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    /// Join tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let base = self.val(first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.val(i).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let t = self.val(i);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.record(out, Op::Concat { inputs: idx, axis }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        let shape = xv.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("{start}..{} of axis {axis} in {shape:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(shape, axis);
        let full = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * full + start * inner;
            out.extend_from_slice(&xv.data()[from..from + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let out = Tensor::new(new_shape, out)?;
        Ok(self.record(out, Op::Slice { x: ix, axis, start }))
    }

    /// Inverse of [`Tape::concat`]: cut `x` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        let have = self.value(x).shape().get(axis).copied().unwrap_or(0);
        if start != have {
            return Err(shape_err(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of length {have}"),
            ));
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} into {shape:?}", xv.shape()),
            ));
        }
        let out = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.record(out, Op::Reshape(ix)))
    }

    /// Reorder axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        let shape = xv.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err(
                "permute",
                format!("{perm:?} for shape {shape:?}"),
            ));
        }
        let (out_shape, data) = permute_data(shape, xv.data(), perm);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.record(
            out,
            Op::Permute {
                x: ix,
                perm: perm.to_vec(),
            },
        ))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let src: usize = counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum();
        out.push(data[src]);
        for k in (0..counter.len()).rev() {
            counter[k] += 1;
            if counter[k] < out_shape[k] {
                break;
            }
            counter[k] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn concat_backward(
    tape: &Tape,
    inputs: &[usize],
    axis: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let base = tape.val(inputs[0]).shape();
    let (outer, inner) = outer_inner(base, axis);
    let total: usize = inputs.iter().map(|&i| tape.val(i).shape()[axis]).sum();
    let mut offset = 0;
    for &i in inputs {
        let chunk = tape.val(i).shape()[axis] * inner;
        if let Some(d) = grad_slot(tape, grads, i) {
            for o in 0..outer {
                let from = o * total * inner + offset;
                for (dst, src) in d[o * chunk..(o + 1) * chunk]
                    .iter_mut()
                    .zip(&g[from..from + chunk])
                {
                    *dst += src;
                }
            }
        }
        offset += chunk;
    }
}

pub(crate) fn slice_backward(
    tape: &Tape,
    x: usize,
    axis: usize,
    start: usize,
    out: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let shape = tape.val(x).shape();
    let len = tape.val(out).shape()[axis];
    let (outer, inner) = outer_inner(shape, axis);
    let full = shape[axis] * inner;
    if let Some(d) = grad_slot(tape, grads, x) {
        for o in 0..outer {
            let to = o * full + start * inner;
            for (dst, src) in d[to..to + len * inner]
                .iter_mut()
                .zip(&g[o * len * inner..(o + 1) * len * inner])
            {
                *dst += src;
            }
        }
    }
}

pub(crate) fn permute_backward(
    tape: &Tape,
    x: usize,
    perm: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let in_shape = tape.val(x).shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut inverse = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inverse[p] = k;
    }
    let (_, back) = permute_data(&out_shape, g, &inverse);
    accumulate(tape, grads, x, back);
}
