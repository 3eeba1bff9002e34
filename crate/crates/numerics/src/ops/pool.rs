use crate::error::{shape_err, Result};
use crate::ops::Op;
use crate::tape::{grad_slot, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Non-overlapping `k×k` max pooling (stride `k`, trailing rows/columns dropped).
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let &[_, _, h, w] = self.val(ix).shape() else {
            return Err(shape_err(
                "maxpool2d",
                format!("{:?} is not NCHW", self.val(ix).shape()),
            ));
        };
        if k == 0 || h < k || w < k {
            return Err(shape_err("maxpool2d", format!("kernel {k} on {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        self.pool_with(
            ix,
            oh,
            ow,
            |o, _| (o * k, o * k + k),
            |o, _| (o * k, o * k + k),
        )
    }

    /// Max pooling onto a fixed `oh×ow` grid; bin `i` spans
    /// `floor(i·H/oh) .. ceil((i+1)·H/oh)`.
    pub fn adaptive_maxpool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let &[_, _, h, w] = self.val(ix).shape() else {
            return Err(shape_err(
                "adaptive_maxpool2d",
                format!("{:?} is not NCHW", self.val(ix).shape()),
            ));
        };
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(shape_err(
                "adaptive_maxpool2d",
                format!("cannot pool {h}x{w} onto {oh}x{ow}"),
            ));
        }
        self.pool_with(
            ix,
            oh,
            ow,
            |i, _| (i * h / oh, ((i + 1) * h).div_ceil(oh)),
            |j, _| (j * w / ow, ((j + 1) * w).div_ceil(ow)),
        )
    }

    fn pool_with(
        &mut self,
        ix: usize,
        oh: usize,
        ow: usize,
        rows: impl Fn(usize, usize) -> (usize, usize),
        cols: impl Fn(usize, usize) -> (usize, usize),
    ) -> Result<Var> {
        let xv = self.val(ix);
        let &[n, c, h, w] = xv.shape() else {
            unreachable!("checked by caller")
        };
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            let src = &xv.data()[base..base + h * w];
            for i in 0..oh {
                let (r0, r1) = rows(i, h);
                for j in 0..ow {
                    let (c0, c1) = cols(j, w);
                    let mut best = r0 * w + c0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            if src[r * w + cc] > src[best] || src[r * w + cc].is_nan() {
                                best = r * w + cc;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(base + best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record(out, Op::MaxPool { x: ix, argmax }))
    }

    /// Mean over the spatial axes: `[n,c,h,w] -> [n,c]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        let &[n, c, h, w] = xv.shape() else {
            return Err(shape_err(
                "global_avgpool",
                format!("{:?} is not NCHW", xv.shape()),
            ));
        };
        let area = (h * w) as f64;
        let out: Vec<f64> = xv
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.record(out, Op::GlobalAvgPool(ix)))
    }
}

pub(crate) fn maxpool_backward(
    tape: &Tape,
    x: usize,
    argmax: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    if let Some(dx) = grad_slot(tape, grads, x) {
        for (&src, &gv) in argmax.iter().zip(g) {
            dx[src] += gv;
        }
    }
}

pub(crate) fn global_avgpool_backward(
    tape: &Tape,
    x: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let s = tape.val(x).shape();
    let area = s[2] * s[3];
    if let Some(dx) = grad_slot(tape, grads, x) {
        for (plane, &gv) in dx.chunks_mut(area).zip(g) {
            let share = gv / area as f64;
            for d in plane {
                *d += share;
            }
        }
    }
}
