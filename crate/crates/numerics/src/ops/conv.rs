use crate::error::{shape_err, Result};
use crate::ops::Op;
use crate::tape::{grad_slot, Tape, Var};
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, Tensor};

pub(crate) struct Conv2dRecord {
    pub(crate) x: usize,
    pub(crate) w: usize,
    pub(crate) b: Option<usize>,
    geom: Geometry,
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

impl Tape {
    /// 2-D cross-correlation over NCHW input with OIHW weights, square stride and zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(weight)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (xv, wv) = (self.val(ix), self.val(iw));
        let (&[n, cin, h, w], &[cout, cin2, kh, kw]) = (xv.shape(), wv.shape()) else {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}", xv.shape(), wv.shape()),
            ));
        };
        if cin != cin2 || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, stride {stride}",
                    xv.shape(),
                    wv.shape()
                ),
            ));
        }
        if let Some(ib) = ib {
            if self.val(ib).shape() != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {cout} output channels", self.val(ib).shape()),
                ));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (+{padding})"),
            ));
        }
        let geom = Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };

        let (patch, pos) = (geom.patch(), geom.positions());
        let mut out = vec![0.0; n * cout * pos];
        let mut col = vec![0.0; patch * pos];
        let bias_data = ib.map(|ib| self.val(ib).data());
        for s in 0..n {
            im2col(
                &geom,
                &xv.data()[s * cin * h * w..(s + 1) * cin * h * w],
                &mut col,
            );
            let dst = &mut out[s * cout * pos..(s + 1) * cout * pos];
            if let Some(b) = bias_data {
                for (row, &bv) in dst.chunks_mut(pos).zip(b) {
                    row.fill(bv);
                }
            }
            gemm(cout, patch, pos, wv.data(), &col, dst);
        }
        let out = Tensor::new(vec![n, cout, geom.oh, geom.ow], out)?;
        Ok(self.record(
            out,
            Op::Conv2d(Conv2dRecord {
                x: ix,
                w: iw,
                b: ib,
                geom,
            }),
        ))
    }
}

fn im2col(g: &Geometry, img: &[f64], col: &mut [f64]) {
    let pos = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * pos..(row + 1) * pos];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src =
                        &img[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, col: &[f64], img: &mut [f64]) {
    let pos = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * pos..(row + 1) * pos];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            img[base + jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    tape: &Tape,
    r: &Conv2dRecord,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let geom = r.geom;
    let (patch, pos) = (geom.patch(), geom.positions());
    let img_len = geom.cin * geom.h * geom.w;
    let xv = tape.val(r.x).data();
    let wv = tape.val(r.w).data();

    if let Some(b) = r.b {
        if let Some(db) = grad_slot(tape, grads, b) {
            for s in 0..geom.n {
                for (o, d) in db.iter_mut().enumerate() {
                    let base = (s * geom.cout + o) * pos;
                    *d += g[base..base + pos].iter().sum::<f64>();
                }
            }
        }
    }

    let need_w = tape.nodes[r.w].requires_grad;
    let need_x = tape.nodes[r.x].requires_grad;
    let mut col = vec![0.0; patch * pos];
    if need_w {
        let dw = grad_slot(tape, grads, r.w).expect("requires grad");
        for s in 0..geom.n {
            im2col(&geom, &xv[s * img_len..(s + 1) * img_len], &mut col);
            // dW[cout×patch] += dOut[cout×pos] · colᵀ
            gemm_a_bt(
                geom.cout,
                patch,
                pos,
                &g[s * geom.cout * pos..(s + 1) * geom.cout * pos],
                &col,
                dw,
            );
        }
    }
    if need_x {
        let dx = grad_slot(tape, grads, r.x).expect("requires grad");
        for s in 0..geom.n {
            col.fill(0.0);
            // dcol[patch×pos] = Wᵀ · dOut
            gemm_at_b(
                geom.cout,
                patch,
                pos,
                wv,
                &g[s * geom.cout * pos..(s + 1) * geom.cout * pos],
                &mut col,
            );
            col2im(&geom, &col, &mut dx[s * img_len..(s + 1) * img_len]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_kernel_without_padding_is_a_dot_product() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let k: Vec<f64> = vec![0.0, 1.0, 0.0, 2.0, 0.0, -1.0, 0.5, 0.0, 0.0];
        let want: f64 = x.iter().zip(&k).map(|(a, b)| a * b).sum();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, 1, 3, 3], x).unwrap());
        let kv = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let y = tape.conv2d(xv, kv, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data()[0], want);
    }

    #[test]
    fn padding_and_stride_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 7, 6]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 3]);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[4, 3, 3, 3]"));
    }
}
