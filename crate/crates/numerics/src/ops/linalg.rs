use crate::error::{shape_err, Result};
use crate::ops::Op;
use crate::tape::{grad_slot, Tape, Var};
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, Tensor};

/// (batch, m, k, n) for a 2-D or batched 3-D product.
fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Some((1, *m, *k, *n)),
        ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => Some((*b, *m, *k, *n)),
        _ => None,
    }
}

impl Tape {
    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape())
            .ok_or_else(|| shape_err("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())))?;
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[t * m * k..],
                &bv.data()[t * k * n..],
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let shape = if av.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.record(out, Op::Matmul { a: ia, b: ib }))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = self.val(ix);
        let r = xv.rank();
        if r < 2 {
            return Err(shape_err("transpose", format!("rank {r} < 2")));
        }
        let (rows, cols) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let data = transpose_blocks(xv.data(), rows, cols);
        let mut shape = xv.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, Op::TransposeLast2(ix)))
    }

    /// Dense layer: `x[n,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xv, wv, bv) = (self.val(ix), self.val(iw), self.val(ib));
        let (n, fin, fout) = match (xv.shape(), wv.shape(), bv.shape()) {
            ([n, fin], [fout, fin2], [fout2]) if fin == fin2 && fout == fout2 => (*n, *fin, *fout),
            (sx, sw, sb) => {
                return Err(shape_err(
                    "linear",
                    format!("x {sx:?}, weight {sw:?}, bias {sb:?}"),
                ))
            }
        };
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm_a_bt(n, fout, fin, xv.data(), wv.data(), &mut out);
        let out = Tensor::new(vec![n, fout], out)?;
        Ok(self.record(
            out,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
            },
        ))
    }
}

fn transpose_blocks(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

pub(crate) fn matmul_backward(
    tape: &Tape,
    a: usize,
    b: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (av, bv) = (tape.val(a), tape.val(b));
    let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape()).expect("checked in forward");
    if let Some(da) = grad_slot(tape, grads, a) {
        for t in 0..batch {
            // dA = dC · Bᵀ
            gemm_a_bt(
                m,
                k,
                n,
                &g[t * m * n..(t + 1) * m * n],
                &bv.data()[t * k * n..(t + 1) * k * n],
                &mut da[t * m * k..(t + 1) * m * k],
            );
        }
    }
    if let Some(db) = grad_slot(tape, grads, b) {
        for t in 0..batch {
            // dB = Aᵀ · dC
            gemm_at_b(
                m,
                k,
                n,
                &av.data()[t * m * k..(t + 1) * m * k],
                &g[t * m * n..(t + 1) * m * n],
                &mut db[t * k * n..(t + 1) * k * n],
            );
        }
    }
}

pub(crate) fn transpose_backward(tape: &Tape, x: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let s = tape.val(x).shape();
    let r = s.len();
    // the output had (cols, rows) as its trailing axes
    let back = transpose_blocks(g, s[r - 1], s[r - 2]);
    crate::tape::accumulate(tape, grads, x, back);
}

pub(crate) fn linear_backward(
    tape: &Tape,
    x: usize,
    w: usize,
    b: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (xv, wv) = (tape.val(x), tape.val(w));
    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
    let fout = wv.shape()[0];
    if let Some(dx) = grad_slot(tape, grads, x) {
        gemm(n, fout, fin, g, wv.data(), dx);
    }
    if let Some(dw) = grad_slot(tape, grads, w) {
        gemm_at_b(n, fout, fin, g, xv.data(), dw);
    }
    if let Some(db) = grad_slot(tape, grads, b) {
        for row in g.chunks(fout) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2d_small_case() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![2, 2], vec![2.0, 1.0, 0.5, 3.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.1).abs() < 1e-15 && (d[1] + 2.3).abs() < 1e-15);
    }

    #[test]
    fn transpose_round_trips() {
        let mut tape = Tape::new();
        let x =
            tape.constant(Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap());
        let t = tape.transpose_last2(x).unwrap();
        assert_eq!(tape.shape(t), &[2, 3, 2]);
        let tt = tape.transpose_last2(t).unwrap();
        assert_eq!(tape.value(tt), tape.value(x));
    }
}
