use crate::error::{shape_err, Result};
use crate::ops::Op;
use crate::tape::{grad_slot, Tape, Var};
use crate::tensor::Tensor;

pub(crate) struct NormRecord {
    pub(crate) x: usize,
    pub(crate) gamma: usize,
    pub(crate) beta: usize,
    xhat: Vec<f64>,
    /// Per channel for batch norm, per sample for layer norm.
    inv_std: Vec<f64>,
}

/// Whether batch norm normalizes with the batch's own statistics or with
/// accumulated running estimates.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    Train,
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

/// Per-channel statistics of one training batch; `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exponential moving averages used by batch norm at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }

    pub fn mode(&self) -> NormMode<'_> {
        NormMode::Eval {
            running_mean: &self.mean,
            running_var: &self.var,
        }
    }
}

fn nchw_like(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c, rest @ ..] if !rest.is_empty() => Some((*n, *c, rest.iter().product())),
        [n, c] => Some((*n, *c, 1)),
        _ => None,
    }
}

impl Tape {
    /// Batch normalization over every axis except channels (axis 1).
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into its [`RunningStats`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let xv = self.val(ix);
        let (n, c, s) = nchw_like(xv.shape())
            .ok_or_else(|| shape_err("batch_norm", format!("input {:?}", xv.shape())))?;
        let (gv, bv) = (self.val(ig).data(), self.val(ib).data());
        if self.val(ig).shape() != [c] || self.val(ib).shape() != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "input {:?} with gamma {:?}, beta {:?}",
                    xv.shape(),
                    self.val(ig).shape(),
                    self.val(ib).shape()
                ),
            ));
        }
        let data = xv.data();
        let m = (n * s) as f64;

        let (mean, var_biased, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * s;
                        acc += data[base..base + s].iter().sum::<f64>();
                    }
                    let mu = acc / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * s;
                        sq += data[base..base + s]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(shape_err(
                        "batch_norm",
                        format!(
                            "running stats for {} channels, input has {c}",
                            running_mean.len()
                        ),
                    ));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };

        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let h = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let record = NormRecord {
            x: ix,
            gamma: ig,
            beta: ib,
            xhat,
            inv_std,
        };
        let op = if stats.is_some() {
            Op::BatchNormTrain(record)
        } else {
            Op::BatchNormEval(record)
        };
        Ok((self.record(out, op), stats))
    }

    /// Layer normalization over all non-batch axes with a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let xv = self.val(ix);
        let (n, c, s) = nchw_like(xv.shape())
            .ok_or_else(|| shape_err("layer_norm", format!("input {:?}", xv.shape())))?;
        if self.val(ig).shape() != [c] || self.val(ib).shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?} with gamma {:?}, beta {:?}",
                    xv.shape(),
                    self.val(ig).shape(),
                    self.val(ib).shape()
                ),
            ));
        }
        let (gv, bv) = (self.val(ig).data(), self.val(ib).data());
        let d = c * s;
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        let mut inv_std = Vec::with_capacity(n);
        for (b, sample) in xv.data().chunks(d).enumerate() {
            let mu = sample.iter().sum::<f64>() / d as f64;
            let var = sample.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (k, v) in sample.iter().enumerate() {
                let ch = k / s;
                let h = (v - mu) * is;
                xhat[b * d + k] = h;
                out[b * d + k] = gv[ch] * h + bv[ch];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.record(
            out,
            Op::LayerNorm(NormRecord {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            }),
        ))
    }
}

fn affine_grads(
    tape: &Tape,
    r: &NormRecord,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    c: usize,
    s: usize,
) {
    if let Some(dg) = grad_slot(tape, grads, r.gamma) {
        for (i, (gv, h)) in g.iter().zip(&r.xhat).enumerate() {
            dg[(i / s) % c] += gv * h;
        }
    }
    if let Some(db) = grad_slot(tape, grads, r.beta) {
        for (i, gv) in g.iter().enumerate() {
            db[(i / s) % c] += gv;
        }
    }
}

pub(crate) fn batch_norm_train_backward(
    tape: &Tape,
    r: &NormRecord,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (n, c, s) = nchw_like(tape.val(r.x).shape()).expect("checked in forward");
    affine_grads(tape, r, g, grads, c, s);
    let gamma = tape.val(r.gamma).data();
    let m = (n * s) as f64;
    if let Some(dx) = grad_slot(tape, grads, r.x) {
        for ch in 0..c {
            let (mut sum1, mut sum2) = (0.0, 0.0);
            for b in 0..n {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let dh = g[i] * gamma[ch];
                    sum1 += dh;
                    sum2 += dh * r.xhat[i];
                }
            }
            let k = r.inv_std[ch] / m;
            for b in 0..n {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let dh = g[i] * gamma[ch];
                    dx[i] += k * (m * dh - sum1 - r.xhat[i] * sum2);
                }
            }
        }
    }
}

pub(crate) fn batch_norm_eval_backward(
    tape: &Tape,
    r: &NormRecord,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (_, c, s) = nchw_like(tape.val(r.x).shape()).expect("checked in forward");
    affine_grads(tape, r, g, grads, c, s);
    let gamma = tape.val(r.gamma).data();
    if let Some(dx) = grad_slot(tape, grads, r.x) {
        for (i, gv) in g.iter().enumerate() {
            let ch = (i / s) % c;
            dx[i] += gv * gamma[ch] * r.inv_std[ch];
        }
    }
}

pub(crate) fn layer_norm_backward(
    tape: &Tape,
    r: &NormRecord,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (_, c, s) = nchw_like(tape.val(r.x).shape()).expect("checked in forward");
    affine_grads(tape, r, g, grads, c, s);
    let gamma = tape.val(r.gamma).data();
    let d = c * s;
    if let Some(dx) = grad_slot(tape, grads, r.x) {
        for (b, &is) in r.inv_std.iter().enumerate() {
            let range = b * d..(b + 1) * d;
            let (mut sum1, mut sum2) = (0.0, 0.0);
            for i in range.clone() {
                let dh = g[i] * gamma[(i - b * d) / s];
                sum1 += dh;
                sum2 += dh * r.xhat[i];
            }
            let k = is / d as f64;
            for i in range {
                let dh = g[i] * gamma[(i - b * d) / s];
                dx[i] += k * (d as f64 * dh - sum1 - r.xhat[i] * sum2);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_output_is_normalized_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 3, 2, 2], 2.0, &mut rng));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batch_norm(x, g, b, NormMode::Train, 1e-5).unwrap();
        assert!(stats.is_some());
        let y = tape.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..4).map(move |k| (n * 3 + ch) * 4 + k))
                .map(|i| y[i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_mode_is_batch_size_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stats = RunningStats {
            mean: vec![0.3, -0.2],
            var: vec![1.5, 0.7],
        };
        let batch = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let g = tape.constant(Tensor::new(vec![2], vec![1.2, 0.8]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![0.1, -0.1]).unwrap());
        let (full, _) = tape.batch_norm(x, g, b, stats.mode(), 1e-5).unwrap();
        let (again, _) = tape.batch_norm(x, g, b, stats.mode(), 1e-5).unwrap();
        assert_eq!(tape.value(full), tape.value(again));

        let first = Tensor::new(vec![1, 2, 2, 2], batch.data()[..8].to_vec()).unwrap();
        let x1 = tape.constant(first);
        let (single, _) = tape.batch_norm(x1, g, b, stats.mode(), 1e-5).unwrap();
        assert_eq!(tape.value(single).data(), &tape.value(full).data()[..8]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut r = RunningStats::new(1);
        r.update(
            &BatchStats {
                mean: vec![1.0],
                var: vec![3.0],
            },
            0.1,
        );
        assert!((r.mean[0] - 0.1).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }
}
