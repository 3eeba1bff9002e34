use crate::error::{shape_err, NumericsError, Result};
use crate::ops::elementwise::sigmoid;
use crate::ops::Op;
use crate::tape::{accumulate, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    ///
    /// Evaluated as `max(z,0) - z·y + ln(1 + e^{-|z|})`, which never takes
    /// the log of a saturated probability.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let il = self.check(logits)?;
        let z = self.val(il);
        if z.numel() != labels.len() || labels.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                format!(
                    "{} logits {:?} vs {} labels",
                    z.numel(),
                    z.shape(),
                    labels.len()
                ),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(NumericsError::InvalidArgument(format!(
                "label {bad} is not 0 or 1"
            )));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| bce_term(z, y))
            .sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.record(
            out,
            Op::BceWithLogits {
                logits: il,
                labels: labels.to_vec(),
            },
        ))
    }
}

pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn bce_backward(
    tape: &Tape,
    logits: usize,
    labels: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let n = labels.len() as f64;
    let z = tape.val(logits).data();
    let dz = z
        .iter()
        .zip(labels)
        .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
        .collect();
    accumulate(tape, grads, logits, dz);
}
