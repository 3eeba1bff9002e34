//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference half step.
    pub step: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    /// Coordinates sampled per input; inputs smaller than this are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
    /// Leave out coordinates whose stencil crosses a ReLU or max-pool switch,
    /// where a central difference does not estimate the derivative. Each such
    /// coordinate is rechecked with the largest step (down to `step`·1e-4)
    /// that stays on one smooth piece.
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords: 64,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Coordinates compared at the configured step.
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    /// Coordinates whose stencil straddled a kink (only with `skip_kinks`).
    pub kinks: usize,
    /// Worst relative error of kink coordinates rechecked with a smaller step.
    pub kink_max_rel_error: f64,
    /// Kink coordinates no step could isolate.
    pub unresolved_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Pick the coordinates to probe for each input.
pub fn sample_coords(inputs: &[Tensor], cfg: &GradCheckConfig) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.numel() <= cfg.max_coords {
            coords.extend((0..t.numel()).map(|c| (i, c)));
        } else {
            let mut picked = sample(&mut rng, t.numel(), cfg.max_coords).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|c| (i, c)));
        }
    }
    coords
}

/// Compare precomputed analytic gradients against central differences of `eval`.
pub fn compare_with_finite_differences(
    inputs: &[Tensor],
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig {
        skip_kinks: false,
        ..*cfg
    };
    compare(
        inputs,
        analytic,
        coords,
        |xs| Ok((eval(xs)?, Vec::new())),
        &[],
        &cfg,
    )
}

fn record(
    report: &mut GradCheckReport,
    input: usize,
    coord: usize,
    analytic: f64,
    numeric: f64,
    floor: f64,
) {
    let err = relative_error(analytic, numeric, floor);
    report.checked += 1;
    if err > report.max_rel_error || report.worst.is_none() {
        report.max_rel_error = err;
        report.worst = Some(Mismatch {
            input,
            coord,
            analytic,
            numeric,
        });
    }
}

/// `eval` returns the function value and its branch pattern; `base` is the
/// pattern at the unperturbed inputs.
fn compare(
    inputs: &[Tensor],
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    mut eval: impl FnMut(&[Tensor]) -> Result<(f64, Vec<usize>)>,
    base: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for &(i, c) in coords {
        let orig = work[i].data()[c];
        let a = analytic[i].data()[c];
        let mut stencil = |h: f64| -> Result<(f64, bool)> {
            work[i].data_mut()[c] = orig + h;
            let (plus, pp) = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let (minus, pm) = eval(&work)?;
            work[i].data_mut()[c] = orig;
            Ok(((plus - minus) / (2.0 * h), pp == base && pm == base))
        };
        let (numeric, smooth) = stencil(cfg.step)?;
        if !cfg.skip_kinks || smooth {
            record(&mut report, i, c, a, numeric, cfg.floor);
            continue;
        }
        report.kinks += 1;
        let mut resolved = false;
        for k in 1..=4 {
            let (numeric, smooth) = stencil(cfg.step * 10f64.powi(-k))?;
            if smooth {
                report.kink_max_rel_error = report
                    .kink_max_rel_error
                    .max(relative_error(a, numeric, cfg.floor));
                resolved = true;
                break;
            }
        }
        if !resolved {
            report.unresolved_kinks += 1;
        }
    }
    Ok(report)
}

/// Check every input gradient of the scalar function built by `f`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = if cfg.skip_kinks {
        tape.branch_pattern()
    } else {
        Vec::new()
    };
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let coords = sample_coords(inputs, cfg);
    compare(
        inputs,
        &analytic,
        &coords,
        |xs| {
            let mut tape = Tape::new();
            // Leaves keep the piecewise operations on record for the pattern.
            let vars: Vec<Var> = xs
                .iter()
                .map(|t| {
                    if cfg.skip_kinks {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let out = f(&mut tape, &vars)?;
            let pattern = if cfg.skip_kinks {
                tape.branch_pattern()
            } else {
                Vec::new()
            };
            Ok((tape.value(out).data()[0], pattern))
        },
        &base,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // analytic 2x supplied as 3x
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let wrong = Tensor::new(vec![2], vec![3.0, 6.0]).unwrap();
        let report = compare_with_finite_differences(
            &[x],
            &[wrong],
            &[(0, 0), (0, 1)],
            |xs| Ok(xs[0].data().iter().map(|v| v * v).sum()),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passes(1e-4));
        assert!((report.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn kinks_are_set_aside_and_rechecked() {
        // |x| near 0 built from two ReLUs: the stencil at x = 4e-6 crosses the kink.
        let x = Tensor::new(vec![2], vec![4e-6, 0.7]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let n = t.scale(v[0], -1.0)?;
            let (p, m) = (t.relu(v[0])?, t.relu(n)?);
            let a = t.add(p, m)?;
            Ok(t.sum(a))
        };
        let plain =
            check_gradients(std::slice::from_ref(&x), f, &GradCheckConfig::default()).unwrap();
        assert!(!plain.passes(1e-4));
        let cfg = GradCheckConfig {
            skip_kinks: true,
            ..GradCheckConfig::default()
        };
        let r = check_gradients(&[x], f, &cfg).unwrap();
        assert_eq!((r.checked, r.kinks, r.unresolved_kinks), (1, 1, 0));
        assert!(r.passes(1e-8) && r.kink_max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn relative_error_uses_floor_near_zero() {
        assert_eq!(relative_error(0.0, 1e-9, 1e-6), 1e-3);
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
    }
}
