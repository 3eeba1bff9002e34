//! Central finite-difference checks of every primitive over random shapes.

use m3fas_numerics::gradcheck::{check_gradients, GradCheckConfig};
use m3fas_numerics::{NormMode, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 24;

/// Reduce `y` to a scalar through fixed random weights so no gradient is trivially uniform.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn run<F>(name: &str, mut make: F)
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>),
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f) = make(&mut rng);
        let cfg = GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        };
        let report = check_gradients(&inputs, |t, v| f(t, v), &cfg).unwrap();
        assert!(
            report.passes(TOL),
            "{name} seed {seed}: rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn elementwise_binary() {
    run("add/sub/mul", |rng| {
        let s = dims(rng, 3, 1, 4);
        let seed = rng.random();
        (
            vec![randn(rng, &s), randn(rng, &s)],
            Box::new(move |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[1])?;
                let c = t.mul(b, v[1])?;
                let d = t.mul(c, v[0])?;
                weighted_sum(t, d, seed)
            }),
        )
    });
}

#[test]
fn affine_scale_and_scale_by() {
    run("affine/scale_by", |rng| {
        let s = dims(rng, 2, 1, 5);
        let seed = rng.random();
        (
            vec![randn(rng, &s), randn(rng, &[1])],
            Box::new(move |t, v| {
                let a = t.affine(v[0], 1.7, -0.3)?;
                let b = t.scale(a, -0.6)?;
                let c = t.scale_by(b, v[1])?;
                weighted_sum(t, c, seed)
            }),
        )
    });
}

#[test]
fn relu_and_sigmoid() {
    run("relu/sigmoid", |rng| {
        let s = dims(rng, 3, 1, 4);
        let seed = rng.random();
        (
            vec![randn(rng, &s)],
            Box::new(move |t, v| {
                let a = t.relu(v[0])?;
                let b = t.sigmoid(v[0])?;
                let c = t.add(a, b)?;
                weighted_sum(t, c, seed)
            }),
        )
    });
}

#[test]
fn softmax_last_axis() {
    run("softmax", |rng| {
        let s = dims(rng, 3, 1, 5);
        let seed = rng.random();
        (
            vec![randn(rng, &s)],
            Box::new(move |t, v| {
                let a = t.softmax(v[0])?;
                weighted_sum(t, a, seed)
            }),
        )
    });
}

#[test]
fn mean_reduction() {
    run("mean", |rng| {
        let s = dims(rng, 2, 1, 6);
        (
            vec![randn(rng, &s)],
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean(sq))
            }),
        )
    });
}

#[test]
fn matmul_2d_and_batched() {
    run("matmul", |rng| {
        let batched = rng.random_bool(0.5);
        let [b, m, k, n] = <[usize; 4]>::try_from(dims(rng, 4, 1, 4)).unwrap();
        let (sa, sb) = if batched {
            (vec![b, m, k], vec![b, k, n])
        } else {
            (vec![m, k], vec![k, n])
        };
        let seed = rng.random();
        (
            vec![randn(rng, &sa), randn(rng, &sb)],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, seed)
            }),
        )
    });
}

#[test]
fn transpose_last2() {
    run("transpose", |rng| {
        let s = dims(rng, 3, 1, 4);
        let seed = rng.random();
        (
            vec![randn(rng, &s)],
            Box::new(move |t, v| {
                let y = t.transpose_last2(v[0])?;
                weighted_sum(t, y, seed)
            }),
        )
    });
}

#[test]
fn linear_layer() {
    run("linear", |rng| {
        let [n, i, o] = <[usize; 3]>::try_from(dims(rng, 3, 1, 5)).unwrap();
        let seed = rng.random();
        (
            vec![randn(rng, &[n, i]), randn(rng, &[o, i]), randn(rng, &[o])],
            Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y, seed)
            }),
        )
    });
}

#[test]
fn conv2d_with_and_without_bias() {
    run("conv2d", |rng| {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let h = rng.random_range(k..=6);
        let w = rng.random_range(k..=6);
        let with_bias = rng.random_bool(0.5);
        let seed = rng.random();
        (
            vec![
                randn(rng, &[n, cin, h, w]),
                randn(rng, &[cout, cin, k, k]),
                randn(rng, &[cout]),
            ],
            Box::new(move |t, v| {
                let bias = with_bias.then_some(v[2]);
                let y = t.conv2d(v[0], v[1], bias, stride, pad)?;
                weighted_sum(t, y, seed)
            }),
        )
    });
}

#[test]
fn pooling() {
    run("maxpool/adaptive/global", |rng| {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let h = rng.random_range(2..=7);
        let w = rng.random_range(2..=7);
        let oh = rng.random_range(1..=h);
        let ow = rng.random_range(1..=w);
        let seed = rng.random();
        (
            vec![randn(rng, &[n, c, h, w])],
            Box::new(move |t, v| {
                let a = t.maxpool2d(v[0], 2)?;
                let b = t.adaptive_maxpool2d(v[0], oh, ow)?;
                let g = t.global_avgpool(v[0])?;
                let (sa, sb, sg) = (
                    weighted_sum(t, a, seed)?,
                    weighted_sum(t, b, seed + 1)?,
                    weighted_sum(t, g, seed + 2)?,
                );
                let ab = t.add(sa, sb)?;
                t.add(ab, sg)
            }),
        )
    });
}

#[test]
fn batch_norm_train_and_eval() {
    run("batch_norm", |rng| {
        let n = rng.random_range(2..=4);
        let c = rng.random_range(1..=3);
        let hw = dims(rng, 2, 1, 3);
        let eval = rng.random_bool(0.5);
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let seed = rng.random();
        (
            vec![
                randn(rng, &[n, c, hw[0], hw[1]]),
                randn(rng, &[c]),
                randn(rng, &[c]),
            ],
            Box::new(move |t, v| {
                let mode = if eval {
                    NormMode::Eval {
                        running_mean: &mean,
                        running_var: &var,
                    }
                } else {
                    NormMode::Train
                };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?;
                weighted_sum(t, y, seed)
            }),
        )
    });
}

#[test]
fn layer_norm() {
    run("layer_norm", |rng| {
        let n = rng.random_range(1..=3);
        let c = rng.random_range(1..=3);
        let hw = dims(rng, 2, 1, 3);
        let seed = rng.random();
        (
            vec![
                randn(rng, &[n, c, hw[0], hw[1]]),
                randn(rng, &[c]),
                randn(rng, &[c]),
            ],
            Box::new(move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, seed)
            }),
        )
    });
}

#[test]
fn shape_ops() {
    run("concat/slice/reshape/permute", |rng| {
        let s = dims(rng, 3, 1, 4);
        let extra = rng.random_range(1..=3);
        let mut s2 = s.clone();
        s2[1] = extra;
        let seed = rng.random();
        (
            vec![randn(rng, &s), randn(rng, &s2)],
            Box::new(move |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let total = t.shape(c)[1];
                let sl = t.slice(c, 1, 1, total - 1)?;
                let shape = t.shape(sl).to_vec();
                let r = t.reshape(sl, &[shape.iter().product()])?;
                let back = t.reshape(r, &shape)?;
                let p = t.permute(back, &[2, 0, 1])?;
                weighted_sum(t, p, seed)
            }),
        )
    });
}

#[test]
fn bce_with_logits() {
    run("bce", |rng| {
        let n = rng.random_range(1..=8);
        let labels: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..2u8)))
            .collect();
        (
            vec![Tensor::randn(&[n, 1], 3.0, rng)],
            Box::new(move |t, v| t.bce_with_logits(v[0], &labels)),
        )
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let s = dims(&mut rng, 3, 1, 9);
        let x = Tensor::randn(&s, 30.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v).unwrap();
        let last = s[2];
        for row in tape.value(y).data().chunks(last) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn eval_batch_norm_is_pure_and_batch_size_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[5, 2, 3, 3], 1.0, &mut rng);
    let mean = [0.2, -0.1];
    let var = [1.5, 0.7];
    let mode = NormMode::Eval {
        running_mean: &mean,
        running_var: &var,
    };
    let forward = |x: Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::new(vec![2], vec![1.3, 0.4]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let (y, stats) = tape.batch_norm(xv, g, b, mode, 1e-5).unwrap();
        assert!(stats.is_none());
        tape.value(y).clone()
    };
    let full = forward(x.clone());
    assert_eq!(full, forward(x.clone()));
    let per = 2 * 3 * 3;
    let first = Tensor::new(vec![1, 2, 3, 3], x.data()[..per].to_vec()).unwrap();
    assert_eq!(forward(first).data(), &full.data()[..per]);
}

#[test]
fn relu_and_max_pool_propagate_nan() {
    let mut data = vec![1.0; 16];
    data[5] = f64::NAN;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 4, 4], data).unwrap());
    let r = tape.relu(x).unwrap();
    assert!(tape.value(r).data()[5].is_nan());
    let p = tape.maxpool2d(r, 2).unwrap();
    assert!(tape.value(p).data()[0].is_nan());
    assert!(tape.value(p).data()[1..].iter().all(|v| *v == 1.0));
    let q = tape.adaptive_maxpool2d(x, 1, 1).unwrap();
    assert!(tape.value(q).data()[0].is_nan());
}
