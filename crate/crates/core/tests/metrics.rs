use m3fas_core::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores on a coarse grid so that ties are common.
fn random_set(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> ScoreSet {
    loop {
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let scores = labels
            .iter()
            .map(|&l| {
                let s: f64 = rng.random::<f64>() + 0.4 * f64::from(l);
                if coarse {
                    (s * 8.0).round() / 8.0
                } else {
                    s
                }
            })
            .collect();
        return ScoreSet::new(scores, labels).unwrap();
    }
}

fn mann_whitney(s: &ScoreSet) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in s.scores().iter().enumerate() {
        if s.labels()[i] != BONAFIDE {
            continue;
        }
        for (j, &sj) in s.scores().iter().enumerate() {
            if s.labels()[j] != ATTACK {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// (FPR, FNR) vertices, one per distinct threshold, each counted by a full scan.
fn brute_vertices(s: &ScoreSet) -> Vec<(f64, f64)> {
    let mut distinct: Vec<f64> = s.scores().to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let p = s.labels().iter().filter(|&&l| l == 1).count() as f64;
    let n = s.len() as f64 - p;
    let mut out = vec![(0.0, 1.0)];
    for t in distinct {
        let (mut fp, mut fneg) = (0.0, 0.0);
        for (&sc, &l) in s.scores().iter().zip(s.labels()) {
            if l == 0 && sc >= t {
                fp += 1.0;
            }
            if l == 1 && sc < t {
                fneg += 1.0;
            }
        }
        out.push((fp / n, fneg / p));
    }
    out
}

/// First point of a 10^7-step FPR grid at which the polyline FNR drops to or below FPR.
fn grid_eer(s: &ScoreSet) -> f64 {
    let v = brute_vertices(s);
    let steps = 10_000_000usize;
    let mut seg = 0;
    for k in 0..=steps {
        let x = k as f64 / steps as f64;
        while seg + 1 < v.len() && v[seg + 1].0 <= x {
            seg += 1;
        }
        // Lowest FNR among vertices at exactly this FPR, else interpolate forward.
        let fnr = if v[seg].0 == x {
            let mut m = v[seg].1;
            let mut j = seg;
            while j < v.len() && v[j].0 == x {
                m = m.min(v[j].1);
                j += 1;
            }
            m
        } else {
            let (a, b) = (v[seg], v[seg + 1]);
            a.1 + (x - a.0) / (b.0 - a.0) * (b.1 - a.1)
        };
        if x >= fnr {
            return x;
        }
    }
    1.0
}

#[test]
fn hand_cases_are_exact() {
    let c = ConfusionCounts {
        tp: 2,
        tn: 3,
        fp: 1,
        fn_: 2,
    };
    assert_eq!(hter(&c).unwrap(), 0.375);
    let c = ConfusionCounts {
        tp: 8,
        tn: 7,
        fp: 3,
        fn_: 2,
    };
    assert_eq!(acc(&c), 0.75);
    let perfect = ConfusionCounts {
        tp: 5,
        tn: 4,
        fp: 0,
        fn_: 0,
    };
    assert_eq!(acc(&perfect), 1.0);
    assert_eq!(hter(&perfect).unwrap(), 0.0);
    assert_eq!(acc(&perfect.complement()), 0.0);
    assert_eq!(
        hter(&ConfusionCounts {
            tp: 3,
            ..Default::default()
        }),
        Err(MetricsError::OneClassOnly)
    );
}

#[test]
fn auc_trivial_cases() {
    let s = ScoreSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1]).unwrap();
    assert_eq!(auc(&s).unwrap(), 1.0);
    assert_eq!(eer(&s).unwrap(), 0.0);
    let r = ScoreSet::new(vec![0.9, 0.8, 0.2, 0.1], vec![0, 0, 1, 1]).unwrap();
    assert_eq!(auc(&r).unwrap(), 0.0);
    assert_eq!(eer(&r).unwrap(), 1.0);
    let tied = ScoreSet::new(vec![0.5; 6], vec![0, 1, 1, 0, 0, 1]).unwrap();
    assert_eq!(auc(&tied).unwrap(), 0.5);
    assert_eq!(eer(&tied).unwrap(), 0.5);
}

#[test]
fn auc_matches_mann_whitney_on_100_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..100 {
        let s = random_set(&mut rng, 50, k % 2 == 0);
        let a = auc(&s).unwrap();
        let b = mann_whitney(&s);
        assert!((a - b).abs() <= 1e-12, "set {k}: {a} vs {b}");
    }
}

#[test]
fn eer_matches_dense_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..40 {
        let s = random_set(&mut rng, 10 + k, k % 3 == 0);
        let e = eer(&s).unwrap();
        let g = grid_eer(&s);
        assert!((e - g).abs() <= 1e-6, "set {k}: {e} vs {g}");
    }
}

#[test]
fn eer_crossing_has_equal_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let s = random_set(&mut rng, 30, true);
        let e = eer(&s).unwrap();
        let roc = roc_curve(&s).unwrap();
        let max_fpr = roc.fpr.iter().cloned().fold(0.0, f64::max);
        assert!(e <= max_fpr + 1e-15);
        // FNR on the polyline at FPR = e must equal e.
        let crossed = (0..roc.len() - 1).any(|i| {
            let (x0, x1) = (roc.fpr[i], roc.fpr[i + 1]);
            let (y0, y1) = (roc.fnr(i), roc.fnr(i + 1));
            if x0 == x1 {
                x0 == e && y1 - 1e-9 <= e && e <= y0 + 1e-9
            } else if x0 <= e && e <= x1 {
                let y = y0 + (e - x0) / (x1 - x0) * (y1 - y0);
                (y - e).abs() <= 1e-9
            } else {
                false
            }
        });
        assert!(crossed);
    }
}

#[test]
fn roc_has_one_step_per_distinct_score() {
    let s = ScoreSet::new(vec![0.3, 0.3, 0.7, 0.1, 0.7], vec![0, 1, 1, 0, 0]).unwrap();
    let roc = roc_curve(&s).unwrap();
    assert_eq!(roc.thresholds, vec![f64::INFINITY, 0.7, 0.3, 0.1]);
    assert_eq!(roc.fpr.last(), Some(&1.0));
    assert_eq!(roc.tpr.last(), Some(&1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_is_invariant_under_increasing_maps(seed in any::<u64>(), coarse in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut rng, 40, coarse);
        let base = auc(&s).unwrap();
        let maps: [fn(f64) -> f64; 3] = [f64::exp, |x| 3.0 * x - 7.0, |x| x * x * x];
        for f in maps {
            let t = ScoreSet::new(s.scores().iter().map(|&x| f(x)).collect(), s.labels().to_vec()).unwrap();
            prop_assert!((auc(&t).unwrap() - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn flipped_labels_complement_auc(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut rng, 40, false);
        let flipped = ScoreSet::new(s.scores().to_vec(), s.labels().iter().map(|l| 1 - l).collect()).unwrap();
        prop_assert!((auc(&s).unwrap() + auc(&flipped).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn hter_bounds_and_complement(seed in any::<u64>(), thr in -0.5f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut rng, 30, true);
        let c = confusion_at(&s, thr);
        prop_assert_eq!(c.total(), s.len());
        let h = hter(&c).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((hter(&c.complement()).unwrap() - (1.0 - h)).abs() <= 1e-15);
    }
}
