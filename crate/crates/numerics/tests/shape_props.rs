use m3fas_numerics::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1e3f64..1e3, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #[test]
    fn concat_then_split_round_trips(
        outer in 1usize..4,
        inner in 1usize..4,
        sizes in prop::collection::vec(1usize..4, 1..5),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<Tensor> = sizes
            .iter()
            .map(|&s| Tensor::randn(&[outer, s, inner], 1.0, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let joined = tape.concat(&vars, 1).unwrap();
        let back = tape.split(joined, 1, &sizes).unwrap();
        for (orig, v) in parts.iter().zip(back) {
            prop_assert_eq!(tape.value(v), orig);
        }
    }

    #[test]
    fn permute_inverse_is_identity(x in tensor(vec![2, 3, 4])) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.permute(v, &[1, 2, 0]).unwrap();
        let q = tape.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(tape.value(q), &x);
    }

    #[test]
    fn softmax_rows_are_distributions(x in tensor(vec![3, 7])) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v).unwrap();
        for row in tape.value(y).data().chunks(7) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
