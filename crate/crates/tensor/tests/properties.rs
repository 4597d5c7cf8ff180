use proptest::prelude::*;
use vkd_tensor::{exec, ops, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-20.0f64..20.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(x in (1usize..4, 1usize..7).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
        let y = ops::softmax(&x).unwrap();
        let c = x.shape()[1];
        for row in y.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn softmax_shift_invariant(x in tensor(vec![2, 5]), s in -50.0f64..50.0) {
        let a = ops::softmax(&x).unwrap();
        let b = ops::softmax(&ops::add_scalar(&x, s)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip(x in tensor(vec![2, 3, 4]), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let y = ops::permute(&x, &perm).unwrap();
        let mut inv = vec![0; 3];
        for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
        let z = ops::permute(&y, &inv).unwrap();
        prop_assert_eq!(z.data(), x.data());
    }

    #[test]
    fn parallel_and_sequential_agree(a in tensor(vec![40, 6]), b in tensor(vec![6, 3])) {
        exec::set_parallel(false);
        let s = ops::matmul(&a, &b).unwrap();
        exec::set_parallel(true);
        let p = ops::matmul(&a, &b).unwrap();
        prop_assert_eq!(s.data(), p.data());
    }

    #[test]
    fn attention_rows_are_convex_combinations(v in tensor(vec![1, 1, 4, 2]), q in tensor(vec![1, 1, 3, 2])) {
        let o = ops::scaled_dot_product_attention(&q, &v, &v, None).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = v.data().iter().skip(d).step_by(2).copied().collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
            for i in 0..3 {
                let o_id = o.data()[i * 2 + d];
                prop_assert!(o_id >= lo - 1e-9 && o_id <= hi + 1e-9);
            }
        }
    }
}
