//! Property-based invariants of the tensor primitives and the optimizer.

use proptest::prelude::*;
use transmatcher::optim::{clip_grad_norm, global_grad_norm};
use transmatcher::tensor::Tensor;
use transmatcher::{ParamStore, Precision, Tape};

fn finite_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, rows * cols)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in finite_matrix(3, 5)) {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&Tensor::from_vec(vec![3, 5], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for row in v.chunks(5) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn max_reduce_gathers_its_argmax(data in finite_matrix(4, 6)) {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&Tensor::from_vec(vec![4, 6], data.clone()).unwrap());
        let (m, argmax) = tape.max_reduce(x, 1).unwrap();
        let v = tape.value(m);
        for i in 0..4 {
            prop_assert_eq!(v[i], data[i * 6 + argmax[i]]);
            for j in 0..6 {
                prop_assert!(v[i] >= data[i * 6 + j]);
            }
        }
    }

    #[test]
    fn clipping_never_increases_the_gradient_norm(
        grads in prop::collection::vec(-100.0f64..100.0, 12),
        max_norm in 0.1f64..10.0,
    ) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::zeros(vec![12])).unwrap();
        store.get_mut(id).grad = Some(grads);
        let before = global_grad_norm(&store);
        let reported = clip_grad_norm(&mut store, max_norm).unwrap();
        let after = global_grad_norm(&store);
        prop_assert!((reported - before).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= max_norm + 1e-9);
        if before <= max_norm {
            prop_assert!((after - before).abs() <= 1e-12);
        }
    }

    #[test]
    fn bce_with_logits_is_nonnegative(
        logits in prop::collection::vec(-30.0f64..30.0, 6),
        labels in prop::collection::vec(0u8..=1, 6),
    ) {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.constant(&Tensor::from_vec(vec![6, 1], logits).unwrap());
        let z: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let y = tape.bce_with_logits(x, &z).unwrap();
        prop_assert!(tape.value(y).iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
