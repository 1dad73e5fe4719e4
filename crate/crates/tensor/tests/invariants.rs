//! Property-based invariants for the nonlinear blocks.

use proptest::prelude::*;
use sarcaps_tensor::{Tape, Tensor};

proptest! {
    /// Softmax outputs are a probability vector for any finite input.
    #[test]
    fn softmax_rows_are_distributions(raw in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], raw).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let out = tape.data(y);
        for r in 0..3 {
            let row = &out[r * 4..(r + 1) * 4];
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for &v in row {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    /// Softmax is shift-invariant along the reduced axis.
    #[test]
    fn softmax_shift_invariance(raw in proptest::collection::vec(-10.0f64..10.0, 6), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = raw.iter().map(|v| v + shift).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![6], raw).unwrap());
        let b = tape.constant(Tensor::new(vec![6], shifted).unwrap());
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        for (u, v) in tape.data(ya).iter().zip(tape.data(yb)) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    /// Squashed vectors always have norm strictly below one.
    #[test]
    fn squash_norm_strictly_below_one(raw in proptest::collection::vec(-1e3f64..1e3, 8)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 8], raw).unwrap());
        let v = tape.squash_rows(x).unwrap();
        let norm: f64 = tape.data(v).iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(norm < 1.0, "norm {norm}");
    }

    /// Squash preserves direction: output is a nonnegative multiple of input.
    #[test]
    fn squash_preserves_direction(raw in proptest::collection::vec(-10.0f64..10.0, 4)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4], raw.clone()).unwrap());
        let v = tape.squash_rows(x).unwrap();
        let out = tape.data(v);
        // cross-ratio check: out[i] * raw[j] == out[j] * raw[i]
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((out[i] * raw[j] - out[j] * raw[i]).abs() < 1e-8);
            }
        }
        let dot: f64 = out.iter().zip(&raw).map(|(a, b)| a * b).sum();
        prop_assert!(dot >= 0.0);
    }
}
