//! Property tests for tape invariants and checkpoint round trips.

use proptest::prelude::*;
use vital_core::tensor::{read_store, store_to_bytes, ParameterStore, Tape, Tensor};

proptest! {
    /// Softmax along the last axis is row-stochastic for any finite input.
    #[test]
    fn softmax_rows_are_stochastic(
        rows in 1usize..5,
        cols in 1usize..8,
        seed_vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
    ) {
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|i| seed_vals[i % seed_vals.len()] + i as f64 * 0.01).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        let y = tape.softmax_last_axis(x).unwrap();
        for r in 0..rows {
            let sum: f64 = tape.value(y).data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
            for &p in &tape.value(y).data()[r * cols..(r + 1) * cols] {
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    /// Fan-out accumulation: the gradient of mean(x + x) is bitwise twice
    /// the gradient of mean(x).
    #[test]
    fn fanout_accumulation_is_exact(
        vals in proptest::collection::vec(-100.0f64..100.0, 1..32),
    ) {
        let n = vals.len();

        let mut t1 = Tape::new();
        let x1 = t1.variable(Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
        let l1 = t1.mean(x1).unwrap();
        let g1 = t1.backward(l1).unwrap();
        let base = g1.wrt(x1).unwrap().data().to_vec();

        let mut t2 = Tape::new();
        let x2 = t2.variable(Tensor::new(vec![n], vals).unwrap()).unwrap();
        let s = t2.add(x2, x2).unwrap();
        let l2 = t2.mean(s).unwrap();
        let g2 = t2.backward(l2).unwrap();
        let doubled = g2.wrt(x2).unwrap().data();

        for (b, d) in base.iter().zip(doubled) {
            prop_assert_eq!((2.0 * b).to_bits(), d.to_bits());
        }
    }

    /// Checkpoint round trips preserve every f64 bit pattern, the freeze
    /// flag, shapes, and names.
    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        entries in proptest::collection::vec(
            (
                "[a-z][a-z0-9_.]{0,20}",
                proptest::collection::vec(any::<u64>(), 0..24),
                any::<bool>(),
            ),
            0..6,
        ),
    ) {
        let mut store = ParameterStore::new();
        for (i, (name, bits, frozen)) in entries.iter().enumerate() {
            let unique = format!("{name}{i}");
            let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let shape = vec![data.len()];
            store.insert(&unique, Tensor::new(shape, data).unwrap(), *frozen).unwrap();
        }
        let bytes = store_to_bytes(&store).unwrap();
        let back = read_store(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for (name, param) in store.iter() {
            let other = back.get(name).unwrap();
            prop_assert_eq!(other.shape(), param.tensor.shape());
            prop_assert_eq!(back.is_frozen(name).unwrap(), param.frozen);
            for (a, b) in param.tensor.data().iter().zip(other.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // A second serialization is byte-identical.
        let bytes2 = store_to_bytes(&back).unwrap();
        prop_assert_eq!(bytes, bytes2);
    }

    /// Slices followed by concat along the same axis reconstruct the input.
    #[test]
    fn slice_concat_round_trip(
        rows in 1usize..6,
        cols in 1usize..6,
        cut in 0usize..5,
    ) {
        let cut = cut.min(rows - 1).max(0);
        let data: Vec<f64> = (0..rows * cols).map(|i| i as f64 * 0.7 - 3.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data.clone()).unwrap()).unwrap();
        if cut == 0 || cut == rows {
            return Ok(());
        }
        let top = tape.slice(x, 0, 0, cut).unwrap();
        let bottom = tape.slice(x, 0, cut, rows - cut).unwrap();
        let glued = tape.concat(&[top, bottom], 0).unwrap();
        prop_assert_eq!(tape.value(glued).data(), &data[..]);
    }
}
