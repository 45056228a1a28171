//! Central finite-difference oracles for every tape primitive.
//!
//! Each case builds a scalar loss from one primitive (plus the already
//! verified mul/mean reduction for weighting), then compares the tape's
//! analytic gradient against (f(x+h) - f(x-h)) / 2h at every coordinate.
//! The oracle never looks at the backward implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vital_core::tensor::{
    grad_check, BuildError, BuiltLoss, GradCheckConfig, ParameterStore, Tape, Tensor, Var,
};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces `out` to a scalar with a fixed random weighting so every output
/// coordinate contributes a distinct gradient signal.
fn weighted_mean(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, BuildError> {
    let w = tape.constant(weights.clone())?;
    let prod = tape.mul(out, w)?;
    Ok(tape.mean(prod)?)
}

/// Runs grad_check over `SEEDS` randomized parameterizations.
fn check_many<F>(mut setup: F)
where
    F: FnMut(
        &mut ChaCha8Rng,
        &mut ParameterStore,
    ) -> Box<dyn Fn(&ParameterStore) -> Result<BuiltLoss, BuildError>>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let build = setup(&mut rng, &mut store);
        let cfg = GradCheckConfig { step: 1e-5, samples_per_param: usize::MAX, seed, denom_floor: 1e-12 };
        let report = grad_check(build, &mut store, &cfg).unwrap();
        assert!(report.checked > 0, "seed {}: nothing checked", seed);
        assert!(
            report.within(TOL),
            "seed {}: max rel err {} at {:?}",
            seed,
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![3, 4], -1.5, 1.5), false).unwrap();
        store.insert("b", rand_tensor(rng, vec![4, 2], -1.5, 1.5), false).unwrap();
        let w = rand_tensor(rng, vec![3, 2], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let b = store.bind(&mut tape, "b")?;
            let out = tape.matmul(a, b)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a), ("b".into(), b)] })
        })
    });
}

#[test]
fn add_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![3, 4], -2.0, 2.0), false).unwrap();
        store.insert("b", rand_tensor(rng, vec![3, 4], -2.0, 2.0), false).unwrap();
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let b = store.bind(&mut tape, "b")?;
            let out = tape.add(a, b)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a), ("b".into(), b)] })
        })
    });
}

#[test]
fn broadcast_bias_add_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![3, 4], -2.0, 2.0), false).unwrap();
        store.insert("bias", rand_tensor(rng, vec![4], -2.0, 2.0), false).unwrap();
        let w = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let b = store.bind(&mut tape, "bias")?;
            let out = tape.add(a, b)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a), ("bias".into(), b)] })
        })
    });
}

#[test]
fn elementwise_mul_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![2, 5], -2.0, 2.0), false).unwrap();
        store.insert("b", rand_tensor(rng, vec![2, 5], -2.0, 2.0), false).unwrap();
        let w = rand_tensor(rng, vec![2, 5], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let b = store.bind(&mut tape, "b")?;
            let out = tape.mul(a, b)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a), ("b".into(), b)] })
        })
    });
}

#[test]
fn scalar_scale_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![7], -2.0, 2.0), false).unwrap();
        let factor = rng.gen_range(-3.0..3.0);
        let w = rand_tensor(rng, vec![7], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let out = tape.scale(a, factor)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a)] })
        })
    });
}

#[test]
fn softmax_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![3, 5], -3.0, 3.0), false).unwrap();
        let w = rand_tensor(rng, vec![3, 5], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let out = tape.softmax_last_axis(a)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a)] })
        })
    });
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("x", rand_tensor(rng, vec![4, 6], -2.0, 2.0), false).unwrap();
        store.insert("gain", rand_tensor(rng, vec![6], 0.5, 1.5), false).unwrap();
        store.insert("bias", rand_tensor(rng, vec![6], -0.5, 0.5), false).unwrap();
        let w = rand_tensor(rng, vec![4, 6], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let x = store.bind(&mut tape, "x")?;
            let g = store.bind(&mut tape, "gain")?;
            let b = store.bind(&mut tape, "bias")?;
            let out = tape.layer_norm(x, g, b, 1e-5)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss {
                tape,
                loss,
                params: vec![("x".into(), x), ("gain".into(), g), ("bias".into(), b)],
            })
        })
    });
}

#[test]
fn gelu_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![10], -3.0, 3.0), false).unwrap();
        let w = rand_tensor(rng, vec![10], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let out = tape.gelu(a)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a)] })
        })
    });
}

#[test]
fn concat_gradients_match_finite_differences() {
    // Rank 1 axis 0, rank 2 axis 0, rank 2 axis 1.
    for (shapes, axis, out_shape) in [
        (vec![vec![3], vec![2], vec![4]], 0usize, vec![9]),
        (vec![vec![2, 3], vec![1, 3]], 0, vec![3, 3]),
        (vec![vec![3, 2], vec![3, 4]], 1, vec![3, 6]),
    ] {
        let shapes2 = shapes.clone();
        check_many(move |rng, store| {
            let names: Vec<String> = (0..shapes2.len()).map(|i| format!("p{i}")).collect();
            for (name, shape) in names.iter().zip(&shapes2) {
                store.insert(name, rand_tensor(rng, shape.clone(), -2.0, 2.0), false).unwrap();
            }
            let w = rand_tensor(rng, out_shape.clone(), -1.0, 1.0);
            let names2 = names.clone();
            Box::new(move |store| {
                let mut tape = Tape::new();
                let mut vars = Vec::new();
                for name in &names2 {
                    vars.push(store.bind(&mut tape, name)?);
                }
                let out = tape.concat(&vars, axis)?;
                let loss = weighted_mean(&mut tape, out, &w)?;
                let params = names2.iter().cloned().zip(vars.iter().copied()).collect();
                Ok(BuiltLoss { tape, loss, params })
            })
        });
    }
}

#[test]
fn slice_gradients_match_finite_differences() {
    for (axis, start, len, out_shape) in
        [(0usize, 1usize, 2usize, vec![2usize, 5usize]), (1, 2, 3, vec![4, 3])]
    {
        check_many(move |rng, store| {
            store.insert("a", rand_tensor(rng, vec![4, 5], -2.0, 2.0), false).unwrap();
            let w = rand_tensor(rng, out_shape.clone(), -1.0, 1.0);
            Box::new(move |store| {
                let mut tape = Tape::new();
                let a = store.bind(&mut tape, "a")?;
                let out = tape.slice(a, axis, start, len)?;
                let loss = weighted_mean(&mut tape, out, &w)?;
                Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a)] })
            })
        });
    }
}

#[test]
fn transpose_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![3, 4], -2.0, 2.0), false).unwrap();
        let w = rand_tensor(rng, vec![4, 3], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let out = tape.transpose(a)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a)] })
        })
    });
}

#[test]
fn mean_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![3, 4], -2.0, 2.0), false).unwrap();
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let loss = tape.mean(a)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a)] })
        })
    });
}

#[test]
fn embedding_gather_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("table", rand_tensor(rng, vec![6, 3], -2.0, 2.0), false).unwrap();
        // Repeated index exercises scatter-add accumulation.
        let indices = vec![2, 2, 5, 0];
        let w = rand_tensor(rng, vec![4, 3], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let t = store.bind(&mut tape, "table")?;
            let out = tape.embedding_gather(t, &indices)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("table".into(), t)] })
        })
    });
}

#[test]
fn repeat_last_dim_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![5], -2.0, 2.0), false).unwrap();
        let w = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let out = tape.repeat_last_dim(a, 3)?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a)] })
        })
    });
}

#[test]
fn reshape_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("a", rand_tensor(rng, vec![3, 4], -2.0, 2.0), false).unwrap();
        let w = rand_tensor(rng, vec![2, 6], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let a = store.bind(&mut tape, "a")?;
            let out = tape.reshape(a, vec![2, 6])?;
            let loss = weighted_mean(&mut tape, out, &w)?;
            Ok(BuiltLoss { tape, loss, params: vec![("a".into(), a)] })
        })
    });
}

#[test]
fn bce_with_logits_gradients_match_finite_differences() {
    for target in [0.0, 1.0] {
        check_many(move |rng, store| {
            store.insert("z", rand_tensor(rng, vec![1], -4.0, 4.0), false).unwrap();
            let pos_weight = rng.gen_range(0.5..3.0);
            Box::new(move |store| {
                let mut tape = Tape::new();
                let z = store.bind(&mut tape, "z")?;
                let loss = tape.bce_with_logits(z, target, pos_weight)?;
                Ok(BuiltLoss { tape, loss, params: vec![("z".into(), z)] })
            })
        });
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    check_many(|rng, store| {
        store.insert("z", rand_tensor(rng, vec![4], -3.0, 3.0), false).unwrap();
        let target = rng.gen_range(0..4usize);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let z = store.bind(&mut tape, "z")?;
            let loss = tape.cross_entropy(z, target)?;
            Ok(BuiltLoss { tape, loss, params: vec![("z".into(), z)] })
        })
    });
}

#[test]
fn deep_composition_gradients_match_finite_differences() {
    // A miniature end-to-end chain touching most primitives at once.
    check_many(|rng, store| {
        store.insert("w1", rand_tensor(rng, vec![4, 6], -0.8, 0.8), false).unwrap();
        store.insert("b1", rand_tensor(rng, vec![6], -0.3, 0.3), false).unwrap();
        store.insert("gain", rand_tensor(rng, vec![6], 0.8, 1.2), false).unwrap();
        store.insert("beta", rand_tensor(rng, vec![6], -0.2, 0.2), false).unwrap();
        store.insert("w2", rand_tensor(rng, vec![6, 1], -0.8, 0.8), false).unwrap();
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        Box::new(move |store| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone())?;
            let w1 = store.bind(&mut tape, "w1")?;
            let b1 = store.bind(&mut tape, "b1")?;
            let gain = store.bind(&mut tape, "gain")?;
            let beta = store.bind(&mut tape, "beta")?;
            let w2 = store.bind(&mut tape, "w2")?;
            let h = tape.matmul(xv, w1)?;
            let h = tape.add(h, b1)?;
            let h = tape.layer_norm(h, gain, beta, 1e-5)?;
            let h = tape.gelu(h)?;
            let att = tape.softmax_last_axis(h)?;
            let h = tape.mul(att, h)?;
            let last = tape.slice(h, 0, 2, 1)?;
            let flat = tape.reshape(last, vec![1, 6])?;
            let z = tape.matmul(flat, w2)?;
            let zf = tape.reshape(z, vec![1])?;
            let loss = tape.bce_with_logits(zf, 1.0, 1.5)?;
            Ok(BuiltLoss {
                tape,
                loss,
                params: vec![
                    ("w1".into(), w1),
                    ("b1".into(), b1),
                    ("gain".into(), gain),
                    ("beta".into(), beta),
                    ("w2".into(), w2),
                ],
            })
        })
    });
}
