//! Mixer head: alternating residual MLPs over the variable and state axes,
//! then a fused projection with demographics and a single-logit classifier.
//!
//! Each block is pre-norm. Its closing linear layers start at zero, so a
//! freshly initialized head is exactly the identity on its input.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ParameterStore, Tape, Tensor, Var};

use super::ModelError;

const LN_EPS: f64 = 1e-5;

pub struct BlockParams {
    feat_ln_gain: Var,
    feat_ln_bias: Var,
    feat_w1: Var,
    feat_b1: Var,
    feat_w2: Var,
    feat_b2: Var,
    dim_ln_gain: Var,
    dim_ln_bias: Var,
    dim_w1: Var,
    dim_b1: Var,
    dim_w2: Var,
    dim_b2: Var,
}

pub struct MixerParams {
    pub blocks: Vec<BlockParams>,
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub cls_w: Var,
    pub cls_b: Var,
}

const BLOCK_SUFFIXES: [&str; 12] = [
    "feat.ln.gain", "feat.ln.bias", "feat.w1", "feat.b1", "feat.w2", "feat.b2",
    "dim.ln.gain", "dim.ln.bias", "dim.w1", "dim.b1", "dim.w2", "dim.b2",
];

pub fn param_names(blocks: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..blocks {
        for s in BLOCK_SUFFIXES {
            names.push(format!("mixer.b{i}.{s}"));
        }
    }
    names.extend(["fuse.w", "fuse.b", "cls.w", "cls.b"].map(String::from));
    names
}

/// `tokens` is the number of mixed rows (variables), `state_dim` the row
/// width, `fuse_in` the flattened width plus demographics.
pub fn init(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    blocks: usize,
    tokens: usize,
    state_dim: usize,
    fuse_in: usize,
) -> Result<(), ModelError> {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let randn = |shape: Vec<usize>, rng: &mut ChaCha8Rng| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).expect("shape matches data");
    let hidden_t = 2 * tokens;
    let hidden_s = 2 * state_dim;
    for i in 0..blocks {
        let p = |s: &str| format!("mixer.b{i}.{s}");
        store.insert(&p("feat.ln.gain"), ones(state_dim), false)?;
        store.insert(&p("feat.ln.bias"), Tensor::zeros(vec![state_dim]), false)?;
        store.insert(&p("feat.w1"), randn(vec![tokens, hidden_t], rng), false)?;
        store.insert(&p("feat.b1"), Tensor::zeros(vec![hidden_t]), false)?;
        // Closing layers start at zero so the residual path is an exact no-op.
        store.insert(&p("feat.w2"), Tensor::zeros(vec![hidden_t, tokens]), false)?;
        store.insert(&p("feat.b2"), Tensor::zeros(vec![tokens]), false)?;
        store.insert(&p("dim.ln.gain"), ones(state_dim), false)?;
        store.insert(&p("dim.ln.bias"), Tensor::zeros(vec![state_dim]), false)?;
        store.insert(&p("dim.w1"), randn(vec![state_dim, hidden_s], rng), false)?;
        store.insert(&p("dim.b1"), Tensor::zeros(vec![hidden_s]), false)?;
        store.insert(&p("dim.w2"), Tensor::zeros(vec![hidden_s, state_dim]), false)?;
        store.insert(&p("dim.b2"), Tensor::zeros(vec![state_dim]), false)?;
    }
    store.insert("fuse.w", randn(vec![fuse_in, state_dim], rng), false)?;
    store.insert("fuse.b", Tensor::zeros(vec![state_dim]), false)?;
    store.insert("cls.w", randn(vec![state_dim, 1], rng), false)?;
    store.insert("cls.b", Tensor::zeros(vec![1]), false)?;
    Ok(())
}

pub fn bind(b: &mut super::Binder<'_, '_>, blocks: usize) -> Result<MixerParams, ModelError> {
    let mut out = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let mut get = |s: &str| b.bind(&format!("mixer.b{i}.{s}"));
        out.push(BlockParams {
            feat_ln_gain: get("feat.ln.gain")?,
            feat_ln_bias: get("feat.ln.bias")?,
            feat_w1: get("feat.w1")?,
            feat_b1: get("feat.b1")?,
            feat_w2: get("feat.w2")?,
            feat_b2: get("feat.b2")?,
            dim_ln_gain: get("dim.ln.gain")?,
            dim_ln_bias: get("dim.ln.bias")?,
            dim_w1: get("dim.w1")?,
            dim_b1: get("dim.b1")?,
            dim_w2: get("dim.w2")?,
            dim_b2: get("dim.b2")?,
        });
    }
    Ok(MixerParams {
        blocks: out,
        fuse_w: b.bind("fuse.w")?,
        fuse_b: b.bind("fuse.b")?,
        cls_w: b.bind("cls.w")?,
        cls_b: b.bind("cls.b")?,
    })
}

/// Runs the mixing blocks over `x` of shape `[tokens, state_dim]`.
pub fn apply(tape: &mut Tape, params: &MixerParams, x: Var) -> Result<Var, ModelError> {
    let mut h = x;
    for b in &params.blocks {
        // Mix across the variable axis: work on the transposed matrix.
        let y = tape.layer_norm(h, b.feat_ln_gain, b.feat_ln_bias, LN_EPS)?;
        let yt = tape.transpose(y)?;
        let u = tape.matmul(yt, b.feat_w1)?;
        let u = tape.add(u, b.feat_b1)?;
        let u = tape.gelu(u)?;
        let v = tape.matmul(u, b.feat_w2)?;
        let v = tape.add(v, b.feat_b2)?;
        let v = tape.transpose(v)?;
        h = tape.add(h, v)?;

        // Mix across the state axis.
        let y = tape.layer_norm(h, b.dim_ln_gain, b.dim_ln_bias, LN_EPS)?;
        let u = tape.matmul(y, b.dim_w1)?;
        let u = tape.add(u, b.dim_b1)?;
        let u = tape.gelu(u)?;
        let v = tape.matmul(u, b.dim_w2)?;
        let v = tape.add(v, b.dim_b2)?;
        h = tape.add(h, v)?;
    }
    Ok(h)
}

/// Flattens the mixed states, appends demographics, projects to the state
/// width, and emits (fused representation `[1, state_dim]`, single logit).
pub fn fuse_and_classify(
    tape: &mut Tape,
    params: &MixerParams,
    x: Var,
    demographics: &[f64],
) -> Result<(Var, Var), ModelError> {
    let (tokens, state_dim) = tape.value(x).dims2()?;
    let flat = tape.reshape(x, vec![1, tokens * state_dim])?;
    let joined = if demographics.is_empty() {
        flat
    } else {
        let demo = tape.constant(Tensor::new(vec![1, demographics.len()], demographics.to_vec())?)?;
        tape.concat(&[flat, demo], 1)?
    };
    let fused = tape.matmul(joined, params.fuse_w)?;
    let fused = tape.add(fused, params.fuse_b)?;
    let logit = tape.matmul(fused, params.cls_w)?;
    let logit = tape.add(logit, params.cls_b)?;
    Ok((fused, tape.reshape(logit, vec![1])?))
}

/// Every input coordinate of the fusion projection (including each
/// demographic slot) must influence the output: no all-zero rows.
pub fn fusion_has_full_support(store: &ParameterStore) -> Result<bool, ModelError> {
    let w = store.get("fuse.w")?;
    let (rows, cols) = w.dims2()?;
    for r in 0..rows {
        if w.data()[r * cols..(r + 1) * cols].iter().all(|&x| x == 0.0) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fresh_blocks_are_exact_identity() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init(&mut store, &mut rng, 3, 5, 7, 35).unwrap();
        let mut tape = Tape::new();
        let mut binder = crate::model::Binder::new(&mut tape, &store);
        let params = bind(&mut binder, 3).unwrap();
        drop(binder);
        let data: Vec<f64> = (0..35).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = tape.constant(Tensor::new(vec![5, 7], data.clone()).unwrap()).unwrap();
        let y = apply(&mut tape, &params, x).unwrap();
        let got = tape.value(y).data();
        for (a, b) in got.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn param_names_match_init() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init(&mut store, &mut rng, 2, 4, 6, 24).unwrap();
        let mut want = param_names(2);
        want.sort();
        let got: Vec<String> = store.names().map(String::from).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn classifier_emits_single_logit() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init(&mut store, &mut rng, 1, 3, 4, 3 * 4 + 2).unwrap();
        let mut tape = Tape::new();
        let mut binder = crate::model::Binder::new(&mut tape, &store);
        let params = bind(&mut binder, 1).unwrap();
        drop(binder);
        let x = tape
            .constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap())
            .unwrap();
        let h = apply(&mut tape, &params, x).unwrap();
        let (fused, logit) = fuse_and_classify(&mut tape, &params, h, &[0.5, -0.5]).unwrap();
        assert_eq!(tape.value(fused).shape(), &[1, 4]);
        assert_eq!(tape.value(logit).shape(), &[1]);
    }

    #[test]
    fn fusion_projection_has_full_support_at_init() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        init(&mut store, &mut rng, 1, 3, 4, 14).unwrap();
        assert!(fusion_has_full_support(&store).unwrap());
        // Zeroing one row must flip the check.
        let w = store.get_mut("fuse.w").unwrap();
        let cols = w.shape()[1];
        for x in w.data_mut()[..cols].iter_mut() {
            *x = 0.0;
        }
        assert!(!fusion_has_full_support(&store).unwrap());
    }
}
