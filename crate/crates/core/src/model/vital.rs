//! Reprogramming of one vital channel into the backbone embedding space.
//!
//! The masked series (zeros where unobserved) is tiled into the query; keys
//! and values are linear views of a learned prototype subspace of the word
//! embedding table. There is no learned query projection. Heads concatenate
//! and project to the backbone width, then unobserved rows are overwritten
//! by the sentinel word embedding.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ParameterStore, Tape, Tensor, Var};

use super::ModelError;

pub struct VitalParams {
    pub w_probe: Var,
    pub w_key: Vec<Var>,
    pub w_value: Vec<Var>,
    pub w_out: Var,
    pub w_read: Var,
    pub b_read: Var,
}

pub fn param_names(heads: usize) -> Vec<String> {
    let mut names = vec!["vital.w_probe".to_string()];
    for k in 0..heads {
        names.push(format!("vital.w_key.{k}"));
        names.push(format!("vital.w_value.{k}"));
    }
    names.push("vital.w_out".to_string());
    names.push("vital.w_read".to_string());
    names.push("vital.b_read".to_string());
    names
}

pub fn init(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    vocab_size: usize,
    dim: usize,
    heads: usize,
    head_dim: usize,
    prototypes: usize,
    state_dim: usize,
) -> Result<(), ModelError> {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut randn = |shape: Vec<usize>| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    store.insert("vital.w_probe", randn(vec![prototypes, vocab_size]), false)?;
    for k in 0..heads {
        store.insert(&format!("vital.w_key.{k}"), randn(vec![dim, head_dim]), false)?;
        store.insert(&format!("vital.w_value.{k}"), randn(vec![dim, head_dim]), false)?;
    }
    store.insert("vital.w_out", randn(vec![heads * head_dim, dim]), false)?;
    store.insert("vital.w_read", randn(vec![dim, state_dim]), false)?;
    store.insert("vital.b_read", Tensor::zeros(vec![state_dim]), false)?;
    Ok(())
}

pub fn bind(b: &mut super::Binder<'_, '_>, heads: usize) -> Result<VitalParams, ModelError> {
    let mut w_key = Vec::with_capacity(heads);
    let mut w_value = Vec::with_capacity(heads);
    for k in 0..heads {
        w_key.push(b.bind(&format!("vital.w_key.{k}"))?);
        w_value.push(b.bind(&format!("vital.w_value.{k}"))?);
    }
    Ok(VitalParams {
        w_probe: b.bind("vital.w_probe")?,
        w_key,
        w_value,
        w_out: b.bind("vital.w_out")?,
        w_read: b.bind("vital.w_read")?,
        b_read: b.bind("vital.b_read")?,
    })
}

/// Prototype table `E' = W_probe * E`, shared by every head and channel.
pub fn prototype_table(tape: &mut Tape, params: &VitalParams, wte: Var) -> Result<Var, ModelError> {
    Ok(tape.matmul(params.w_probe, wte)?)
}

/// Per-head keys and values over the prototype table; computed once per
/// tape and reused across channels.
pub struct HeadTables {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

pub fn head_tables(
    tape: &mut Tape,
    params: &VitalParams,
    eprime: Var,
) -> Result<HeadTables, ModelError> {
    let mut keys = Vec::with_capacity(params.w_key.len());
    let mut values = Vec::with_capacity(params.w_key.len());
    for (wk, wv) in params.w_key.iter().zip(&params.w_value) {
        keys.push(tape.matmul(eprime, *wk)?);
        values.push(tape.matmul(eprime, *wv)?);
    }
    Ok(HeadTables { keys, values })
}

pub struct Reprogrammed {
    /// `[T, dim]` rows in the backbone embedding space.
    pub z: Var,
    /// Per-head `[T, prototypes]` attention weights.
    pub attention: Vec<Var>,
}

/// Cross-attention from the masked series onto the prototypes.
/// `masked_series` must already be zero where unobserved.
pub fn reprogram(
    tape: &mut Tape,
    params: &VitalParams,
    tables: &HeadTables,
    masked_series: &[f64],
    head_dim: usize,
) -> Result<Reprogrammed, ModelError> {
    let t = masked_series.len();
    let x = tape.constant(Tensor::new(vec![t], masked_series.to_vec())?)?;
    let q = tape.repeat_last_dim(x, head_dim)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut attention = Vec::with_capacity(tables.keys.len());
    let mut head_outs = Vec::with_capacity(tables.keys.len());
    for (k, v) in tables.keys.iter().zip(&tables.values) {
        let kt = tape.transpose(*k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_last_axis(scores)?;
        let z_k = tape.matmul(attn, *v)?;
        attention.push(attn);
        head_outs.push(z_k);
    }
    let stacked = if head_outs.len() == 1 { head_outs[0] } else { tape.concat(&head_outs, 1)? };
    let z = tape.matmul(stacked, params.w_out)?;
    Ok(Reprogrammed { z, attention })
}

/// Replaces rows with mask 0 (including padding rows) by the sentinel word
/// embedding. Built from exact multiplies by 0/1, so observed rows keep
/// their bit patterns and overwritten rows are bitwise the sentinel row.
pub fn overwrite_missing(
    tape: &mut Tape,
    z: Var,
    mask: &[u8],
    sentinel_rows: Var,
) -> Result<Var, ModelError> {
    let (t, d) = tape.value(z).dims2()?;
    debug_assert_eq!(mask.len(), t);
    let mut keep = Vec::with_capacity(t * d);
    let mut fill = Vec::with_capacity(t * d);
    for &m in mask {
        let k = f64::from(m);
        keep.extend(std::iter::repeat(k).take(d));
        fill.extend(std::iter::repeat(1.0 - k).take(d));
    }
    let keep = tape.constant(Tensor::new(vec![t, d], keep)?)?;
    let fill = tape.constant(Tensor::new(vec![t, d], fill)?)?;
    let kept = tape.mul(z, keep)?;
    let filled = tape.mul(sentinel_rows, fill)?;
    Ok(tape.add(kept, filled)?)
}

/// Shared read-out of the last hidden row into the state space.
pub fn read_state(
    tape: &mut Tape,
    params: &VitalParams,
    hidden: Var,
) -> Result<Var, ModelError> {
    let (t, _) = tape.value(hidden).dims2()?;
    let last = tape.slice(hidden, 0, t - 1, 1)?;
    let s = tape.matmul(last, params.w_read)?;
    Ok(tape.add(s, params.b_read)?)
}
