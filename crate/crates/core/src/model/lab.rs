//! Summary-statistics embedding for sparsely measured variables.
//!
//! Each measured variable contributes (min, max, median, mean) of its
//! observed normalized values, pushed through a shared linear encoder plus a
//! per-variable identity embedding. Variables with no measurements at all map
//! to a dedicated not-measured token instead.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::PatientRecord;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

use super::ModelError;

/// How the not-measured token is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmTokenMode {
    /// Learned alongside the rest of the head.
    Trainable,
    /// All-zero vector, frozen.
    Zero,
    /// Seeded random vector, frozen.
    Random,
}

impl std::str::FromStr for NmTokenMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trainable" => Ok(Self::Trainable),
            "zero" => Ok(Self::Zero),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown token mode {other:?}; expected trainable|zero|random")),
        }
    }
}

pub const STAT_COUNT: usize = 4;

/// (min, max, median, mean) over the observed values of variable `v`.
/// Median of an even count is the average of the two middle values.
/// Returns `None` when the variable was never observed.
pub fn summary_stats(record: &PatientRecord, v: usize) -> Option<[f64; STAT_COUNT]> {
    let mut vals: Vec<f64> = (0..record.rows)
        .filter(|&t| record.observed(t, v))
        .map(|t| record.value(t, v))
        .collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("observed values are finite"));
    let n = vals.len();
    let median = if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    };
    let mean = vals.iter().sum::<f64>() / n as f64;
    Some([vals[0], vals[n - 1], median, mean])
}

pub struct LabParams {
    pub w_stats: Var,
    pub b_stats: Var,
    pub id_embed: Var,
    pub nm_token: Var,
}

pub fn param_names() -> Vec<String> {
    ["lab.w_stats", "lab.b_stats", "lab.id_embed", "lab.nm_token"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn init(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    lab_count: usize,
    state_dim: usize,
    nm_mode: NmTokenMode,
) -> Result<(), ModelError> {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let randn = |shape: Vec<usize>, rng: &mut ChaCha8Rng| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    store.insert("lab.w_stats", randn(vec![STAT_COUNT, state_dim], rng), false)?;
    store.insert("lab.b_stats", Tensor::zeros(vec![state_dim]), false)?;
    store.insert("lab.id_embed", randn(vec![lab_count.max(1), state_dim], rng), false)?;
    let (nm, frozen) = match nm_mode {
        NmTokenMode::Trainable => (randn(vec![state_dim], rng), false),
        NmTokenMode::Zero => (Tensor::zeros(vec![state_dim]), true),
        NmTokenMode::Random => (randn(vec![state_dim], rng), true),
    };
    store.insert("lab.nm_token", nm, frozen)?;
    Ok(())
}

pub fn bind(b: &mut super::Binder<'_, '_>) -> Result<LabParams, ModelError> {
    Ok(LabParams {
        w_stats: b.bind("lab.w_stats")?,
        b_stats: b.bind("lab.b_stats")?,
        id_embed: b.bind("lab.id_embed")?,
        nm_token: b.bind("lab.nm_token")?,
    })
}

pub struct LabStates {
    /// `[lab_count, state_dim]`.
    pub states: Var,
    /// Per variable: was it measured at least once in this record.
    pub measured: Vec<bool>,
}

/// Encodes every lab variable of one record into a state row.
pub fn encode(
    tape: &mut Tape,
    params: &LabParams,
    record: &PatientRecord,
    lab_idx: &[usize],
) -> Result<LabStates, ModelError> {
    debug_assert!(!lab_idx.is_empty());
    let mut rows = Vec::with_capacity(lab_idx.len());
    let mut measured = Vec::with_capacity(lab_idx.len());
    let state_dim = tape.value(params.nm_token).shape()[0];
    for (j, &v) in lab_idx.iter().enumerate() {
        match summary_stats(record, v) {
            Some(stats) => {
                let s = tape.constant(Tensor::new(vec![1, STAT_COUNT], stats.to_vec())?)?;
                let enc = tape.matmul(s, params.w_stats)?;
                let enc = tape.add(enc, params.b_stats)?;
                let ident = tape.embedding_gather(params.id_embed, &[j])?;
                rows.push(tape.add(enc, ident)?);
                measured.push(true);
            }
            None => {
                rows.push(tape.reshape(params.nm_token, vec![1, state_dim])?);
                measured.push(false);
            }
        }
    }
    let states = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    Ok(LabStates { states, measured })
}
