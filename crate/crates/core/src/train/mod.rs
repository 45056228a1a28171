//! Training loop: per-sample tapes, deterministic batch order, Adam over the
//! trainable head, early stopping on validation AUROC with best-checkpoint
//! retention, and hard abort on divergence.

pub mod protocol;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PatientRecord;
use crate::metrics::{auroc, average_precision, MetricError};
use crate::model::{ModelError, VitalModel};
use crate::opt::{Adam, AdamConfig};
use crate::tensor::{ParameterStore, StoreError, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Non-finite values anywhere in the graph become a divergence abort that
/// names the offending training step; everything else passes through.
fn classify(err: ModelError, step: usize) -> TrainError {
    match &err {
        ModelError::Tensor(TensorError::NonFinite { .. }) => {
            TrainError::Diverged { step, detail: err.to_string() }
        }
        _ => TrainError::Model(err),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Desk-scale default; the full-scale setting of 128 is a flag away.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without a validation-AUROC improvement before stopping.
    pub patience: usize,
    /// `None` derives negatives/positives from the train split.
    pub pos_weight: Option<f64>,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 5,
            pos_weight: None,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.adam.lr)));
        }
        if let Some(pw) = self.pos_weight {
            if !(pw > 0.0) {
                return Err(TrainError::Config(format!("pos_weight must be positive, got {pw}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub n: usize,
    pub positives: usize,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Global optimizer steps completed at the end of this epoch.
    pub steps: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub val_auprc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub total_steps: usize,
    pub stopped_early: bool,
    /// The weight actually used (resolved when the config said `None`).
    pub pos_weight: f64,
}

/// Negatives over positives in the train split.
pub fn derive_pos_weight(train: &[PatientRecord]) -> Result<f64, TrainError> {
    let pos = train.iter().filter(|r| r.label == 1).count();
    let neg = train.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TrainError::Config("train split needs both classes".into()));
    }
    Ok(neg as f64 / pos as f64)
}

/// One sample's contribution: its loss value and its gradient for every
/// trainable parameter it touched.
fn sample_grads(
    model: &VitalModel,
    store: &ParameterStore,
    record: &PatientRecord,
    pos_weight: f64,
) -> Result<(f64, Vec<(String, Vec<f64>)>), ModelError> {
    let mut tape = Tape::new();
    let (fwd, loss) = model.forward_loss(&mut tape, store, record, pos_weight)?;
    let loss_value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut named = Vec::new();
    for (name, var) in &fwd.named_params {
        if let Some(g) = grads.wrt(*var) {
            named.push((name.clone(), g.data().to_vec()));
        }
    }
    Ok((loss_value, named))
}

/// Mean-gradient Adam step over one batch. Samples run in parallel on
/// separate tapes; the reduction is sequential in batch order, so results
/// are bitwise reproducible regardless of thread count.
fn batch_step(
    model: &VitalModel,
    store: &mut ParameterStore,
    opt: &mut Adam,
    batch: &[&PatientRecord],
    pos_weight: f64,
    step: usize,
) -> Result<f64, TrainError> {
    let per_sample: Vec<(f64, Vec<(String, Vec<f64>)>)> = batch
        .par_iter()
        .map(|rec| sample_grads(model, store, rec, pos_weight))
        .collect::<Result<_, _>>()
        .map_err(|e| classify(e, step))?;

    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for name in store.trainable_names() {
        acc.insert(name.clone(), vec![0.0; store.get(&name)?.len()]);
    }
    let mut loss_sum = 0.0;
    for (loss, named) in &per_sample {
        loss_sum += loss;
        for (name, g) in named {
            let slot = acc.get_mut(name).expect("trainable parameter");
            for (a, b) in slot.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in acc.values_mut() {
        for x in g.iter_mut() {
            *x *= inv;
        }
    }
    for (name, g) in &acc {
        if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
            return Err(TrainError::Diverged {
                step,
                detail: format!("non-finite gradient for {name} at flat index {pos}"),
            });
        }
    }
    opt.step(store, &acc)?;
    Ok(loss_sum * inv)
}

/// Class-1 probabilities for every record, in input order.
pub fn predict(
    model: &VitalModel,
    store: &ParameterStore,
    records: &[PatientRecord],
) -> Result<Vec<f64>, TrainError> {
    let logits: Vec<f64> = records
        .par_iter()
        .map(|rec| {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, store, rec)?;
            Ok(tape.value(fwd.logit).data()[0])
        })
        .collect::<Result<_, ModelError>>()
        .map_err(TrainError::Model)?;
    Ok(logits.into_iter().map(sigmoid).collect())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn evaluate(
    model: &VitalModel,
    store: &ParameterStore,
    records: &[PatientRecord],
    split: &str,
) -> Result<SplitMetrics, TrainError> {
    let scores = predict(model, store, records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    Ok(SplitMetrics {
        split: split.to_string(),
        n: records.len(),
        positives: labels.iter().filter(|&&y| y == 1).count(),
        auroc: auroc(&scores, &labels)?,
        auprc: average_precision(&scores, &labels)?,
    })
}

/// Trains in place. On return `store` holds the parameters of the epoch
/// with the best validation AUROC.
pub fn train(
    model: &VitalModel,
    store: &mut ParameterStore,
    train_set: &[PatientRecord],
    val_set: &[PatientRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let pos_weight = match cfg.pos_weight {
        Some(pw) => pw,
        None => derive_pos_weight(train_set)?,
    };

    let mut opt = Adam::new(cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut bad_epochs = 0usize;
    let mut steps = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            loss_sum += batch_step(model, store, &mut opt, &batch, pos_weight, steps)?;
            steps += 1;
            batches += 1;
        }
        let val = evaluate(model, store, val_set, "val")?;
        history.push(EpochStats {
            epoch,
            steps,
            train_loss: loss_sum / batches.max(1) as f64,
            val_auroc: val.auroc,
            val_auprc: val.auprc,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val.auroc > *b);
        if improved {
            best = Some((val.auroc, epoch, store.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_auroc, best_epoch) = match best {
        Some((score, epoch, snapshot)) => {
            *store = snapshot;
            (score, epoch)
        }
        None => (f64::NAN, 0),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_auroc,
        total_steps: steps,
        stopped_early,
        pos_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pos_weight_is_neg_over_pos() {
        let rec = |label| PatientRecord {
            id: "x".into(),
            rows: 1,
            cols: 1,
            values: vec![1.0],
            mask: vec![1],
            is_padding: vec![false],
            demographics: vec![],
            label,
        };
        let set = vec![rec(0), rec(0), rec(0), rec(1)];
        assert_eq!(derive_pos_weight(&set).unwrap(), 3.0);
        assert!(derive_pos_weight(&set[..3].to_vec()).is_err());
    }

    #[test]
    fn sigmoid_is_symmetric_and_bounded() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn zero_batch_size_rejected() {
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }
}
