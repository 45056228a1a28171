//! Full classification model over one patient record.
//!
//! Densely observed variables are reprogrammed into word-embedding space and
//! run through the frozen language backbone one channel at a time; sparse
//! variables are summarized by order statistics; a mixer head combines both
//! groups with demographics into a single risk logit. Only the reprogramming,
//! lab encoder, and mixer parameters train.

pub mod lab;
pub mod mixer;
pub mod vital;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, PretrainStats};
use crate::dataset::{Partition, PatientRecord};
use crate::tensor::{BindError, ParameterStore, StoreError, Tape, TensorError, Var};

pub use lab::NmTokenMode;

/// Seed offset separating head initialization from backbone initialization,
/// so the two never share an RNG stream.
const HEAD_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad input record: {0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bind(#[from] BindError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Cross-attention heads in the reprogramming layer.
    pub vital_heads: usize,
    /// Per-head key/value width.
    pub vital_head_dim: usize,
    /// Rows of the learned prototype table.
    pub prototypes: usize,
    /// Width of the per-variable state rows fed to the mixer.
    pub state_dim: usize,
    /// Residual mixing blocks in the head.
    pub mixer_blocks: usize,
    pub nm_mode: NmTokenMode,
    /// Vocabulary word whose embedding overwrites unobserved time steps.
    pub missing_word: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            vital_heads: 4,
            vital_head_dim: 8,
            prototypes: 100,
            state_dim: 16,
            mixer_blocks: 2,
            nm_mode: NmTokenMode::Trainable,
            missing_word: "Missing".to_string(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        if self.vital_heads == 0 || self.vital_head_dim == 0 {
            return Err(ModelError::Config("vital_heads and vital_head_dim must be positive".into()));
        }
        if self.prototypes == 0 {
            return Err(ModelError::Config("prototypes must be positive".into()));
        }
        if self.state_dim == 0 {
            return Err(ModelError::Config("state_dim must be positive".into()));
        }
        if self.mixer_blocks == 0 {
            return Err(ModelError::Config("mixer_blocks must be positive".into()));
        }
        Ok(())
    }
}

/// Binds store parameters onto a tape, remembering every handle by name so
/// per-parameter gradients can be read back after the backward pass.
pub struct Binder<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParameterStore,
    named: Vec<(String, Var)>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParameterStore) -> Self {
        Self { tape, store, named: Vec::new() }
    }

    pub fn bind(&mut self, name: &str) -> Result<Var, ModelError> {
        let v = self.store.bind(self.tape, name)?;
        self.named.push((name.to_string(), v));
        Ok(v)
    }

    pub fn into_named(self) -> Vec<(String, Var)> {
        self.named
    }
}

pub struct VitalModel {
    cfg: ModelConfig,
    backbone: Backbone,
    vital_idx: Vec<usize>,
    lab_idx: Vec<usize>,
    demo_dim: usize,
    missing_token: usize,
}

/// Everything a forward pass exposes besides the logit, kept for
/// diagnostics, ablations, and tests.
pub struct Forward {
    pub logit: Var,
    /// Final per-patient representation `[1, state_dim]`.
    pub fused: Var,
    /// Non-backbone parameter handles, for gradient extraction.
    pub named_params: Vec<(String, Var)>,
    /// `[vitals, state_dim]` read-out rows.
    pub vital_states: Var,
    /// `[labs, state_dim]` rows, if any lab variables exist.
    pub lab_states: Option<Var>,
    /// Per lab variable: measured at least once in this record.
    pub lab_measured: Vec<bool>,
    /// Per vital, per head: `[T, prototypes]` attention weights.
    pub attention: Vec<Vec<Var>>,
    /// Per vital: `[T, dim]` rows entering the backbone (after the
    /// missing-row overwrite).
    pub reprogrammed: Vec<Var>,
    /// Per vital: the same rows before the overwrite.
    pub raw_reprogrammed: Vec<Var>,
}

/// One tape-bound copy of every parameter, shared across the records of a
/// batch.
struct BoundModel {
    backbone: crate::backbone::BoundBackbone,
    vital: vital::VitalParams,
    lab: lab::LabParams,
    mixer: mixer::MixerParams,
    named: Vec<(String, Var)>,
}

impl VitalModel {
    pub fn new(cfg: ModelConfig, partition: &Partition, demo_dim: usize) -> Result<Self, ModelError> {
        cfg.validate()?;
        if partition.vital_idx.is_empty() {
            return Err(ModelError::Config("at least one densely observed variable is required".into()));
        }
        let backbone = Backbone::new(cfg.backbone.clone())?;
        let missing_token = backbone.vocab().lookup(&cfg.missing_word)?;
        Ok(Self {
            cfg,
            backbone,
            vital_idx: partition.vital_idx.clone(),
            lab_idx: partition.lab_idx.clone(),
            demo_dim,
            missing_token,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn vital_idx(&self) -> &[usize] {
        &self.vital_idx
    }

    pub fn lab_idx(&self) -> &[usize] {
        &self.lab_idx
    }

    /// Rows fed to the mixer: one per variable.
    pub fn token_rows(&self) -> usize {
        self.vital_idx.len() + self.lab_idx.len()
    }

    /// Initializes backbone (then freezes it) and all head parameters.
    pub fn init_params(
        &self,
        store: &mut ParameterStore,
        seed: u64,
    ) -> Result<PretrainStats, ModelError> {
        let stats = self.backbone.setup(store, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(HEAD_SEED_OFFSET));
        vital::init(
            store,
            &mut rng,
            self.cfg.backbone.vocab_size,
            self.cfg.backbone.dim,
            self.cfg.vital_heads,
            self.cfg.vital_head_dim,
            self.cfg.prototypes,
            self.cfg.state_dim,
        )?;
        lab::init(store, &mut rng, self.lab_idx.len(), self.cfg.state_dim, self.cfg.nm_mode)?;
        let fuse_in = self.token_rows() * self.cfg.state_dim + self.demo_dim;
        mixer::init(
            store,
            &mut rng,
            self.cfg.mixer_blocks,
            self.token_rows(),
            self.cfg.state_dim,
            fuse_in,
        )?;
        if !mixer::fusion_has_full_support(store)? {
            return Err(ModelError::Config(
                "fusion projection drew an all-zero input row; demographics would be ignored".into(),
            ));
        }
        Ok(stats)
    }

    fn check_record(&self, record: &PatientRecord) -> Result<(), ModelError> {
        let max_var = self.vital_idx.iter().chain(&self.lab_idx).copied().max().unwrap_or(0);
        if record.cols <= max_var {
            return Err(ModelError::Data(format!(
                "record {} has {} variables, model expects at least {}",
                record.id,
                record.cols,
                max_var + 1
            )));
        }
        if record.rows == 0 || record.rows > self.cfg.backbone.max_positions {
            return Err(ModelError::Data(format!(
                "record {} has {} rows, backbone supports 1..={}",
                record.id, record.rows, self.cfg.backbone.max_positions
            )));
        }
        if record.demographics.len() != self.demo_dim {
            return Err(ModelError::Data(format!(
                "record {} has {} demographics, model expects {}",
                record.id,
                record.demographics.len(),
                self.demo_dim
            )));
        }
        Ok(())
    }

    /// Binds the backbone and every head parameter onto `tape` exactly once.
    fn bind_all(&self, tape: &mut Tape, store: &ParameterStore) -> Result<BoundModel, ModelError> {
        let backbone = self.backbone.bind(tape, store)?;
        let mut binder = Binder::new(tape, store);
        let vital = vital::bind(&mut binder, self.cfg.vital_heads)?;
        let lab = lab::bind(&mut binder)?;
        let mixer = mixer::bind(&mut binder, self.cfg.mixer_blocks)?;
        let named = binder.into_named();
        Ok(BoundModel { backbone, vital, lab, mixer, named })
    }

    /// Builds the whole computation for one (already normalized and padded)
    /// record on `tape` and returns the logit plus diagnostics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        record: &PatientRecord,
    ) -> Result<Forward, ModelError> {
        let bm = self.bind_all(tape, store)?;
        self.forward_bound(tape, &bm, record)
    }

    /// Same computation on parameters that are already bound, so several
    /// records can share one set of handles on one tape.
    fn forward_bound(
        &self,
        tape: &mut Tape,
        bm: &BoundModel,
        record: &PatientRecord,
    ) -> Result<Forward, ModelError> {
        self.check_record(record)?;
        let bound = &bm.backbone;
        let (vp, lp, mp) = (&bm.vital, &bm.lab, &bm.mixer);
        let named_params = bm.named.clone();

        let t = record.rows;
        let eprime = vital::prototype_table(tape, &vp, bound.wte)?;
        let tables = vital::head_tables(tape, &vp, eprime)?;
        let sentinel_rows = tape.embedding_gather(bound.wte, &vec![self.missing_token; t])?;

        let mut state_rows = Vec::with_capacity(self.token_rows());
        let mut attention = Vec::with_capacity(self.vital_idx.len());
        let mut reprogrammed = Vec::with_capacity(self.vital_idx.len());
        let mut raw_reprogrammed = Vec::with_capacity(self.vital_idx.len());
        for &v in &self.vital_idx {
            let mut series = Vec::with_capacity(t);
            let mut mask = Vec::with_capacity(t);
            for step in 0..t {
                let observed = record.observed(step, v);
                series.push(if observed { record.value(step, v) } else { 0.0 });
                mask.push(u8::from(observed));
            }
            let rep = vital::reprogram(tape, &vp, &tables, &series, self.cfg.vital_head_dim)?;
            let z = vital::overwrite_missing(tape, rep.z, &mask, sentinel_rows)?;
            let hidden = self.backbone.forward_embedded(tape, &bound, z)?;
            state_rows.push(vital::read_state(tape, &vp, hidden)?);
            attention.push(rep.attention);
            reprogrammed.push(z);
            raw_reprogrammed.push(rep.z);
        }
        let vital_states =
            if state_rows.len() == 1 { state_rows[0] } else { tape.concat(&state_rows, 0)? };

        let (lab_states, lab_measured) = if self.lab_idx.is_empty() {
            (None, Vec::new())
        } else {
            let enc = lab::encode(tape, &lp, record, &self.lab_idx)?;
            (Some(enc.states), enc.measured)
        };

        let tokens = match lab_states {
            Some(ls) => tape.concat(&[vital_states, ls], 0)?,
            None => vital_states,
        };
        let mixed = mixer::apply(tape, &mp, tokens)?;
        let (fused, logit) = mixer::fuse_and_classify(tape, &mp, mixed, &record.demographics)?;

        Ok(Forward {
            logit,
            fused,
            named_params,
            vital_states,
            lab_states,
            lab_measured,
            attention,
            reprogrammed,
            raw_reprogrammed,
        })
    }

    /// Forward plus the weighted binary loss for this record's label.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        record: &PatientRecord,
        pos_weight: f64,
    ) -> Result<(Forward, Var), ModelError> {
        let fwd = self.forward(tape, store, record)?;
        let loss = tape.bce_with_logits(fwd.logit, f64::from(record.label), pos_weight)?;
        Ok((fwd, loss))
    }

    /// Mean weighted loss over several records on one tape, with every
    /// parameter bound exactly once so a handle's gradient covers the whole
    /// batch. This is what a finite-difference check of a batch needs.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        records: &[PatientRecord],
        pos_weight: f64,
    ) -> Result<(Var, Vec<(String, Var)>), ModelError> {
        if records.is_empty() {
            return Err(ModelError::Config("batch loss needs at least one record".into()));
        }
        let bm = self.bind_all(tape, store)?;
        let mut total: Option<Var> = None;
        for rec in records {
            let fwd = self.forward_bound(tape, &bm, rec)?;
            let loss = tape.bce_with_logits(fwd.logit, f64::from(rec.label), pos_weight)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
        }
        let mean = tape.scale(total.expect("nonempty batch"), 1.0 / records.len() as f64)?;
        Ok((mean, bm.named))
    }
}
