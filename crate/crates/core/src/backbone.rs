//! Frozen decoder-only transformer backbone with a small bundled vocabulary.
//!
//! Pre-LayerNorm GPT-2 topology: learned absolute position embeddings,
//! causal self-attention via an additive -1e30 mask (masked attention
//! weights underflow to exactly 0.0), GELU feed-forward blocks, final layer
//! norm. All parameters live in a [`ParameterStore`] and are frozen after
//! setup; an optional next-token pretraining phase on a bundled toy corpus
//! can run before freezing.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opt::{Adam, AdamConfig};
use crate::tensor::{BindError, ParameterStore, StoreError, Tape, Tensor, TensorError, Var};

/// Words reserved at the head of the vocabulary. Index 0 is the sentinel
/// written over unobserved time steps; the rest are swap candidates for
/// ablations.
pub const RESERVED_WORDS: [&str; 4] = ["Missing", "Null", "Apple", "Engineering"];

/// Bundled vocabulary, 4 reserved words followed by 252 common words.
/// Lookup is case sensitive.
pub const WORDS: [&str; 256] = [
    "Missing", "Null", "Apple", "Engineering",
    "the", "of", "and", "a", "to", "in", "is", "you", "that", "it", "he", "was", "for", "on",
    "are", "as", "with", "his", "they", "at", "be", "this", "have", "from", "or", "one", "had",
    "by", "word", "but", "not", "what", "all", "were", "we", "when", "your", "can", "said",
    "there", "use", "an", "each", "which", "she", "do", "how", "their", "if", "will", "up",
    "other", "about", "out", "many", "then", "them", "these", "so", "some", "her", "would",
    "make", "like", "him", "into", "time", "has", "look", "two", "more", "write", "go", "see",
    "number", "no", "way", "could", "people", "my", "than", "first", "water", "been", "call",
    "who", "its", "now", "find", "long", "down", "day", "did", "get", "come", "made", "may",
    "part", "over", "new", "sound", "take", "only", "little", "work", "know", "place", "year",
    "live", "me", "back", "give", "most", "very", "after", "thing", "our", "just", "name",
    "good", "sentence", "man", "think", "say", "great", "where", "help", "through", "much",
    "before", "line", "right", "too", "mean", "old", "any", "same", "tell", "boy", "follow",
    "came", "want", "show", "also", "around", "form", "three", "small", "set", "put", "end",
    "does", "another", "well", "large", "must", "big", "even", "such", "because", "turn",
    "here", "heart", "rate", "blood", "pressure", "oxygen", "pulse", "temperature", "breath",
    "hospital", "patient", "doctor", "nurse", "monitor", "signal", "measure", "value", "level",
    "trend", "rise", "fall", "steady", "rapid", "slow", "high", "low", "normal", "early",
    "late", "onset", "fever", "infection", "lab", "test", "sample", "result", "report",
    "record", "chart", "wave", "peak", "interval", "minute", "hour", "axis", "scale", "unit",
    "data", "series", "model", "layer", "token", "vector", "space", "map", "learn", "train",
    "weight", "bias", "input", "output", "hidden", "state", "attention", "head", "query",
    "key", "prototype", "pattern", "language", "text", "prompt", "embed", "clinic", "ward",
    "admit", "discharge", "stable", "acute", "chronic", "dose", "fluid", "vital", "sign",
    "sensor", "stream", "window", "step", "observe", "predict", "care",
];

/// Toy pretraining corpus built from vocabulary words only.
pub const TOY_CORPUS: &str = "\
the patient was in the hospital and the doctor did look at the chart \
the nurse did measure the heart rate and the blood pressure each hour \
a high fever may show an early sign of infection and the doctor must know \
the monitor did record a steady pulse and a normal temperature over time \
we train a model to learn a pattern from the data series \
the attention head did map each token into a hidden state space \
a Null value in the record may mean the lab test was not made \
the output of the model is a vector in a language space \
an Apple a day may help the patient and the doctor \
Engineering work must follow a good pattern \
the blood oxygen level did fall and the breath rate did rise \
they did take a sample to the lab for a test and the result came back \
the signal wave did peak at the end of the interval \
time series data from each sensor stream is put into the model \
the query and the key give the attention weight for each token \
a slow trend may turn rapid when the state of the patient is acute \
we use the Missing word when no value is there \
the doctor will observe the patient and predict the care";

const MASK_NEG: f64 = -1e30;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("unknown word {word:?}; nearest tokens: {}", .suggestions.join(", "))]
    UnknownWord { word: String, suggestions: Vec<String> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bind(#[from] BindError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Next-token pretraining steps before freezing; 0 skips pretraining.
    pub pretrain_steps: usize,
    pub pretrain_seq_len: usize,
    pub pretrain_lr: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            ff_dim: 128,
            vocab_size: 256,
            max_positions: 64,
            pretrain_steps: 0,
            pretrain_seq_len: 16,
            pretrain_lr: 0.001,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(BackboneError::Config("dims, layers and heads must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(BackboneError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size < RESERVED_WORDS.len() || self.vocab_size > WORDS.len() {
            return Err(BackboneError::Config(format!(
                "vocab_size must be in {}..={}, got {}",
                RESERVED_WORDS.len(),
                WORDS.len(),
                self.vocab_size
            )));
        }
        if self.max_positions == 0 {
            return Err(BackboneError::Config("max_positions must be positive".into()));
        }
        if self.pretrain_steps > 0 && self.pretrain_seq_len < 2 {
            return Err(BackboneError::Config("pretrain_seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Case-sensitive word table; prefix of [`WORDS`].
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn bundled(size: usize) -> Result<Self, BackboneError> {
        if size < RESERVED_WORDS.len() || size > WORDS.len() {
            return Err(BackboneError::Config(format!("bad vocab size {size}")));
        }
        let words: Vec<String> = WORDS[..size].iter().map(|s| s.to_string()).collect();
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(BackboneError::Config(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }

    /// Exact lookup; on failure the error carries the three nearest tokens
    /// by edit distance.
    pub fn lookup(&self, word: &str) -> Result<usize, BackboneError> {
        if let Some(&i) = self.index.get(word) {
            return Ok(i);
        }
        let mut scored: Vec<(usize, &String)> =
            self.words.iter().map(|w| (levenshtein(word, w), w)).collect();
        scored.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let suggestions = scored.iter().take(3).map(|(_, w)| (*w).clone()).collect();
        Err(BackboneError::UnknownWord { word: word.to_string(), suggestions })
    }

    /// Whitespace tokenization; every token must be in the vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, BackboneError> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub struct Backbone {
    cfg: BackboneConfig,
    vocab: Vocab,
}

/// Tape handles for all backbone weights, bound once per tape.
pub struct BoundBackbone {
    pub wte: Var,
    wpe: Var,
    layers: Vec<BoundLayer>,
    lnf_gain: Var,
    lnf_bias: Var,
    heads: usize,
    dim: usize,
}

struct BoundLayer {
    ln1_gain: Var,
    ln1_bias: Var,
    wqkv: Var,
    bqkv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    mlp_wi: Var,
    mlp_bi: Var,
    mlp_wo: Var,
    mlp_bo: Var,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainStats {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let vocab = Vocab::bundled(cfg.vocab_size)?;
        Ok(Self { cfg, vocab })
    }

    pub fn cfg(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["backbone.wte".to_string(), "backbone.wpe".to_string()];
        for i in 0..self.cfg.layers {
            for suffix in [
                "ln1.gain", "ln1.bias", "attn.wqkv", "attn.bqkv", "attn.wo", "attn.bo",
                "ln2.gain", "ln2.bias", "mlp.wi", "mlp.bi", "mlp.wo", "mlp.bo",
            ] {
                names.push(format!("backbone.h{i}.{suffix}"));
            }
        }
        names.push("backbone.lnf.gain".to_string());
        names.push("backbone.lnf.bias".to_string());
        names
    }

    /// Initializes all weights (seeded scaled-normal), optionally pretrains
    /// on the toy corpus, then freezes everything.
    pub fn setup(
        &self,
        store: &mut ParameterStore,
        seed: u64,
    ) -> Result<PretrainStats, BackboneError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let d = self.cfg.dim;
        let ff = self.cfg.ff_dim;
        let mut randn = |shape: Vec<usize>| -> Tensor {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("shape matches data")
        };

        store.insert("backbone.wte", randn(vec![self.cfg.vocab_size, d]), false)?;
        store.insert("backbone.wpe", randn(vec![self.cfg.max_positions, d]), false)?;
        for i in 0..self.cfg.layers {
            let p = |s: &str| format!("backbone.h{i}.{s}");
            store.insert(&p("ln1.gain"), ones(d), false)?;
            store.insert(&p("ln1.bias"), Tensor::zeros(vec![d]), false)?;
            store.insert(&p("attn.wqkv"), randn(vec![d, 3 * d]), false)?;
            store.insert(&p("attn.bqkv"), Tensor::zeros(vec![3 * d]), false)?;
            store.insert(&p("attn.wo"), randn(vec![d, d]), false)?;
            store.insert(&p("attn.bo"), Tensor::zeros(vec![d]), false)?;
            store.insert(&p("ln2.gain"), ones(d), false)?;
            store.insert(&p("ln2.bias"), Tensor::zeros(vec![d]), false)?;
            store.insert(&p("mlp.wi"), randn(vec![d, ff]), false)?;
            store.insert(&p("mlp.bi"), Tensor::zeros(vec![ff]), false)?;
            store.insert(&p("mlp.wo"), randn(vec![ff, d]), false)?;
            store.insert(&p("mlp.bo"), Tensor::zeros(vec![d]), false)?;
        }
        store.insert("backbone.lnf.gain", ones(d), false)?;
        store.insert("backbone.lnf.bias", Tensor::zeros(vec![d]), false)?;

        let stats = if self.cfg.pretrain_steps > 0 {
            self.pretrain(store)?
        } else {
            PretrainStats::default()
        };

        for name in self.param_names() {
            store.set_frozen(&name, true)?;
        }
        Ok(stats)
    }

    /// Next-token training over sliding windows of the tokenized corpus.
    fn pretrain(&self, store: &mut ParameterStore) -> Result<PretrainStats, BackboneError> {
        let stream = self.vocab.tokenize(TOY_CORPUS)?;
        let seq = self.cfg.pretrain_seq_len.min(self.cfg.max_positions);
        if stream.len() < seq + 1 {
            return Err(BackboneError::Config("corpus shorter than pretrain_seq_len".into()));
        }
        let mut opt = Adam::new(AdamConfig { lr: self.cfg.pretrain_lr, ..Default::default() });
        let names = self.param_names();
        let mut stats = PretrainStats { steps: self.cfg.pretrain_steps, ..Default::default() };
        for step in 0..self.cfg.pretrain_steps {
            let start = (step * 7) % (stream.len() - seq);
            let tokens = &stream[start..start + seq];
            let targets = &stream[start + 1..start + seq + 1];

            let mut tape = Tape::new();
            let mut bindings = Vec::new();
            for name in &names {
                bindings.push((name.clone(), store.bind(&mut tape, name)?));
            }
            let bound = self.bound_from(&bindings);
            let h = self.forward_tokens(&mut tape, &bound, tokens)?;
            let wte_t = tape.transpose(bound.wte)?;
            let logits = tape.matmul(h, wte_t)?;
            let mut losses = Vec::new();
            for (t, &target) in targets.iter().enumerate() {
                let row = tape.slice(logits, 0, t, 1)?;
                let row = tape.reshape(row, vec![self.cfg.vocab_size])?;
                losses.push(tape.cross_entropy(row, target)?);
            }
            let stacked = tape.concat(&losses, 0)?;
            let loss = tape.mean(stacked)?;
            let loss_val = tape.value(loss).item();
            if step == 0 {
                stats.first_loss = loss_val;
            }
            stats.last_loss = loss_val;

            let grads = tape.backward(loss)?;
            let mut by_name = BTreeMap::new();
            for (name, var) in &bindings {
                if let Some(g) = grads.wrt(*var) {
                    by_name.insert(name.clone(), g.data().to_vec());
                }
            }
            opt.step(store, &by_name)?;
        }
        Ok(stats)
    }

    /// Binds every backbone parameter onto `tape`.
    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore) -> Result<BoundBackbone, BackboneError> {
        let names = self.param_names();
        let mut bindings = Vec::with_capacity(names.len());
        for name in &names {
            bindings.push((name.clone(), store.bind(tape, name)?));
        }
        Ok(self.bound_from(&bindings))
    }

    fn bound_from(&self, bindings: &[(String, Var)]) -> BoundBackbone {
        let get = |name: &str| -> Var {
            bindings
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .expect("binding exists")
        };
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for i in 0..self.cfg.layers {
            let p = |s: &str| format!("backbone.h{i}.{s}");
            layers.push(BoundLayer {
                ln1_gain: get(&p("ln1.gain")),
                ln1_bias: get(&p("ln1.bias")),
                wqkv: get(&p("attn.wqkv")),
                bqkv: get(&p("attn.bqkv")),
                wo: get(&p("attn.wo")),
                bo: get(&p("attn.bo")),
                ln2_gain: get(&p("ln2.gain")),
                ln2_bias: get(&p("ln2.bias")),
                mlp_wi: get(&p("mlp.wi")),
                mlp_bi: get(&p("mlp.bi")),
                mlp_wo: get(&p("mlp.wo")),
                mlp_bo: get(&p("mlp.bo")),
            });
        }
        BoundBackbone {
            wte: get("backbone.wte"),
            wpe: get("backbone.wpe"),
            layers,
            lnf_gain: get("backbone.lnf.gain"),
            lnf_bias: get("backbone.lnf.bias"),
            heads: self.cfg.heads,
            dim: self.cfg.dim,
        }
    }

    /// Runs the decoder stack over already-embedded inputs `z` of shape
    /// `[T, dim]`. Position embeddings are added inside.
    pub fn forward_embedded(
        &self,
        tape: &mut Tape,
        bound: &BoundBackbone,
        z: Var,
    ) -> Result<Var, BackboneError> {
        let (t, d) = tape.value(z).dims2()?;
        if d != self.cfg.dim {
            return Err(BackboneError::Config(format!(
                "input dim {} does not match backbone dim {}",
                d, self.cfg.dim
            )));
        }
        if t > self.cfg.max_positions {
            return Err(BackboneError::Config(format!(
                "sequence length {} exceeds max_positions {}",
                t, self.cfg.max_positions
            )));
        }
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.embedding_gather(bound.wpe, &positions)?;
        let mut h = tape.add(z, pos)?;

        let mask = tape.constant(causal_mask(t))?;
        for layer in &bound.layers {
            h = self.block(tape, bound, layer, h, mask, t)?;
        }
        let h = tape.layer_norm(h, bound.lnf_gain, bound.lnf_bias, 1e-5)?;
        Ok(h)
    }

    /// Token-id forward used by pretraining: embeds, runs the stack.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        bound: &BoundBackbone,
        tokens: &[usize],
    ) -> Result<Var, BackboneError> {
        let z = tape.embedding_gather(bound.wte, tokens)?;
        self.forward_embedded(tape, bound, z)
    }

    fn block(
        &self,
        tape: &mut Tape,
        bound: &BoundBackbone,
        layer: &BoundLayer,
        h: Var,
        mask: Var,
        t: usize,
    ) -> Result<Var, BackboneError> {
        let d = bound.dim;
        let dh = d / bound.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let ln1 = tape.layer_norm(h, layer.ln1_gain, layer.ln1_bias, 1e-5)?;
        let qkv = tape.matmul(ln1, layer.wqkv)?;
        let qkv = tape.add(qkv, layer.bqkv)?;
        let q = tape.slice(qkv, 1, 0, d)?;
        let k = tape.slice(qkv, 1, d, d)?;
        let v = tape.slice(qkv, 1, 2 * d, d)?;

        let mut head_outs = Vec::with_capacity(bound.heads);
        for hd in 0..bound.heads {
            let qh = tape.slice(q, 1, hd * dh, dh)?;
            let kh = tape.slice(k, 1, hd * dh, dh)?;
            let vh = tape.slice(v, 1, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask)?;
            let attn = tape.softmax_last_axis(scores)?;
            let ctx = tape.matmul(attn, vh)?;
            head_outs.push(ctx);
        }
        let ctx = if head_outs.len() == 1 { head_outs[0] } else { tape.concat(&head_outs, 1)? };
        debug_assert_eq!(tape.value(ctx).shape(), &[t, d]);
        let proj = tape.matmul(ctx, layer.wo)?;
        let proj = tape.add(proj, layer.bo)?;
        let h = tape.add(h, proj)?;

        let ln2 = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias, 1e-5)?;
        let up = tape.matmul(ln2, layer.mlp_wi)?;
        let up = tape.add(up, layer.mlp_bi)?;
        let act = tape.gelu(up)?;
        let down = tape.matmul(act, layer.mlp_wo)?;
        let down = tape.add(down, layer.mlp_bo)?;
        Ok(tape.add(h, down)?)
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("shape matches data")
}

/// Additive causal mask: 0 on and below the diagonal, -1e30 above.
fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = MASK_NEG;
        }
    }
    Tensor::new(vec![t, t], data).expect("shape matches data")
}
