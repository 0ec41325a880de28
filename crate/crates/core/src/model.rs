//! The mobility-reconstruction network: token/time/day-of-week embeddings
//! concatenated and projected, three stacked encoder-decoder blocks, an MLP
//! head with dropout, and a softmax over activity classes — plus layer-group
//! trainability control and a binary checkpoint format.
//!
//! The decoder is non-autoregressive: learned per-position queries cross-
//! attend over the encoder memory of their block, which yields all 96 slot
//! classifications in one pass.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::activity::{CLASS_COUNT, MASK_TOKEN, SLOTS_PER_DAY, TOKEN_COUNT};
use crate::encoding::SlotSequence;
use crate::numerics::{Dtype, Element, Graph, NodeId, NumericsError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Stacked encoder-decoder blocks; fixed at 3 in this architecture.
    pub blocks: usize,
    /// Hidden width of the MLP head and the block feed-forward layers.
    pub mlp_hidden: usize,
    pub dropout_p: f64,
    /// Input vocabulary: 15 activities + TRAVEL + MASK.
    pub vocab_in: usize,
    /// Output classes: 15 activities + TRAVEL (missingness is never predicted).
    pub classes_out: usize,
    pub dow_embed_dim: usize,
    /// Width of the linear lift applied to the scalar time-of-day label.
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            blocks: 3,
            mlp_hidden: 128,
            dropout_p: 0.1,
            vocab_in: TOKEN_COUNT,
            classes_out: CLASS_COUNT,
            dow_embed_dim: 8,
            time_embed_dim: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.blocks != 3 {
            return Err(ModelError::InvalidConfig(format!(
                "architecture is fixed at 3 blocks, got {}",
                self.blocks
            )));
        }
        if self.vocab_in != TOKEN_COUNT || self.classes_out != CLASS_COUNT {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_in must be {TOKEN_COUNT} and classes_out {CLASS_COUNT}, got {} / {}",
                self.vocab_in, self.classes_out
            )));
        }
        if self.d_model == 0 || self.mlp_hidden == 0 || self.dow_embed_dim == 0 || self.time_embed_dim == 0
        {
            return Err(ModelError::InvalidConfig("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::InvalidConfig(format!("dropout_p {}", self.dropout_p)));
        }
        Ok(())
    }

    /// Total parameter count, in closed form:
    ///
    /// ```text
    /// embeddings: vocab*d + 2t + 7*dd + (d+t+dd)*d + d + 2*96*d
    /// per block:  8d^2 + 8d  (attention)
    ///           + 8d         (four layer norms)
    ///           + 4dm + 2m + 2d  (two feed-forwards)
    /// head:       dm + m + m*c + c
    /// ```
    ///
    /// with d = d_model, m = mlp_hidden, t = time_embed_dim,
    /// dd = dow_embed_dim, c = classes_out.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let m = self.mlp_hidden;
        let t = self.time_embed_dim;
        let dd = self.dow_embed_dim;
        let c = self.classes_out;
        let embeddings =
            self.vocab_in * d + 2 * t + 7 * dd + (d + t + dd) * d + d + 2 * SLOTS_PER_DAY * d;
        let per_block = 8 * d * d + 8 * d + 8 * d + 4 * d * m + 2 * m + 2 * d;
        let head = d * m + m + m * c + c;
        embeddings + self.blocks * per_block + head
    }
}

/// The five trainability groups. Blocks are numbered from the input side:
/// block 1 is input-nearest, block 3 output-nearest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerGroup {
    Embeddings,
    Block1,
    Block2,
    Block3,
    MlpHead,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 5] = [
        LayerGroup::Embeddings,
        LayerGroup::Block1,
        LayerGroup::Block2,
        LayerGroup::Block3,
        LayerGroup::MlpHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Embeddings => "embeddings",
            LayerGroup::Block1 => "block_1",
            LayerGroup::Block2 => "block_2",
            LayerGroup::Block3 => "block_3",
            LayerGroup::MlpHead => "mlp_head",
        }
    }

    fn of_block(index: usize) -> LayerGroup {
        match index {
            0 => LayerGroup::Block1,
            1 => LayerGroup::Block2,
            _ => LayerGroup::Block3,
        }
    }
}

impl FromStr for LayerGroup {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerGroup::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s)
            .ok_or_else(|| ModelError::UnknownGroup(s.to_string()))
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown token {0}: expected 1..=17")]
    UnknownToken(u8),
    #[error("unknown layer group {0:?}")]
    UnknownGroup(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One named tensor with its trainability group.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub group: LayerGroup,
    pub tensor: Tensor<T>,
}

/// Named, layer-grouped parameter tensors with per-group trainable flags.
/// Freezing a group stops gradient accumulation for it; values are never
/// touched by freezing.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Element> {
    pub cfg: ModelConfig,
    entries: Vec<ParamEntry<T>>,
    trainable: BTreeSet<LayerGroup>,
}

/// Glorot-uniform bound for a weight of the given fan-in/fan-out.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Deterministic per seed: the same config yields bitwise-identical
/// parameters, with the f32 stream derived from the same f64 draws.
pub fn init_model<T: Element>(cfg: &ModelConfig) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries: Vec<ParamEntry<T>> = Vec::new();
    let d = cfg.d_model;
    let m = cfg.mlp_hidden;

    let push = |entries: &mut Vec<ParamEntry<T>>,
                    rng: &mut ChaCha8Rng,
                    name: String,
                    group: LayerGroup,
                    shape: Vec<usize>,
                    init: Init| {
        let tensor = match init {
            Init::Glorot => {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [r, c] => (*r, *c),
                    [n] => (*n, *n),
                    _ => unreachable!("rank <= 2 parameters only"),
                };
                Tensor::rand_uniform(shape, glorot(fan_in, fan_out), rng)
            }
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::full(shape, T::one()),
        };
        entries.push(ParamEntry { name, group, tensor });
    };

    let concat_dim = d + cfg.time_embed_dim + cfg.dow_embed_dim;
    use LayerGroup::Embeddings as GE;
    push(&mut entries, &mut rng, "embed.token".into(), GE, vec![cfg.vocab_in, d], Init::Glorot);
    push(&mut entries, &mut rng, "embed.time.w".into(), GE, vec![1, cfg.time_embed_dim], Init::Glorot);
    push(&mut entries, &mut rng, "embed.time.b".into(), GE, vec![cfg.time_embed_dim], Init::Zero);
    push(&mut entries, &mut rng, "embed.dow".into(), GE, vec![7, cfg.dow_embed_dim], Init::Glorot);
    push(&mut entries, &mut rng, "embed.proj.w".into(), GE, vec![concat_dim, d], Init::Glorot);
    push(&mut entries, &mut rng, "embed.proj.b".into(), GE, vec![d], Init::Zero);
    push(&mut entries, &mut rng, "embed.enc_pos".into(), GE, vec![SLOTS_PER_DAY, d], Init::Glorot);
    push(&mut entries, &mut rng, "embed.dec_query".into(), GE, vec![SLOTS_PER_DAY, d], Init::Glorot);

    for b in 0..cfg.blocks {
        let group = LayerGroup::of_block(b);
        for half in ["enc", "dec"] {
            let attn = if half == "enc" { "self" } else { "cross" };
            for w in ["wq", "wk", "wv", "wo"] {
                let name = format!("block{}.{half}.{attn}.{w}", b + 1);
                push(&mut entries, &mut rng, name, group, vec![d, d], Init::Glorot);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                let name = format!("block{}.{half}.{attn}.{bias}", b + 1);
                push(&mut entries, &mut rng, name, group, vec![d], Init::Zero);
            }
            for (ln, init) in [("ln1.gamma", Init::One), ("ln1.beta", Init::Zero)] {
                push(&mut entries, &mut rng, format!("block{}.{half}.{ln}", b + 1), group, vec![d], init);
            }
            push(&mut entries, &mut rng, format!("block{}.{half}.ffn.w1", b + 1), group, vec![d, m], Init::Glorot);
            push(&mut entries, &mut rng, format!("block{}.{half}.ffn.b1", b + 1), group, vec![m], Init::Zero);
            push(&mut entries, &mut rng, format!("block{}.{half}.ffn.w2", b + 1), group, vec![m, d], Init::Glorot);
            push(&mut entries, &mut rng, format!("block{}.{half}.ffn.b2", b + 1), group, vec![d], Init::Zero);
            for (ln, init) in [("ln2.gamma", Init::One), ("ln2.beta", Init::Zero)] {
                push(&mut entries, &mut rng, format!("block{}.{half}.{ln}", b + 1), group, vec![d], init);
            }
        }
    }

    use LayerGroup::MlpHead as GH;
    push(&mut entries, &mut rng, "head.w1".into(), GH, vec![d, m], Init::Glorot);
    push(&mut entries, &mut rng, "head.b1".into(), GH, vec![m], Init::Zero);
    push(&mut entries, &mut rng, "head.w2".into(), GH, vec![m, cfg.classes_out], Init::Glorot);
    push(&mut entries, &mut rng, "head.b2".into(), GH, vec![cfg.classes_out], Init::Zero);

    Ok(ModelParams {
        cfg: cfg.clone(),
        entries,
        trainable: LayerGroup::ALL.iter().copied().collect(),
    })
}

enum Init {
    Glorot,
    Zero,
    One,
}

impl<T: Element> ModelParams<T> {
    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_groups(&self) -> &BTreeSet<LayerGroup> {
        &self.trainable
    }

    pub fn is_trainable(&self, group: LayerGroup) -> bool {
        self.trainable.contains(&group)
    }

    /// Makes exactly the named groups trainable and freezes the rest.
    pub fn set_trainable(&mut self, groups: &[LayerGroup]) {
        self.trainable = groups.iter().copied().collect();
    }

    pub fn set_trainable_by_name(&mut self, names: &[String]) -> Result<(), ModelError> {
        let mut groups = Vec::with_capacity(names.len());
        for n in names {
            groups.push(LayerGroup::from_str(n)?);
        }
        self.set_trainable(&groups);
        Ok(())
    }

    /// Same parameters with every tensor replaced in entry order; shapes
    /// must match. Used by the finite-difference checker to evaluate the
    /// loss at perturbed parameter vectors.
    pub fn with_tensors(&self, tensors: &[Tensor<T>]) -> ModelParams<T> {
        assert_eq!(tensors.len(), self.entries.len());
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|(e, t)| {
                assert_eq!(e.tensor.shape(), t.shape(), "{}", e.name);
                ParamEntry { name: e.name.clone(), group: e.group, tensor: t.clone() }
            })
            .collect();
        ModelParams { cfg: self.cfg.clone(), entries, trainable: self.trainable.clone() }
    }

    /// Converts the element type (used by the f64 gradient-check path).
    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), group: e.group, tensor: e.tensor.cast() })
                .collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// A recorded forward pass: the graph, the parameter leaves (aligned with
/// `ModelParams::entries` order) and the per-slot probability node.
pub struct ForwardPass<T: Element> {
    pub graph: Graph<T>,
    /// [batch * 96, classes_out]; rows sum to 1.
    pub probs: NodeId,
    pub param_nodes: Vec<NodeId>,
}

pub enum Mode<'r> {
    Train { rng: &'r mut ChaCha8Rng },
    Eval,
}

struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    fn get(&self, params: &ModelParams<impl Element>, name: &str) -> NodeId {
        let idx = params
            .entries
            .iter()
            .position(|e| e.name == name)
            .unwrap_or_else(|| panic!("parameter {name} missing"));
        self.ids[idx]
    }
}

/// Runs the network over a batch of slot sequences.
///
/// Deterministic in eval mode; train mode draws dropout masks from the
/// caller's RNG. Output rows are softmax-normalized; permuting the batch
/// permutes the outputs identically (examples never interact).
pub fn forward<T: Element>(
    params: &ModelParams<T>,
    batch: &[SlotSequence],
    mode: Mode<'_>,
) -> Result<ForwardPass<T>, ModelError> {
    let cfg = &params.cfg;
    let b = batch.len();
    let l = SLOTS_PER_DAY;
    let rows = b * l;
    if b == 0 {
        return Err(ModelError::InvalidConfig("empty batch".into()));
    }

    // Input indices and temporal features.
    let mut token_idx = Vec::with_capacity(rows);
    let mut dow_idx = Vec::with_capacity(rows);
    let mut time_vals = Vec::with_capacity(rows);
    let mut pos_idx = Vec::with_capacity(rows);
    for seq in batch {
        if seq.day_of_week > 6 {
            return Err(ModelError::InvalidConfig(format!("day_of_week {}", seq.day_of_week)));
        }
        for slot in 0..l {
            let token = seq.tokens[slot];
            if !(1..=TOKEN_COUNT as u8).contains(&token) {
                return Err(ModelError::UnknownToken(token));
            }
            token_idx.push((token - 1) as u32);
            dow_idx.push(seq.day_of_week as u32);
            time_vals.push(seq.time_labels[slot]);
            pos_idx.push(slot as u32);
        }
    }

    let mut g = Graph::<T>::new();
    let ids: Vec<NodeId> = params
        .entries
        .iter()
        .map(|e| {
            let mut t = e.tensor.clone();
            t.requires_grad = params.is_trainable(e.group);
            g.leaf(t)
        })
        .collect();
    let bound = Bound { ids: ids.clone() };
    let p = |name: &str| bound.get(params, name);

    let mut rng_holder = mode;
    let mut apply_dropout = |g: &mut Graph<T>, x: NodeId| -> NodeId {
        match &mut rng_holder {
            Mode::Train { rng } => g.dropout(x, cfg.dropout_p, true, rng),
            Mode::Eval => x,
        }
    };

    // Embedding and feature concatenation.
    let tok = g.embedding_lookup(p("embed.token"), &token_idx)?;
    let time_col = g.constant(Tensor::from_fn(vec![rows, 1], |i| T::from_f64(time_vals[i])));
    let time_w = g.matmul(time_col, p("embed.time.w"))?;
    let time_feat = g.add_bias(time_w, p("embed.time.b"))?;
    let dow = g.embedding_lookup(p("embed.dow"), &dow_idx)?;
    let concat = g.concat_cols(&[tok, time_feat, dow])?;
    let proj = g.matmul(concat, p("embed.proj.w"))?;
    let proj = g.add_bias(proj, p("embed.proj.b"))?;
    let pos = g.embedding_lookup(p("embed.enc_pos"), &pos_idx)?;
    let mut x_enc = g.add(proj, pos)?;
    x_enc = apply_dropout(&mut g, x_enc);

    let mut x_dec = g.embedding_lookup(p("embed.dec_query"), &pos_idx)?;

    let eps = T::from_f64(1e-5);
    let heads = cfg.heads;

    let attn_sublayer = |g: &mut Graph<T>,
                             x: NodeId,
                             kv: NodeId,
                             prefix: &str,
                             attn: &str,
                             drop_rng: &mut dyn FnMut(&mut Graph<T>, NodeId) -> NodeId|
     -> Result<NodeId, ModelError> {
        let normed = g.layer_norm(x, eps)?;
        let normed = g.mul_cols(normed, p(&format!("{prefix}.ln1.gamma")))?;
        let normed = g.add_bias(normed, p(&format!("{prefix}.ln1.beta")))?;
        let q = g.matmul(normed, p(&format!("{prefix}.{attn}.wq")))?;
        let q = g.add_bias(q, p(&format!("{prefix}.{attn}.bq")))?;
        let k = g.matmul(kv, p(&format!("{prefix}.{attn}.wk")))?;
        let k = g.add_bias(k, p(&format!("{prefix}.{attn}.bk")))?;
        let v = g.matmul(kv, p(&format!("{prefix}.{attn}.wv")))?;
        let v = g.add_bias(v, p(&format!("{prefix}.{attn}.bv")))?;
        let ctx = g.multi_head_attention(q, k, v, heads, b, l)?;
        let out = g.matmul(ctx, p(&format!("{prefix}.{attn}.wo")))?;
        let out = g.add_bias(out, p(&format!("{prefix}.{attn}.bo")))?;
        let out = drop_rng(g, out);
        Ok(g.add(x, out)?)
    };

    let ffn_sublayer = |g: &mut Graph<T>,
                            x: NodeId,
                            prefix: &str,
                            drop_rng: &mut dyn FnMut(&mut Graph<T>, NodeId) -> NodeId|
     -> Result<NodeId, ModelError> {
        let normed = g.layer_norm(x, eps)?;
        let normed = g.mul_cols(normed, p(&format!("{prefix}.ln2.gamma")))?;
        let normed = g.add_bias(normed, p(&format!("{prefix}.ln2.beta")))?;
        let h = g.matmul(normed, p(&format!("{prefix}.ffn.w1")))?;
        let h = g.add_bias(h, p(&format!("{prefix}.ffn.b1")))?;
        let h = g.relu(h);
        let h = g.matmul(h, p(&format!("{prefix}.ffn.w2")))?;
        let h = g.add_bias(h, p(&format!("{prefix}.ffn.b2")))?;
        let h = drop_rng(g, h);
        Ok(g.add(x, h)?)
    };

    for blk in 0..cfg.blocks {
        let enc = format!("block{}.enc", blk + 1);
        x_enc = attn_sublayer(&mut g, x_enc, x_enc, &enc, "self", &mut apply_dropout)?;
        x_enc = ffn_sublayer(&mut g, x_enc, &enc, &mut apply_dropout)?;
        let dec = format!("block{}.dec", blk + 1);
        x_dec = attn_sublayer(&mut g, x_dec, x_enc, &dec, "cross", &mut apply_dropout)?;
        x_dec = ffn_sublayer(&mut g, x_dec, &dec, &mut apply_dropout)?;
    }

    // MLP head with dropout, then softmax.
    let h = g.matmul(x_dec, p("head.w1"))?;
    let h = g.add_bias(h, p("head.b1"))?;
    let h = g.relu(h);
    let h = apply_dropout(&mut g, h);
    let logits = g.matmul(h, p("head.w2"))?;
    let logits = g.add_bias(logits, p("head.b2"))?;
    let probs = g.softmax(logits)?;

    Ok(ForwardPass { graph: g, probs, param_nodes: ids })
}

/// How reconstruction fills masked slots from the output distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Decoding {
    Argmax,
    /// Temperature-scaled categorical sampling (p^(1/T), renormalized).
    Sample { temperature: f64, seed: u64 },
}

/// Completes masked slot sequences: observed slots are kept verbatim and
/// every MASK slot is filled from the predicted distribution. The returned
/// sequences contain no MASK tokens and are flagged fully observed; callers
/// that need provenance keep the input's observation mask.
pub fn reconstruct_batch<T: Element>(
    params: &ModelParams<T>,
    batch: &[SlotSequence],
    mode: Decoding,
) -> Result<Vec<SlotSequence>, ModelError> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let pass = forward(params, batch, Mode::Eval)?;
    let probs = pass.graph.value(pass.probs);
    let classes = params.cfg.classes_out;
    let mut rng = match mode {
        Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Argmax => None,
    };

    let mut out = Vec::with_capacity(batch.len());
    for (i, seq) in batch.iter().enumerate() {
        let mut completed = seq.clone();
        for slot in 0..SLOTS_PER_DAY {
            completed.observed[slot] = true;
            if seq.tokens[slot] != MASK_TOKEN {
                continue;
            }
            let row = &probs.data()[(i * SLOTS_PER_DAY + slot) * classes
                ..(i * SLOTS_PER_DAY + slot + 1) * classes];
            let class = match (&mode, &mut rng) {
                (Decoding::Argmax, _) => argmax(row),
                (Decoding::Sample { temperature, .. }, Some(rng)) => {
                    sample_class(row, *temperature, rng)
                }
                _ => unreachable!(),
            };
            completed.tokens[slot] = class as u8 + 1;
        }
        out.push(completed);
    }
    Ok(out)
}

pub fn reconstruct<T: Element>(
    params: &ModelParams<T>,
    seq: &SlotSequence,
    mode: Decoding,
) -> Result<SlotSequence, ModelError> {
    Ok(reconstruct_batch(params, std::slice::from_ref(seq), mode)?.remove(0))
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_class<T: Element>(row: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(row);
    }
    let inv_t = 1.0 / temperature;
    let scaled: Vec<f64> = row.iter().map(|&p| p.to_f64().max(1e-300).powf(inv_t)).collect();
    let total: f64 = scaled.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in scaled.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    scaled.len() - 1
}

/// Checkpoint format: one line of JSON (version, config, dtype, trainable
/// groups, ordered tensor manifest with byte offsets, payload digest),
/// followed by the raw little-endian tensor bytes. Loaders verify the
/// digest and the dtype before accepting the payload.
pub mod checkpoint {
    use super::*;

    pub const FORMAT_VERSION: u32 = 1;

    #[derive(Debug, Serialize, Deserialize)]
    struct TensorRecord {
        name: String,
        group: String,
        shape: Vec<usize>,
        offset: usize,
        bytes: usize,
    }

    #[derive(Debug, Serialize, Deserialize)]
    struct Header {
        format_version: u32,
        config: ModelConfig,
        dtype: String,
        trainable_groups: Vec<String>,
        tensors: Vec<TensorRecord>,
        payload_sha256: String,
    }

    #[derive(Debug, Error)]
    pub enum CheckpointError {
        #[error("bad checkpoint header: {0}")]
        Header(String),
        #[error("checkpoint format version {0}, expected {FORMAT_VERSION}")]
        Version(u32),
        #[error("checkpoint dtype {got}, expected {expected}")]
        DtypeMismatch { got: String, expected: &'static str },
        #[error("payload digest mismatch: manifest {manifest}, computed {computed}")]
        DigestMismatch { manifest: String, computed: String },
        #[error("tensor {name}: {problem}")]
        Tensor { name: String, problem: String },
        #[error(transparent)]
        Model(#[from] ModelError),
        #[error(transparent)]
        Io(#[from] std::io::Error),
    }

    pub fn save<T: Element>(
        params: &ModelParams<T>,
        path: &Path,
    ) -> Result<(), CheckpointError> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(params.entries().len());
        for e in params.entries() {
            let bytes = e.tensor.to_le_bytes();
            tensors.push(TensorRecord {
                name: e.name.clone(),
                group: e.group.name().to_string(),
                shape: e.tensor.shape().to_vec(),
                offset: payload.len(),
                bytes: bytes.len(),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: params.cfg.clone(),
            dtype: T::DTYPE.name().to_string(),
            trainable_groups: params
                .trainable_groups()
                .iter()
                .map(|gr| gr.name().to_string())
                .collect(),
            tensors,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let mut file = std::fs::File::create(path)?;
        serde_json::to_writer(&mut file, &header)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        file.write_all(b"\n")?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load<T: Element>(path: &Path) -> Result<ModelParams<T>, CheckpointError> {
        let raw = std::fs::read(path)?;
        let newline = raw
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Header("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&raw[..newline])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        if header.dtype != T::DTYPE.name() {
            return Err(CheckpointError::DtypeMismatch {
                got: header.dtype,
                expected: T::DTYPE.name(),
            });
        }
        let payload = &raw[newline + 1..];
        let digest = hex::encode(Sha256::digest(payload));
        if digest != header.payload_sha256 {
            return Err(CheckpointError::DigestMismatch {
                manifest: header.payload_sha256,
                computed: digest,
            });
        }
        // Rebuild from a fresh init so entry order and groups come from the
        // config, then overwrite every tensor from the payload.
        let mut params: ModelParams<T> = init_model(&header.config)?;
        if header.tensors.len() != params.entries().len() {
            return Err(CheckpointError::Header(format!(
                "{} tensors in manifest, model wants {}",
                header.tensors.len(),
                params.entries().len()
            )));
        }
        for record in &header.tensors {
            let end = record.offset + record.bytes;
            if end > payload.len() {
                return Err(CheckpointError::Tensor {
                    name: record.name.clone(),
                    problem: "payload range out of bounds".into(),
                });
            }
            let tensor =
                Tensor::<T>::from_le_bytes(record.shape.clone(), &payload[record.offset..end])
                    .map_err(|e| CheckpointError::Tensor {
                        name: record.name.clone(),
                        problem: e.to_string(),
                    })?;
            let entry = params.entry_mut(&record.name).ok_or_else(|| CheckpointError::Tensor {
                name: record.name.clone(),
                problem: "unknown tensor name".into(),
            })?;
            if entry.tensor.shape() != tensor.shape() {
                return Err(CheckpointError::Tensor {
                    name: record.name.clone(),
                    problem: format!(
                        "shape {:?} != expected {:?}",
                        tensor.shape(),
                        entry.tensor.shape()
                    ),
                });
            }
            entry.tensor = tensor;
        }
        let names: Vec<String> = header.trainable_groups.clone();
        params.set_trainable_by_name(&names)?;
        Ok(params)
    }

    /// Reads just the dtype tag from a checkpoint header.
    pub fn peek_dtype(path: &Path) -> Result<Dtype, CheckpointError> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = file.read(&mut byte)?;
            if n == 0 || byte[0] == b'\n' {
                break;
            }
            buf.push(byte[0]);
        }
        let header: Header = serde_json::from_slice(&buf)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        match header.dtype.as_str() {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(CheckpointError::Header(format!("unknown dtype {other}"))),
        }
    }
}
