//! Encoder-decoder transformer in which every attention head is multiplied
//! by a scalar gate.
//!
//! Gates are recorded on the tape as differentiable leaves, one per head
//! with one component per batch row, so after `backward()` the gradient of
//! head h's gate on example x is exactly the contraction of the head's
//! context with the upstream loss gradient. That gradient is the head
//! importance score.
//!
//! With every gate at 1 the model is bit-identical to an ungated
//! transformer; masked heads get gate 0 with no rescaling of the survivors
//! (a `rescale_heads` config flag exposes the inverted-dropout alternative).

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Tape, TensorId};

/// Additive mask value for disallowed attention links; large enough that
/// the score underflows to exactly zero probability in f32.
const NEG_INF: f32 = -1e9;

// ── head addressing ──────────────────────────────────────────────────

/// The three attention types, in flat-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttnType {
    EncSelf,
    DecSelf,
    EncDec,
}

impl AttnType {
    pub const ALL: [AttnType; 3] = [AttnType::EncSelf, AttnType::DecSelf, AttnType::EncDec];

    pub fn index(self) -> usize {
        match self {
            AttnType::EncSelf => 0,
            AttnType::DecSelf => 1,
            AttnType::EncDec => 2,
        }
    }
}

impl fmt::Display for AttnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnType::EncSelf => write!(f, "enc_self"),
            AttnType::DecSelf => write!(f, "dec_self"),
            AttnType::EncDec => write!(f, "enc_dec"),
        }
    }
}

impl std::str::FromStr for AttnType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enc_self" => Ok(AttnType::EncSelf),
            "dec_self" => Ok(AttnType::DecSelf),
            "enc_dec" => Ok(AttnType::EncDec),
            other => Err(Error::usage(format!("unknown attention type '{}'", other))),
        }
    }
}

/// Coordinate of one attention head. Derived ordering matches the flat
/// index: type, then layer, then head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub attn_type: AttnType,
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(attn_type: AttnType, layer: usize, head: usize) -> Self {
        HeadId { attn_type, layer, head }
    }

    /// Flat index: type * layers * heads + layer * heads + head.
    pub fn flat(&self, config: &ModelConfig) -> usize {
        (self.attn_type.index() * config.layers + self.layer) * config.heads_per_layer + self.head
    }

    pub fn from_flat(flat: usize, config: &ModelConfig) -> Result<Self> {
        if flat >= count_heads(config) {
            return Err(Error::usage(format!(
                "flat head id {} out of range (model has {} heads)",
                flat,
                count_heads(config)
            )));
        }
        let heads = config.heads_per_layer;
        let per_type = config.layers * heads;
        Ok(HeadId {
            attn_type: AttnType::ALL[flat / per_type],
            layer: (flat % per_type) / heads,
            head: flat % heads,
        })
    }
}

/// Total number of gated heads: 3 attention types, `layers` layers each,
/// `heads_per_layer` heads per layer.
pub fn count_heads(config: &ModelConfig) -> usize {
    3 * config.layers * config.heads_per_layer
}

// ── mask sets ────────────────────────────────────────────────────────

/// Gate assignment over all heads; heads absent from the map have gate 1.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskSet {
    gates: BTreeMap<HeadId, u8>,
}

impl MaskSet {
    /// No masking: every gate is 1.
    pub fn all_ones() -> Self {
        MaskSet::default()
    }

    pub fn from_masked(heads: impl IntoIterator<Item = HeadId>) -> Self {
        let mut m = MaskSet::default();
        for h in heads {
            m.set_gate(h, 0);
        }
        m
    }

    pub fn set_gate(&mut self, head: HeadId, value: u8) {
        debug_assert!(value <= 1);
        self.gates.insert(head, value);
    }

    pub fn gate(&self, head: HeadId) -> f32 {
        match self.gates.get(&head) {
            Some(0) => 0.0,
            _ => 1.0,
        }
    }

    pub fn masked(&self, head: HeadId) -> bool {
        self.gates.get(&head) == Some(&0)
    }

    pub fn count_masked(&self) -> usize {
        self.gates.values().filter(|&&v| v == 0).count()
    }

    /// Masked heads in flat-index order.
    pub fn masked_heads(&self) -> Vec<HeadId> {
        self.gates.iter().filter(|(_, &v)| v == 0).map(|(&h, _)| h).collect()
    }
}

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads_per_layer: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub dropout: f32,
    pub max_len: usize,
    /// Scale surviving heads of a layer by H/(H-masked) when masking.
    pub rescale_heads: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 24 heads in 8 groups of 3.
    pub fn desk(vocab_src: usize, vocab_tgt: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads_per_layer: 4,
            d_model: 64,
            d_ff: 128,
            vocab_src,
            vocab_tgt,
            dropout: 0.1,
            max_len: 32,
            rescale_heads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads_per_layer == 0 {
            return Err(Error::usage("layers and heads_per_layer must be positive"));
        }
        if self.d_model % self.heads_per_layer != 0 {
            return Err(Error::usage(format!(
                "d_model {} not divisible by heads_per_layer {}",
                self.d_model, self.heads_per_layer
            )));
        }
        if self.vocab_src < 4 || self.vocab_tgt < 4 {
            return Err(Error::usage("vocab sizes must cover the reserved ids"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.max_len == 0 {
            return Err(Error::usage("max_len must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads_per_layer
    }

    /// All head ids in flat order.
    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..count_heads(self)).map(|f| HeadId::from_flat(f, self).unwrap()).collect()
    }
}

// ── parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// The model: a config plus named parameter buffers. Forward passes record
/// onto caller-owned tapes; the model itself is only mutated by the
/// optimizer through [`Model::params_mut`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
    pos_encoding: Vec<f32>,
}

/// Loss reduction over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Mean over all non-pad target tokens of the batch; the training loss.
    TokenMean,
    /// Sum over examples of each example's own token-mean loss. Gate
    /// gradients under this mode are exact per-example loss derivatives.
    SentenceSum,
}

/// Per-forward options.
pub struct ForwardOpts<'a> {
    /// Dropout generator; `None` runs in eval mode (dropout is identity).
    pub dropout_rng: Option<ChaCha8Rng>,
    pub loss_mode: LossMode,
    pub label_smoothing: f32,
    /// Continuous gate values overriding the mask; the hook for
    /// finite-difference probes of a gate.
    pub gate_overrides: Option<&'a BTreeMap<HeadId, f32>>,
}

impl ForwardOpts<'_> {
    pub fn eval(label_smoothing: f32) -> Self {
        ForwardOpts {
            dropout_rng: None,
            loss_mode: LossMode::TokenMean,
            label_smoothing,
            gate_overrides: None,
        }
    }
}

/// Tape handles exposed by a forward pass.
pub struct ForwardOut {
    /// Scalar loss (reduction per [`LossMode`]).
    pub loss: TensorId,
    /// `[batch, tgt_len, vocab_tgt]`.
    pub logits: TensorId,
    /// `[batch * tgt_len]`, zero at pad positions.
    pub per_token_loss: TensorId,
    /// Tape ids of the parameters, aligned with [`Model::params`].
    pub param_ids: Vec<TensorId>,
    /// Per-head tape handles in flat order.
    pub heads: Vec<HeadTap>,
}

/// Handles to one head's gate and context nodes.
pub struct HeadTap {
    pub head: HeadId,
    /// Gate leaf, one component per batch row.
    pub gate: TensorId,
    /// Pre-gate context `[batch, len, head_dim]`.
    pub context: TensorId,
    /// Post-gate context.
    pub gated: TensorId,
}

impl ForwardOut {
    pub fn tap(&self, head: HeadId) -> Option<&HeadTap> {
        self.heads.iter().find(|t| t.head == head)
    }
}

/// Ids of one attention block's parameters on the tape.
struct AttnParams {
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
}

impl Model {
    /// Fresh model with Xavier-uniform weights and N(0, d^-0.5) embeddings,
    /// drawn from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let d = config.d_model;
        let mut params = Vec::new();

        {
            let mut normal = |n: usize, std: f32| -> Vec<f32> {
                (0..n)
                    .map(|_| {
                        let u1: f64 = 1.0 - rng.gen::<f64>();
                        let u2: f64 = rng.gen();
                        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                        (z as f32) * std
                    })
                    .collect()
            };
            params.push(Param {
                name: "src_embed".into(),
                shape: vec![config.vocab_src, d],
                data: normal(config.vocab_src * d, (d as f32).powf(-0.5)),
            });
            params.push(Param {
                name: "tgt_embed".into(),
                shape: vec![config.vocab_tgt, d],
                data: normal(config.vocab_tgt * d, (d as f32).powf(-0.5)),
            });
        }

        let mut xavier = |rows: usize, cols: usize| -> Param {
            let bound = (6.0 / (rows + cols) as f32).sqrt();
            Param {
                name: String::new(),
                shape: vec![rows, cols],
                data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            }
        };
        let vec_param = |name: String, n: usize, fill: f32| Param {
            name,
            shape: vec![n],
            data: vec![fill; n],
        };
        let mut push_matrix = |params: &mut Vec<Param>, name: String, rows: usize, cols: usize| {
            let mut p = xavier(rows, cols);
            p.name = name;
            params.push(p);
        };

        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                push_matrix(&mut params, format!("enc.{}.self.{}", l, w), d, d);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.push(vec_param(format!("enc.{}.self.{}", l, b), d, 0.0));
            }
            params.push(vec_param(format!("enc.{}.ln1.gamma", l), d, 1.0));
            params.push(vec_param(format!("enc.{}.ln1.beta", l), d, 0.0));
            push_matrix(&mut params, format!("enc.{}.ff.w1", l), d, config.d_ff);
            params.push(vec_param(format!("enc.{}.ff.b1", l), config.d_ff, 0.0));
            push_matrix(&mut params, format!("enc.{}.ff.w2", l), config.d_ff, d);
            params.push(vec_param(format!("enc.{}.ff.b2", l), d, 0.0));
            params.push(vec_param(format!("enc.{}.ln2.gamma", l), d, 1.0));
            params.push(vec_param(format!("enc.{}.ln2.beta", l), d, 0.0));
        }
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                push_matrix(&mut params, format!("dec.{}.self.{}", l, w), d, d);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.push(vec_param(format!("dec.{}.self.{}", l, b), d, 0.0));
            }
            params.push(vec_param(format!("dec.{}.ln1.gamma", l), d, 1.0));
            params.push(vec_param(format!("dec.{}.ln1.beta", l), d, 0.0));
            for w in ["wq", "wk", "wv", "wo"] {
                push_matrix(&mut params, format!("dec.{}.cross.{}", l, w), d, d);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.push(vec_param(format!("dec.{}.cross.{}", l, b), d, 0.0));
            }
            params.push(vec_param(format!("dec.{}.ln2.gamma", l), d, 1.0));
            params.push(vec_param(format!("dec.{}.ln2.beta", l), d, 0.0));
            push_matrix(&mut params, format!("dec.{}.ff.w1", l), d, config.d_ff);
            params.push(vec_param(format!("dec.{}.ff.b1", l), config.d_ff, 0.0));
            push_matrix(&mut params, format!("dec.{}.ff.w2", l), config.d_ff, d);
            params.push(vec_param(format!("dec.{}.ff.b2", l), d, 0.0));
            params.push(vec_param(format!("dec.{}.ln3.gamma", l), d, 1.0));
            params.push(vec_param(format!("dec.{}.ln3.beta", l), d, 0.0));
        }
        push_matrix(&mut params, "out.w".into(), d, config.vocab_tgt);
        params.push(vec_param("out.b".into(), config.vocab_tgt, 0.0));

        let pos_encoding = sinusoidal_encoding(config.max_len, d);
        Ok(Model { config, params, pos_encoding })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Reconstruct a model from checkpointed parameters.
    pub fn from_parts(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let pos_encoding = sinusoidal_encoding(config.max_len, config.d_model);
        Ok(Model { config, params, pos_encoding })
    }

    /// FNV-1a checksum over all parameter bytes; cheap identity probe for
    /// asserting that a pass did not touch the weights.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in &p.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    // ── forward ──────────────────────────────────────────────────────

    /// Teacher-forced forward pass: records the whole computation on
    /// `tape` and returns the loss plus handles to logits, gates, and
    /// per-head contexts.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mask: &MaskSet,
        mut opts: ForwardOpts,
    ) -> Result<ForwardOut> {
        if batch.src_len > self.config.max_len || batch.tgt_len > self.config.max_len {
            return Err(Error::usage(format!(
                "sequence length {} exceeds max_len {}",
                batch.src_len.max(batch.tgt_len),
                self.config.max_len
            )));
        }
        if batch.size == 0 {
            return Err(Error::usage("empty batch"));
        }

        let param_ids: Vec<TensorId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), &p.shape))
            .collect::<Result<_>>()?;
        let mut heads: Vec<HeadTap> = Vec::new();

        let enc_out = self.encode_with(tape, batch, mask, &mut opts, &param_ids, &mut heads)?;
        let logits =
            self.decode_with(tape, batch, enc_out, mask, &mut opts, &param_ids, &mut heads)?;

        let flat = tape.reshape(logits, &[batch.size * batch.tgt_len, self.config.vocab_tgt])?;
        let per_token_loss = tape.smoothed_ce(flat, &batch.tgt_out, PAD, opts.label_smoothing)?;
        let loss = reduce_loss(tape, per_token_loss, batch, opts.loss_mode)?;

        heads.sort_by_key(|t| t.head.flat(&self.config));
        Ok(ForwardOut { loss, logits, per_token_loss, param_ids, heads })
    }

    /// Encoder stack over the source batch.
    fn encode_with(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mask: &MaskSet,
        opts: &mut ForwardOpts,
        param_ids: &[TensorId],
        heads: &mut Vec<HeadTap>,
    ) -> Result<TensorId> {
        let (b, ls) = (batch.size, batch.src_len);
        let d = self.config.d_model;
        let pid = |name: &str| param_ids[self.param_index(name).expect(name)];

        let emb = tape.embedding(pid("src_embed"), &batch.src)?;
        let emb = tape.reshape(emb, &[b, ls, d])?;
        let emb = tape.scale(emb, (d as f32).sqrt())?;
        let pe = self.positional_constant(tape, b, ls)?;
        let mut x = tape.add(emb, pe)?;
        x = self.maybe_dropout(tape, x, opts)?;

        let self_mask = pad_key_mask(tape, &batch.src, b, ls, ls, false)?;
        for l in 0..self.config.layers {
            let attn = self.attn_params(param_ids, &format!("enc.{}.self", l));
            let gates = self.resolve_gates(AttnType::EncSelf, l, mask, opts)?;
            let att = self.gated_attention(
                tape,
                x,
                x,
                &attn,
                self_mask,
                &gates,
                AttnType::EncSelf,
                l,
                b,
                heads,
            )?;
            let att = self.maybe_dropout(tape, att, opts)?;
            let res = tape.add(x, att)?;
            x = tape.layer_norm(
                res,
                pid(&format!("enc.{}.ln1.gamma", l)),
                pid(&format!("enc.{}.ln1.beta", l)),
                1e-5,
            )?;
            let ff = self.feed_forward(tape, x, param_ids, &format!("enc.{}.ff", l))?;
            let ff = self.maybe_dropout(tape, ff, opts)?;
            let res = tape.add(x, ff)?;
            x = tape.layer_norm(
                res,
                pid(&format!("enc.{}.ln2.gamma", l)),
                pid(&format!("enc.{}.ln2.beta", l)),
                1e-5,
            )?;
        }
        Ok(x)
    }

    /// Decoder stack producing logits `[b, lt, vocab_tgt]`.
    fn decode_with(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        enc_out: TensorId,
        mask: &MaskSet,
        opts: &mut ForwardOpts,
        param_ids: &[TensorId],
        heads: &mut Vec<HeadTap>,
    ) -> Result<TensorId> {
        let (b, ls, lt) = (batch.size, batch.src_len, batch.tgt_len);
        let d = self.config.d_model;
        let pid = |name: &str| param_ids[self.param_index(name).expect(name)];

        let emb = tape.embedding(pid("tgt_embed"), &batch.tgt_in)?;
        let emb = tape.reshape(emb, &[b, lt, d])?;
        let emb = tape.scale(emb, (d as f32).sqrt())?;
        let pe = self.positional_constant(tape, b, lt)?;
        let mut y = tape.add(emb, pe)?;
        y = self.maybe_dropout(tape, y, opts)?;

        let self_mask = pad_key_mask(tape, &batch.tgt_in, b, lt, lt, true)?;
        let cross_mask = pad_key_mask(tape, &batch.src, b, lt, ls, false)?;
        for l in 0..self.config.layers {
            let attn = self.attn_params(param_ids, &format!("dec.{}.self", l));
            let gates = self.resolve_gates(AttnType::DecSelf, l, mask, opts)?;
            let att = self.gated_attention(
                tape,
                y,
                y,
                &attn,
                self_mask,
                &gates,
                AttnType::DecSelf,
                l,
                b,
                heads,
            )?;
            let att = self.maybe_dropout(tape, att, opts)?;
            let res = tape.add(y, att)?;
            y = tape.layer_norm(
                res,
                pid(&format!("dec.{}.ln1.gamma", l)),
                pid(&format!("dec.{}.ln1.beta", l)),
                1e-5,
            )?;

            let attn = self.attn_params(param_ids, &format!("dec.{}.cross", l));
            let gates = self.resolve_gates(AttnType::EncDec, l, mask, opts)?;
            let att = self.gated_attention(
                tape,
                y,
                enc_out,
                &attn,
                cross_mask,
                &gates,
                AttnType::EncDec,
                l,
                b,
                heads,
            )?;
            let att = self.maybe_dropout(tape, att, opts)?;
            let res = tape.add(y, att)?;
            y = tape.layer_norm(
                res,
                pid(&format!("dec.{}.ln2.gamma", l)),
                pid(&format!("dec.{}.ln2.beta", l)),
                1e-5,
            )?;

            let ff = self.feed_forward(tape, y, param_ids, &format!("dec.{}.ff", l))?;
            let ff = self.maybe_dropout(tape, ff, opts)?;
            let res = tape.add(y, ff)?;
            y = tape.layer_norm(
                res,
                pid(&format!("dec.{}.ln3.gamma", l)),
                pid(&format!("dec.{}.ln3.beta", l)),
                1e-5,
            )?;
        }
        let proj = tape.matmul(y, pid("out.w"))?;
        tape.add_bias(proj, pid("out.b"))
    }

    /// Gate values for one attention block: the mask's 0/1 assignment,
    /// test overrides on top, and optional survivor rescaling.
    fn resolve_gates(
        &self,
        attn_type: AttnType,
        layer: usize,
        mask: &MaskSet,
        opts: &ForwardOpts,
    ) -> Result<Vec<f32>> {
        let h = self.config.heads_per_layer;
        let mut gates = Vec::with_capacity(h);
        let mut masked_here = 0usize;
        for head in 0..h {
            let id = HeadId::new(attn_type, layer, head);
            if mask.masked(id) {
                masked_here += 1;
            }
            let mut v = mask.gate(id);
            if let Some(over) = opts.gate_overrides {
                if let Some(&o) = over.get(&id) {
                    v = o;
                }
            }
            gates.push(v);
        }
        if self.config.rescale_heads && masked_here > 0 && masked_here < h {
            let factor = h as f32 / (h - masked_here) as f32;
            for g in &mut gates {
                if *g != 0.0 {
                    *g *= factor;
                }
            }
        }
        Ok(gates)
    }

    /// Multi-head scaled-dot-product attention with one gate scalar per
    /// head. Per head: softmax(q kᵀ / sqrt(d_k) + add_mask) v, multiplied
    /// by its gate, heads concatenated, output projection applied.
    #[allow(clippy::too_many_arguments)]
    fn gated_attention(
        &self,
        tape: &mut Tape,
        x_q: TensorId,
        x_kv: TensorId,
        params: &AttnParams,
        add_mask: TensorId,
        gate_values: &[f32],
        attn_type: AttnType,
        layer: usize,
        batch: usize,
        heads_out: &mut Vec<HeadTap>,
    ) -> Result<TensorId> {
        let h = self.config.heads_per_layer;
        if gate_values.len() != h {
            return Err(Error::usage(format!(
                "expected {} gate values for one layer, got {}",
                h,
                gate_values.len()
            )));
        }
        let dk = self.config.head_dim();
        let q = tape.matmul(x_q, params.wq)?;
        let q = tape.add_bias(q, params.bq)?;
        let k = tape.matmul(x_kv, params.wk)?;
        let k = tape.add_bias(k, params.bk)?;
        let v = tape.matmul(x_kv, params.wv)?;
        let v = tape.add_bias(v, params.bv)?;

        let mut gated_heads = Vec::with_capacity(h);
        for head in 0..h {
            let qh = tape.slice_last(q, head * dk, dk)?;
            let kh = tape.slice_last(k, head * dk, dk)?;
            let vh = tape.slice_last(v, head * dk, dk)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, 1.0 / (dk as f32).sqrt())?;
            let masked = tape.add(scaled, add_mask)?;
            let probs = tape.softmax(masked, 2)?;
            let context = tape.matmul(probs, vh)?;
            let gate = tape.leaf(vec![gate_values[head]; batch], &[batch])?;
            let gated = tape.scale_rows(context, gate)?;
            heads_out.push(HeadTap {
                head: HeadId::new(attn_type, layer, head),
                gate,
                context,
                gated,
            });
            gated_heads.push(gated);
        }
        let merged = tape.concat(&gated_heads, 2)?;
        let out = tape.matmul(merged, params.wo)?;
        tape.add_bias(out, params.bo)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        param_ids: &[TensorId],
        prefix: &str,
    ) -> Result<TensorId> {
        let pid = |name: &str| param_ids[self.param_index(name).expect(name)];
        let h = tape.matmul(x, pid(&format!("{}.w1", prefix)))?;
        let h = tape.add_bias(h, pid(&format!("{}.b1", prefix)))?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, pid(&format!("{}.w2", prefix)))?;
        tape.add_bias(out, pid(&format!("{}.b2", prefix)))
    }

    fn attn_params(&self, param_ids: &[TensorId], prefix: &str) -> AttnParams {
        let pid = |name: String| param_ids[self.param_index(&name).expect("attention param")];
        AttnParams {
            wq: pid(format!("{}.wq", prefix)),
            bq: pid(format!("{}.bq", prefix)),
            wk: pid(format!("{}.wk", prefix)),
            bk: pid(format!("{}.bk", prefix)),
            wv: pid(format!("{}.wv", prefix)),
            bv: pid(format!("{}.bv", prefix)),
            wo: pid(format!("{}.wo", prefix)),
            bo: pid(format!("{}.bo", prefix)),
        }
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: TensorId,
        opts: &mut ForwardOpts,
    ) -> Result<TensorId> {
        let p = self.config.dropout;
        match opts.dropout_rng.as_mut() {
            Some(rng) if p > 0.0 => tape.dropout(x, p, rng),
            _ => Ok(x),
        }
    }

    /// Positional encoding tiled over the batch as a constant.
    fn positional_constant(&self, tape: &mut Tape, batch: usize, len: usize) -> Result<TensorId> {
        let d = self.config.d_model;
        let slice = &self.pos_encoding[..len * d];
        let mut data = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            data.extend_from_slice(slice);
        }
        tape.constant(data, &[batch, len, d])
    }

    // ── greedy decoding ──────────────────────────────────────────────

    /// Greedy decode of `sources` under `mask`: encode once, then extend
    /// each hypothesis with the argmax token until eos or `max_len`.
    /// Returned sequences carry no bos/eos.
    pub fn greedy_decode(&self, sources: &[Vec<u32>], mask: &MaskSet) -> Result<Vec<Vec<u32>>> {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(64) {
            out.extend(self.greedy_decode_chunk(chunk, mask)?);
        }
        Ok(out)
    }

    fn greedy_decode_chunk(&self, sources: &[Vec<u32>], mask: &MaskSet) -> Result<Vec<Vec<u32>>> {
        use crate::data::{BOS, EOS};
        let b = sources.len();
        let ls = sources.iter().map(Vec::len).max().unwrap_or(0);
        let mut src = vec![PAD; b * ls];
        for (i, s) in sources.iter().enumerate() {
            src[i * ls..i * ls + s.len()].copy_from_slice(s);
        }

        // Encode once and reuse the activations as a constant across steps.
        let mut enc_tape = Tape::new();
        let batch_stub = Batch {
            src: src.clone(),
            tgt_in: vec![BOS; b],
            tgt_out: vec![EOS; b],
            size: b,
            src_len: ls,
            tgt_len: 1,
        };
        let param_ids: Vec<TensorId> = self
            .params
            .iter()
            .map(|p| enc_tape.leaf(p.data.clone(), &p.shape))
            .collect::<Result<_>>()?;
        let mut opts = ForwardOpts::eval(0.0);
        let mut taps = Vec::new();
        let enc =
            self.encode_with(&mut enc_tape, &batch_stub, mask, &mut opts, &param_ids, &mut taps)?;
        let enc_data = enc_tape.data(enc).to_vec();
        let enc_shape = enc_tape.shape(enc).to_vec();
        drop(enc_tape);

        let mut hyps: Vec<Vec<u32>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for step in 1..=self.config.max_len.saturating_sub(1) {
            let mut tgt_in = vec![PAD; b * step];
            for (i, hyp) in hyps.iter().enumerate() {
                tgt_in[i * step] = BOS;
                for (j, &t) in hyp.iter().enumerate() {
                    tgt_in[i * step + 1 + j] = t;
                }
            }
            let batch = Batch {
                src: src.clone(),
                tgt_in,
                tgt_out: vec![EOS; b * step],
                size: b,
                src_len: ls,
                tgt_len: step,
            };
            let mut tape = Tape::new();
            let param_ids: Vec<TensorId> = self
                .params
                .iter()
                .map(|p| tape.leaf(p.data.clone(), &p.shape))
                .collect::<Result<_>>()?;
            let enc_const = tape.constant(enc_data.clone(), &enc_shape)?;
            let mut opts = ForwardOpts::eval(0.0);
            let mut taps = Vec::new();
            let logits = self.decode_with(
                &mut tape,
                &batch,
                enc_const,
                mask,
                &mut opts,
                &param_ids,
                &mut taps,
            )?;
            let v = self.config.vocab_tgt;
            let data = tape.data(logits);
            let mut all_done = true;
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let lane = &data[(i * step + step - 1) * v..(i * step + step) * v];
                let next = argmax(lane) as u32;
                if next == EOS {
                    done[i] = true;
                } else {
                    hyps[i].push(next);
                    all_done = false;
                }
            }
            if all_done || done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(hyps)
    }
}

/// First-maximum argmax; deterministic under ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Weighted reduction of per-token losses into the scalar loss.
fn reduce_loss(
    tape: &mut Tape,
    per_token: TensorId,
    batch: &Batch,
    mode: LossMode,
) -> Result<TensorId> {
    let n = batch.size * batch.tgt_len;
    let mut weights = vec![0.0f32; n];
    match mode {
        LossMode::TokenMean => {
            let nonpad = batch.nonpad_targets();
            if nonpad == 0 {
                return Err(Error::usage("batch has no non-pad target tokens"));
            }
            let w = 1.0 / nonpad as f32;
            for (i, &t) in batch.tgt_out.iter().enumerate() {
                if t != PAD {
                    weights[i] = w;
                }
            }
        }
        LossMode::SentenceSum => {
            for s in 0..batch.size {
                let row = &batch.tgt_out[s * batch.tgt_len..(s + 1) * batch.tgt_len];
                let nonpad = row.iter().filter(|&&t| t != PAD).count();
                if nonpad == 0 {
                    continue;
                }
                let w = 1.0 / nonpad as f32;
                for (i, &t) in row.iter().enumerate() {
                    if t != PAD {
                        weights[s * batch.tgt_len + i] = w;
                    }
                }
            }
        }
    }
    let w = tape.constant(weights, &[n])?;
    let weighted = tape.mul(per_token, w)?;
    tape.sum_all(weighted)
}

/// Additive attention mask: NEG_INF where the key is a pad token, plus the
/// strict upper triangle when `causal`.
fn pad_key_mask(
    tape: &mut Tape,
    key_tokens: &[u32],
    batch: usize,
    lq: usize,
    lk: usize,
    causal: bool,
) -> Result<TensorId> {
    let mut data = vec![0.0f32; batch * lq * lk];
    for b in 0..batch {
        for q in 0..lq {
            for k in 0..lk {
                let pad = key_tokens[b * lk + k] == PAD;
                let future = causal && k > q;
                if pad || future {
                    data[(b * lq + q) * lk + k] = NEG_INF;
                }
            }
        }
    }
    tape.constant(data, &[batch, lq, lk])
}

/// Fixed sinusoidal position table `[max_len, d]`.
fn sinusoidal_encoding(max_len: usize, d: usize) -> Vec<f32> {
    let mut pe = vec![0.0f32; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = rate.sin() as f32;
            pe[pos * d + 2 * i + 1] = rate.cos() as f32;
        }
    }
    pe
}
