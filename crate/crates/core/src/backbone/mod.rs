//! Small frozen encoder-decoder transformer.
//!
//! Single-head attention `Softmax(Q K^T / sqrt(d)) V W_o`, a ReLU feed-forward
//! `relu(H W_1 + b_1) W_2 + b_2`, and a post-norm layer norm that divides by
//! the row variance (not the standard deviation) with no mean subtraction:
//! `H / var(H) * s + b`. Each sublayer is wrapped as `LN(h + sublayer(h))`.
//!
//! Every linear projection, module output and layer norm passes through a
//! [`SiteHook`], which is how PET modules attach.

mod site;
mod weights;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use site::{enumerate_sites, Projection, SiteClass, Stack, SublayerId, SublayerKind};
pub use weights::{
    AttnWeights, DecoderLayerWeights, EncoderLayerWeights, FfnWeights, FrozenWeights, NormWeights,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Additive mask value for disallowed attention entries.
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            hidden_dim: 32,
            ffn_dim: 64,
            vocab_size: 64,
            max_seq_len: 16,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("backbone.{name} must be positive")));
        }
        if self.ffn_dim < self.hidden_dim {
            return Err(Error::config(format!(
                "backbone.ffn_dim ({}) must be >= hidden_dim ({})",
                self.ffn_dim, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// A batch of fixed-length source/target sequence pairs, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub enc_len: usize,
    pub dec_len: usize,
    pub enc_ids: Vec<usize>,
    pub dec_ids: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn new(
        size: usize,
        enc_len: usize,
        dec_len: usize,
        enc_ids: Vec<usize>,
        dec_ids: Vec<usize>,
        targets: Vec<usize>,
    ) -> Result<Self> {
        if size == 0 || enc_len == 0 || dec_len == 0 {
            return Err(Error::Input("batch dimensions must be positive".into()));
        }
        if enc_ids.len() != size * enc_len
            || dec_ids.len() != size * dec_len
            || targets.len() != size * dec_len
        {
            return Err(Error::Input(format!(
                "batch of {size} x ({enc_len}, {dec_len}) has {}/{}/{} ids",
                enc_ids.len(),
                dec_ids.len(),
                targets.len()
            )));
        }
        Ok(Batch {
            size,
            enc_len,
            dec_len,
            enc_ids,
            dec_ids,
            targets,
        })
    }
}

/// Intercepts the output of a hookable site.
///
/// `input` is what the site consumed (projection input, module input, or the
/// pre-norm residual sum) and `output` the frozen result; the return value
/// replaces `output` downstream.
pub trait SiteHook {
    fn apply(&mut self, tape: &mut Tape, site: SublayerId, input: Var, output: Var) -> Result<Var>;
}

/// Leaves every site untouched.
pub struct NoHook;

impl SiteHook for NoHook {
    fn apply(&mut self, _: &mut Tape, _: SublayerId, _: Var, output: Var) -> Result<Var> {
        Ok(output)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    weights: FrozenWeights,
    fingerprint: u64,
}

impl Backbone {
    /// Seeded Gaussian initialization (std `1/sqrt(fan_in)` for projections).
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Stream::BackboneInit);
        let weights = FrozenWeights::init(&config, &mut rng);
        Ok(Backbone::from_parts(config, weights))
    }

    fn from_parts(config: BackboneConfig, weights: FrozenWeights) -> Self {
        let fingerprint = fingerprint_bytes(&weights::encode(&config, &weights));
        Backbone {
            config,
            weights,
            fingerprint,
        }
    }

    /// Builds a backbone around explicit weights (used by tests and tools).
    pub fn from_weights(config: BackboneConfig, weights: FrozenWeights) -> Result<Self> {
        config.validate()?;
        let bytes = weights::encode(&config, &weights);
        // round-trip through the decoder to validate every shape
        let (config, weights) = weights::decode(&bytes)?;
        Ok(Backbone::from_parts(config, weights))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &FrozenWeights {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// 64-bit digest of the serialized weights.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        weights::encode(&self.config, &self.weights)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, weights) = weights::decode(bytes)?;
        Ok(Backbone::from_parts(config, weights))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Backbone::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }

    pub fn sites(&self) -> Vec<SublayerId> {
        enumerate_sites(&self.config)
    }

    /// Runs the full model and returns decoder logits `[size * dec_len, vocab]`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, hook: &mut dyn SiteHook) -> Result<Var> {
        self.check_batch(batch)?;
        let w = &self.weights;
        let enc = self.embed(tape, &batch.enc_ids, batch.size, batch.enc_len)?;
        let mut h = enc;
        for (l, lw) in w.encoder.iter().enumerate() {
            h = self.encoder_layer(tape, h, batch, l, lw, hook)?;
        }
        let enc_out = self.norm(
            tape,
            h,
            &w.encoder_final_ln,
            SublayerId::norm(Stack::Encoder, w.encoder.len() - 1, Projection::FinalLn),
            hook,
        )?;

        let mut h = self.embed(tape, &batch.dec_ids, batch.size, batch.dec_len)?;
        for (l, lw) in w.decoder.iter().enumerate() {
            h = self.decoder_layer(tape, h, enc_out, batch, l, lw, hook)?;
        }
        let h = self.norm(
            tape,
            h,
            &w.decoder_final_ln,
            SublayerId::norm(Stack::Decoder, w.decoder.len() - 1, Projection::FinalLn),
            hook,
        )?;
        let head = tape.leaf(&w.head);
        tape.matmul(h, head)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = &self.config;
        if batch.enc_len > cfg.max_seq_len || batch.dec_len > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence lengths ({}, {}) exceed max_seq_len {}",
                batch.enc_len, batch.dec_len, cfg.max_seq_len
            )));
        }
        let oov = batch
            .enc_ids
            .iter()
            .chain(&batch.dec_ids)
            .chain(&batch.targets)
            .find(|&&t| t >= cfg.vocab_size);
        if let Some(t) = oov {
            return Err(Error::Input(format!(
                "token id {t} out of vocabulary ({})",
                cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embedding plus learned-free positional embedding, `[size*len, d]`.
    fn embed(&self, tape: &mut Tape, ids: &[usize], size: usize, len: usize) -> Result<Var> {
        let d = self.config.hidden_dim;
        let table = tape.leaf(&self.weights.embedding);
        let tok = tape.embedding(table, ids)?;
        let tok = tape.reshape(tok, vec![size, len, d])?;
        let pos_table = tape.leaf(&self.weights.positions);
        let pos_ids: Vec<usize> = (0..len).collect();
        let pos = tape.embedding(pos_table, &pos_ids)?;
        let h = tape.add(tok, pos)?;
        tape.reshape(h, vec![size * len, d])
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        h: Var,
        batch: &Batch,
        layer: usize,
        w: &EncoderLayerWeights,
        hook: &mut dyn SiteHook,
    ) -> Result<Var> {
        let st = Stack::Encoder;
        let (b, s) = (batch.size, batch.enc_len);
        let a = self.attention(tape, h, h, b, s, s, &w.self_attn, st, layer, SublayerKind::SelfAttn, false, hook)?;
        let r = tape.add(h, a)?;
        let h = self.norm(tape, r, &w.attn_ln, SublayerId::norm(st, layer, Projection::AttnLn), hook)?;
        let f = self.feed_forward(tape, h, &w.ffn, st, layer, hook)?;
        let r = tape.add(h, f)?;
        self.norm(tape, r, &w.ffn_ln, SublayerId::norm(st, layer, Projection::FfnLn), hook)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        tape: &mut Tape,
        h: Var,
        enc_out: Var,
        batch: &Batch,
        layer: usize,
        w: &DecoderLayerWeights,
        hook: &mut dyn SiteHook,
    ) -> Result<Var> {
        let st = Stack::Decoder;
        let (b, sd, se) = (batch.size, batch.dec_len, batch.enc_len);
        let a = self.attention(tape, h, h, b, sd, sd, &w.self_attn, st, layer, SublayerKind::SelfAttn, true, hook)?;
        let r = tape.add(h, a)?;
        let h = self.norm(tape, r, &w.attn_ln, SublayerId::norm(st, layer, Projection::AttnLn), hook)?;
        let c = self.attention(tape, h, enc_out, b, sd, se, &w.cross_attn, st, layer, SublayerKind::CrossAttn, false, hook)?;
        let r = tape.add(h, c)?;
        let h = self.norm(tape, r, &w.cross_ln, SublayerId::norm(st, layer, Projection::CrossLn), hook)?;
        let f = self.feed_forward(tape, h, &w.ffn, st, layer, hook)?;
        let r = tape.add(h, f)?;
        self.norm(tape, r, &w.ffn_ln, SublayerId::norm(st, layer, Projection::FfnLn), hook)
    }

    /// Self-attention over `h` (`[batch_size * seq, d]`), causal in the decoder.
    #[allow(clippy::too_many_arguments)]
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        h: Var,
        batch_size: usize,
        w: &AttnWeights,
        stack: Stack,
        layer: usize,
        hook: &mut dyn SiteHook,
    ) -> Result<Var> {
        let rows = tape.shape(h)[0];
        if tape.shape(h).len() != 2 || rows % batch_size != 0 || tape.shape(h)[1] != self.config.hidden_dim {
            return Err(Error::shape(format!(
                "self_attention: input {:?} for batch of {batch_size}, d = {}",
                tape.shape(h),
                self.config.hidden_dim
            )));
        }
        let s = rows / batch_size;
        let causal = stack == Stack::Decoder;
        self.attention(tape, h, h, batch_size, s, s, w, stack, layer, SublayerKind::SelfAttn, causal, hook)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        q_in: Var,
        kv_in: Var,
        bsz: usize,
        sq: usize,
        sk: usize,
        w: &AttnWeights,
        stack: Stack,
        layer: usize,
        kind: SublayerKind,
        causal: bool,
        hook: &mut dyn SiteHook,
    ) -> Result<Var> {
        let d = self.config.hidden_dim;
        let mut project = |tape: &mut Tape, x: Var, wt: &crate::autodiff::Tensor, p: Projection| -> Result<Var> {
            let wv = tape.leaf(wt);
            let y = tape.matmul(x, wv)?;
            hook.apply(tape, SublayerId::linear(stack, layer, kind, p), x, y)
        };
        let q = project(tape, q_in, &w.wq, Projection::Q)?;
        let k = project(tape, kv_in, &w.wk, Projection::K)?;
        let v = project(tape, kv_in, &w.wv, Projection::V)?;

        let q3 = tape.reshape(q, vec![bsz, sq, d])?;
        let k3 = tape.reshape(k, vec![bsz, sk, d])?;
        let v3 = tape.reshape(v, vec![bsz, sk, d])?;
        let kt = tape.transpose(k3)?;
        let scores = tape.batch_matmul(q3, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        if causal && sq > 1 {
            let mask: Vec<f64> = (0..sq * sk)
                .map(|i| if i % sk > i / sk { MASKED } else { 0.0 })
                .collect();
            let m = tape.constant(vec![sq, sk], mask)?;
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores);
        let ctx = tape.batch_matmul(attn, v3)?;
        let ctx = tape.reshape(ctx, vec![bsz * sq, d])?;
        let o = project(tape, ctx, &w.wo, Projection::O)?;
        hook.apply(tape, SublayerId::module_output(stack, layer, kind), q_in, o)
    }

    /// `relu(h W_1 + b_1) W_2 + b_2` over rows of `h`.
    pub fn feed_forward(
        &self,
        tape: &mut Tape,
        h: Var,
        w: &FfnWeights,
        stack: Stack,
        layer: usize,
        hook: &mut dyn SiteHook,
    ) -> Result<Var> {
        let kind = SublayerKind::Ffn;
        let w1 = tape.leaf(&w.w1);
        let b1 = tape.leaf(&w.b1);
        let x1 = tape.matmul(h, w1)?;
        let x1 = tape.add(x1, b1)?;
        let x1 = hook.apply(tape, SublayerId::linear(stack, layer, kind, Projection::W1), h, x1)?;
        let act = tape.relu(x1);
        let w2 = tape.leaf(&w.w2);
        let b2 = tape.leaf(&w.b2);
        let x2 = tape.matmul(act, w2)?;
        let x2 = tape.add(x2, b2)?;
        let x2 = hook.apply(tape, SublayerId::linear(stack, layer, kind, Projection::W2), act, x2)?;
        hook.apply(tape, SublayerId::module_output(stack, layer, kind), h, x2)
    }

    fn norm(
        &self,
        tape: &mut Tape,
        x: Var,
        w: &NormWeights,
        site: SublayerId,
        hook: &mut dyn SiteHook,
    ) -> Result<Var> {
        let s = tape.leaf(&w.s);
        let b = tape.leaf(&w.b);
        let y = tape.layernorm_scale(x, s, b)?;
        hook.apply(tape, site, x, y)
    }
}

fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}
