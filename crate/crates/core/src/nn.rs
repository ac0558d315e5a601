//! Transformer building blocks over packed sequences.
//!
//! Batches are packed exactly: sentence `s` occupies rows
//! `segs[s].0 .. segs[s].0 + segs[s].1` of each activation matrix and no
//! padding rows exist anywhere. Attention extents are expressed as
//! [`AttnSpan`]s derived from those segments, which makes every per-sentence
//! result independent of what else shares the batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{AttnIds, DecLayerIds, EncLayerIds, FfnIds, LnIds, ModelConfig, ModelIds};
use crate::tensor::{AttnSpan, NodeId, Tape};

/// `(start_row, length)` of each sentence in a packed matrix.
pub type Segs = [(usize, usize)];

/// Sinusoidal position table, `max_len x d` row-major:
/// even columns `sin(pos / 10000^(2i/d))`, odd columns the matching cosine.
pub fn positional_encoding(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = (pos as f64 * rate).sin();
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = (pos as f64 * rate).cos();
            }
        }
    }
    pe
}

/// Inverted dropout; `Off` (or probability zero) is the identity.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if self.p == 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.dims(x);
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < self.p { 0.0 } else { 1.0 / keep })
            .collect();
        tape.mask_mul(x, mask)
    }
}

/// `x · w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Multi-head attention over whole matrices: every query row attends every
/// key row (minus entries `key_mask` disables). The building block for
/// single-sentence use; batched paths pass explicit spans to
/// [`Tape::attention`] instead.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: NodeId,
    key: NodeId,
    value: NodeId,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<NodeId> {
    let (qr, _) = tape.dims(query);
    let (kr, _) = tape.dims(key);
    let span = AttnSpan { q_start: 0, q_len: qr, kv_start: 0, kv_len: kr };
    tape.attention(query, key, value, &[span], heads, false, key_mask)
}

/// Self-attention spans: each sentence attends within itself.
pub fn self_spans(segs: &Segs) -> Vec<AttnSpan> {
    segs.iter()
        .map(|&(start, len)| AttnSpan { q_start: start, q_len: len, kv_start: start, kv_len: len })
        .collect()
}

/// Cross-attention spans pairing query segment `i` with memory segment `i`.
pub fn cross_spans(q_segs: &Segs, kv_segs: &Segs) -> Result<Vec<AttnSpan>> {
    if q_segs.len() != kv_segs.len() {
        return Err(Error::Shape(format!(
            "cross attention: {} query segments vs {} memory segments",
            q_segs.len(),
            kv_segs.len()
        )));
    }
    Ok(q_segs
        .iter()
        .zip(kv_segs)
        .map(|(&(qs, ql), &(ks, kl))| AttnSpan { q_start: qs, q_len: ql, kv_start: ks, kv_len: kl })
        .collect())
}

/// Packed position rows: position indices restart at zero for each segment.
fn packed_positions(segs: &Segs, max_positions: usize, d: usize) -> Result<Vec<f64>> {
    let total: usize = segs.iter().map(|s| s.1).sum();
    let table = positional_encoding(max_positions, d);
    let mut out = vec![0.0; total * d];
    for &(start, len) in segs {
        if len > max_positions {
            return Err(Error::Data(format!(
                "sequence of length {len} exceeds the {max_positions}-position table"
            )));
        }
        for p in 0..len {
            out[(start + p) * d..(start + p + 1) * d].copy_from_slice(&table[p * d..(p + 1) * d]);
        }
    }
    Ok(out)
}

/// Token embedding, `sqrt(d)` scaling, positions, dropout.
pub fn embed_sequence(
    tape: &mut Tape,
    embed: NodeId,
    ids: &[u32],
    segs: &Segs,
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let total: usize = segs.iter().map(|s| s.1).sum();
    if ids.len() != total {
        return Err(Error::Shape(format!(
            "{} token ids for segments covering {} rows",
            ids.len(),
            total
        )));
    }
    let d = cfg.d_model;
    let e = tape.embedding(embed, ids)?;
    let scaled = tape.scale(e, (d as f64).sqrt())?;
    let pe = packed_positions(segs, cfg.max_positions, d)?;
    let pe = tape.constant(total, d, pe)?;
    let x = tape.add(scaled, pe)?;
    dropout.apply(tape, x)
}

fn attn_block(
    tape: &mut Tape,
    ln: &LnIds<NodeId>,
    attn: &AttnIds<NodeId>,
    x: NodeId,
    kv_from: Option<(NodeId, NodeId)>,
    spans: &[AttnSpan],
    heads: usize,
    causal: bool,
    eps: f64,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let a = tape.layer_norm(x, ln.g, ln.b, eps)?;
    let q = linear(tape, a, attn.wq, attn.bq)?;
    let (k, v) = match kv_from {
        // Pre-projected keys/values (shared cross-attention memory).
        Some(kv) => kv,
        None => {
            let k = linear(tape, a, attn.wk, attn.bk)?;
            let v = linear(tape, a, attn.wv, attn.bv)?;
            (k, v)
        }
    };
    let att = tape.attention(q, k, v, spans, heads, causal, None)?;
    let o = linear(tape, att, attn.wo, attn.bo)?;
    let o = dropout.apply(tape, o)?;
    tape.add(x, o)
}

pub(crate) fn ffn_block(
    tape: &mut Tape,
    ln: &LnIds<NodeId>,
    ffn: &FfnIds<NodeId>,
    x: NodeId,
    eps: f64,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let f = tape.layer_norm(x, ln.g, ln.b, eps)?;
    let h = linear(tape, f, ffn.w1, ffn.b1)?;
    let h = tape.relu(h)?;
    let h = linear(tape, h, ffn.w2, ffn.b2)?;
    let h = dropout.apply(tape, h)?;
    tape.add(x, h)
}

fn encoder_layer(
    tape: &mut Tape,
    layer: &EncLayerIds<NodeId>,
    x: NodeId,
    spans: &[AttnSpan],
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let x = attn_block(
        tape, &layer.ln1, &layer.attn, x, None, spans, cfg.heads, false, cfg.ln_eps, dropout,
    )?;
    ffn_block(tape, &layer.ln2, &layer.ffn, x, cfg.ln_eps, dropout)
}

/// Encodes packed token ids to hidden states (`total_rows x d`), final layer
/// norm applied.
pub fn encoder_forward(
    tape: &mut Tape,
    model: &ModelIds<NodeId>,
    cfg: &ModelConfig,
    ids: &[u32],
    segs: &Segs,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let spans = self_spans(segs);
    let mut x = embed_sequence(tape, model.embed, ids, segs, cfg, dropout)?;
    for layer in &model.enc {
        x = encoder_layer(tape, layer, x, &spans, cfg, dropout)?;
    }
    tape.layer_norm(x, model.enc_final_ln.g, model.enc_final_ln.b, cfg.ln_eps)
}

fn decoder_layer(
    tape: &mut Tape,
    layer: &DecLayerIds<NodeId>,
    x: NodeId,
    self_spans: &[AttnSpan],
    mem: NodeId,
    mem_spans: &[AttnSpan],
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let x = attn_block(
        tape, &layer.ln1, &layer.self_attn, x, None, self_spans, cfg.heads, true, cfg.ln_eps,
        dropout,
    )?;
    let k = linear(tape, mem, layer.cross_attn.wk, layer.cross_attn.bk)?;
    let v = linear(tape, mem, layer.cross_attn.wv, layer.cross_attn.bv)?;
    let x = attn_block(
        tape,
        &layer.ln2,
        &layer.cross_attn,
        x,
        Some((k, v)),
        mem_spans,
        cfg.heads,
        false,
        cfg.ln_eps,
        dropout,
    )?;
    ffn_block(tape, &layer.ln3, &layer.ffn, x, cfg.ln_eps, dropout)
}

/// Teacher-forced decoder: shifted target ids in, next-token logits out
/// (`total_tgt_rows x vocab`), output projection tied to the embedding.
pub fn decoder_forward(
    tape: &mut Tape,
    model: &ModelIds<NodeId>,
    cfg: &ModelConfig,
    tgt_ids: &[u32],
    tgt_segs: &Segs,
    mem: NodeId,
    mem_segs: &Segs,
    dropout: &mut Dropout,
) -> Result<NodeId> {
    let self_sp = self_spans(tgt_segs);
    let mem_sp = cross_spans(tgt_segs, mem_segs)?;
    let mut x = embed_sequence(tape, model.embed, tgt_ids, tgt_segs, cfg, dropout)?;
    for layer in &model.dec {
        x = decoder_layer(tape, layer, x, &self_sp, mem, &mem_sp, cfg, dropout)?;
    }
    let x = tape.layer_norm(x, model.dec_final_ln.g, model.dec_final_ln.b, cfg.ln_eps)?;
    tape.matmul_transposed(x, model.embed)
}
