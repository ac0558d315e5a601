//! The slot bridge between encoder and decoder, plus the length predictor.
//!
//! The bridge re-encodes a sentence into a small set of slot vectors. Slot
//! states start from learned query rows (a per-language or shared table,
//! sliced to the sentence's slot count), then pass through bridge layers:
//! the first layer seeds slots with a feed-forward (no residual, since the
//! raw queries are not yet sentence states worth preserving), later layers
//! mix slots with self-attention; every layer refines slots by attending to
//! the encoder states through one shared cross-attention block and applies a
//! position-wise feed-forward.
//!
//! In `variable` mode the slot count of a sentence equals its token count in
//! the centric language — identical for every translation of the same
//! sentence — so translation equivalents get aligned slot sequences. The
//! length predictor estimates that count from encoder states for inputs whose
//! centric-side length is unknown at inference time.

use crate::error::{Error, Result};
use crate::model::{BridgeIds, Mode, ModelConfig};
use crate::nn::{cross_spans, ffn_block, linear, self_spans, Dropout, Segs};
use crate::tensor::{NodeId, Tape};

/// Slots allotted to a sentence whose centric-language form has
/// `centric_len` tokens.
pub fn slot_count(cfg: &ModelConfig, centric_len: usize) -> Result<usize> {
    match cfg.mode {
        Mode::Variable => {
            if centric_len == 0 {
                return Err(Error::Data("a sentence needs at least one slot".into()));
            }
            if centric_len > cfg.max_slots {
                return Err(Error::Data(format!(
                    "centric length {centric_len} exceeds the {}-slot table",
                    cfg.max_slots
                )));
            }
            Ok(centric_len)
        }
        Mode::FixedUniversal | Mode::FixedLanguageSpecific => Ok(cfg.fixed_len),
        Mode::Mnmt => Err(Error::Config("the plain encoder–decoder has no slot bridge".into())),
    }
}

/// Runs the bridge over packed encoder states.
///
/// `src_langs[s]` and `slots[s]` describe sentence `s` of `src_segs`. Returns
/// the packed slot states (`Σ slots x d`, final layer norm applied) and their
/// segment layout.
pub fn bridge_forward(
    tape: &mut Tape,
    bridge: &BridgeIds<NodeId>,
    cfg: &ModelConfig,
    h_s: NodeId,
    src_segs: &Segs,
    src_langs: &[&str],
    slots: &[usize],
    dropout: &mut Dropout,
) -> Result<(NodeId, Vec<(usize, usize)>)> {
    if src_langs.len() != src_segs.len() || slots.len() != src_segs.len() {
        return Err(Error::Shape(format!(
            "bridge: {} segments, {} languages, {} slot counts",
            src_segs.len(),
            src_langs.len(),
            slots.len()
        )));
    }

    // Seed slot states: the first `slots[s]` rows of the language's table.
    let mut parts = Vec::with_capacity(slots.len());
    let mut slot_segs = Vec::with_capacity(slots.len());
    let mut offset = 0;
    for (s, (&n, lang)) in slots.iter().zip(src_langs).enumerate() {
        if n == 0 {
            return Err(Error::Data(format!("sentence {s}: zero slots")));
        }
        let table = bridge.query_table(lang)?;
        let (rows, _) = tape.dims(table);
        if n > rows {
            return Err(Error::Data(format!(
                "sentence {s}: {n} slots exceed the {rows}-row query table"
            )));
        }
        parts.push(tape.slice_rows(table, 0, n)?);
        slot_segs.push((offset, n));
        offset += n;
    }
    let mut x = tape.concat_rows(&parts)?;

    // Shared cross-attention memory, projected once for all layers.
    let k_mem = linear(tape, h_s, bridge.cross.wk, bridge.cross.bk)?;
    let v_mem = linear(tape, h_s, bridge.cross.wv, bridge.cross.bv)?;
    let mem_spans = cross_spans(&slot_segs, src_segs)?;
    let slot_spans = self_spans(&slot_segs);

    for layer in &bridge.layers {
        // Slot mixing.
        x = match &layer.mixer {
            crate::model::SlotMixer::SeedFfn(ffn) => {
                // First layer: transform the raw queries outright (no residual).
                let a = tape.layer_norm(x, layer.ln_mix.g, layer.ln_mix.b, cfg.ln_eps)?;
                let h = linear(tape, a, ffn.w1, ffn.b1)?;
                let h = tape.relu(h)?;
                let h = linear(tape, h, ffn.w2, ffn.b2)?;
                dropout.apply(tape, h)?
            }
            crate::model::SlotMixer::SelfAttn(attn) => {
                let a = tape.layer_norm(x, layer.ln_mix.g, layer.ln_mix.b, cfg.ln_eps)?;
                let q = linear(tape, a, attn.wq, attn.bq)?;
                let k = linear(tape, a, attn.wk, attn.bk)?;
                let v = linear(tape, a, attn.wv, attn.bv)?;
                let att = tape.attention(q, k, v, &slot_spans, cfg.heads, false, None)?;
                let o = linear(tape, att, attn.wo, attn.bo)?;
                let o = dropout.apply(tape, o)?;
                tape.add(x, o)?
            }
        };

        // Attend the encoder states (weights shared across layers).
        let c = tape.layer_norm(x, layer.ln_cross.g, layer.ln_cross.b, cfg.ln_eps)?;
        let q = linear(tape, c, bridge.cross.wq, bridge.cross.bq)?;
        let att = tape.attention(q, k_mem, v_mem, &mem_spans, cfg.heads, false, None)?;
        let o = linear(tape, att, bridge.cross.wo, bridge.cross.bo)?;
        let o = dropout.apply(tape, o)?;
        x = tape.add(x, o)?;

        x = ffn_block(tape, &layer.ln_ffn, &layer.ffn, x, cfg.ln_eps, dropout)?;
    }

    let h_i = tape.layer_norm(x, bridge.final_ln.g, bridge.final_ln.b, cfg.ln_eps)?;
    Ok((h_i, slot_segs))
}

/// Length-class logits from encoder states: mean source state per sentence,
/// projected to `len_classes` columns.
pub fn length_logits(
    tape: &mut Tape,
    bridge: &BridgeIds<NodeId>,
    h_s: NodeId,
    src_segs: &Segs,
) -> Result<NodeId> {
    let (w, b) = bridge
        .len_pred
        .ok_or_else(|| Error::Config("this mode has no length predictor".into()))?;
    let mean = tape.segment_mean(h_s, src_segs)?;
    linear(tape, mean, w, b)
}

/// Argmax decode of length logits: class `i` means length `i + 1`; ties go to
/// the smaller class.
pub fn predicted_lengths(logits: &[f64], rows: usize, classes: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let row = &logits[r * classes..(r + 1) * classes];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best + 1
        })
        .collect()
}

/// Training target for the length predictor.
pub fn length_class(len: usize, classes: usize) -> Result<u32> {
    if len == 0 {
        return Err(Error::Data("length zero has no class".into()));
    }
    if len > classes {
        return Err(Error::Data(format!(
            "length {len} exceeds the predictor's {classes} classes"
        )));
    }
    Ok((len - 1) as u32)
}
