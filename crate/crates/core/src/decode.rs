//! Inference: beam search over an incrementally evaluated decoder.
//!
//! Encoding (and the bridge) run once per sentence on a tape in evaluation
//! mode. Decoding then proceeds token by token with per-layer key/value
//! caches, so each step costs one new row instead of re-running the whole
//! prefix. The incremental arithmetic mirrors the training forward pass and
//! is pinned to it by tests (same logits to within 1e-9).
//!
//! Beam bookkeeping is fully deterministic: expansions are ordered by score,
//! then by token id; the final hypothesis is chosen by length-normalized
//! score with a lexicographic tie-break.

use crate::bridge::{bridge_forward, length_logits, predicted_lengths, slot_count};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{bind, index_layout, LnIds, Mode, ModelConfig, ModelIds, ParamStore};
use crate::nn::{encoder_forward, positional_encoding, Dropout};
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Exponent on the hypothesis length when normalizing scores.
    pub length_norm: f64,
    /// Cap on generated tokens (defaults to the position table size minus
    /// the language tag).
    pub max_len: Option<usize>,
    /// Centric-side token count to use for the slot count (variable mode)
    /// instead of the model's own prediction.
    pub gold_centric_len: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { beam: 5, length_norm: 1.0, max_len: None, gold_centric_len: None }
    }
}

#[derive(Debug, Clone)]
pub struct Translation {
    /// Output tokens without the closing end marker.
    pub tokens: Vec<u32>,
    /// Length-normalized log-probability of the chosen hypothesis.
    pub score: f64,
    /// True when the hypothesis hit the length cap instead of closing.
    pub truncated: bool,
    /// Interlingua slots used (bridge modes only).
    pub slots: Option<usize>,
    /// What the length predictor said for this source (variable mode only,
    /// even when a gold length overrode it).
    pub predicted_centric_len: Option<usize>,
}

/// Inference-time view of a model: raw parameter blocks resolved by name.
pub struct Translator<'a> {
    store: &'a ParamStore,
    cfg: &'a ModelConfig,
    vocab: &'a Vocab,
    idx: ModelIds<usize>,
    pe: Vec<f64>,
}

struct Encoded {
    /// Decoder memory, `rows x d`.
    mem: Vec<f64>,
    rows: usize,
    slots: Option<usize>,
    predicted_centric_len: Option<usize>,
}

impl<'a> Translator<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a ModelConfig, vocab: &'a Vocab) -> Result<Self> {
        if cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model expects {} tokens, vocabulary has {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        let idx = index_layout(store, cfg)?;
        let pe = positional_encoding(cfg.max_positions, cfg.d_model);
        Ok(Translator { store, cfg, vocab, idx, pe })
    }

    fn block(&self, i: usize) -> &[f64] {
        &self.store.blocks[i].values
    }

    /// Runs encoder (and bridge) for one source sentence on a throwaway tape.
    fn encode(&self, src: &[u32], src_lang: &str, opts: &DecodeOptions) -> Result<Encoded> {
        let mut ids = Vec::with_capacity(src.len() + 1);
        ids.push(self.vocab.tag(src_lang)?);
        ids.extend_from_slice(src);
        let segs = [(0usize, ids.len())];

        let mut tape = Tape::new();
        let bound = bind(self.store, self.cfg, &mut tape)?;
        let h_s =
            encoder_forward(&mut tape, &bound.ids, self.cfg, &ids, &segs, &mut Dropout::off())?;

        if !self.cfg.mode.uses_bridge() {
            return Ok(Encoded {
                mem: tape.values(h_s).to_vec(),
                rows: ids.len(),
                slots: None,
                predicted_centric_len: None,
            });
        }

        let bridge = bound
            .ids
            .bridge
            .as_ref()
            .ok_or_else(|| Error::Config("bridge mode without bridge parameters".into()))?;

        // Variable mode reads the slot count off the sentence itself when the
        // source is centric; otherwise it asks the length predictor (unless a
        // gold length is supplied).
        let mut predicted = None;
        let n_slots = match self.cfg.mode {
            Mode::Variable => {
                if self.cfg.mode.has_length_predictor() && src_lang != self.cfg.centric {
                    let lp = length_logits(&mut tape, bridge, h_s, &segs)?;
                    let row = tape.values(lp);
                    predicted = Some(predicted_lengths(row, 1, self.cfg.len_classes)[0]);
                }
                let centric_len = if src_lang == self.cfg.centric {
                    src.len()
                } else if let Some(gold) = opts.gold_centric_len {
                    gold
                } else {
                    // A prediction beyond the slot table is clamped to it.
                    predicted.unwrap().min(self.cfg.max_slots)
                };
                slot_count(self.cfg, centric_len)?
            }
            _ => slot_count(self.cfg, 0)?,
        };

        let (h_i, slot_segs) = bridge_forward(
            &mut tape,
            bridge,
            self.cfg,
            h_s,
            &segs,
            &[src_lang],
            &[n_slots],
            &mut Dropout::off(),
        )?;
        debug_assert_eq!(slot_segs, vec![(0, n_slots)]);
        Ok(Encoded {
            mem: tape.values(h_i).to_vec(),
            rows: n_slots,
            slots: Some(n_slots),
            predicted_centric_len: predicted,
        })
    }

    /// The length predictor's estimate of a sentence's centric token count.
    pub fn predict_centric_len(&self, src: &[u32], src_lang: &str) -> Result<usize> {
        let mut ids = Vec::with_capacity(src.len() + 1);
        ids.push(self.vocab.tag(src_lang)?);
        ids.extend_from_slice(src);
        let segs = [(0usize, ids.len())];
        let mut tape = Tape::new();
        let bound = bind(self.store, self.cfg, &mut tape)?;
        let h_s =
            encoder_forward(&mut tape, &bound.ids, self.cfg, &ids, &segs, &mut Dropout::off())?;
        let bridge = bound
            .ids
            .bridge
            .as_ref()
            .ok_or_else(|| Error::Config("this mode has no length predictor".into()))?;
        let lp = length_logits(&mut tape, bridge, h_s, &segs)?;
        Ok(predicted_lengths(tape.values(lp), 1, self.cfg.len_classes)[0])
    }

    pub fn translate(
        &self,
        src: &[u32],
        src_lang: &str,
        tgt_lang: &str,
        opts: &DecodeOptions,
    ) -> Result<Translation> {
        if src.is_empty() {
            return Err(Error::Data("cannot translate an empty sentence".into()));
        }
        let enc = self.encode(src, src_lang, opts)?;
        let tag = self.vocab.tag(tgt_lang)?;
        let (tokens, score, truncated) = self.beam_search(&enc.mem, enc.rows, tag, opts)?;
        Ok(Translation {
            tokens,
            score,
            truncated,
            slots: enc.slots,
            predicted_centric_len: enc.predicted_centric_len,
        })
    }

    /// Two-hop translation through an intermediate language. When either end
    /// of the route already is the intermediate language, the corresponding
    /// hop is skipped and this reduces to direct decoding.
    pub fn translate_pivot(
        &self,
        src: &[u32],
        src_lang: &str,
        via: &str,
        tgt_lang: &str,
        opts: &DecodeOptions,
    ) -> Result<Translation> {
        if src_lang == via || tgt_lang == via {
            return self.translate(src, src_lang, tgt_lang, opts);
        }
        // The intermediate sentence is re-encoded, and a centric source's own
        // length becomes its slot count, so cap the first leg at the slot
        // table; without this a runaway first hop could not be consumed.
        let mut first_opts = opts.clone();
        if self.cfg.mode == Mode::Variable && via == self.cfg.centric {
            let cap = first_opts.max_len.unwrap_or(usize::MAX).min(self.cfg.max_slots);
            first_opts.max_len = Some(cap);
        }
        let first = self.translate(src, src_lang, via, &first_opts)?;
        if first.tokens.is_empty() {
            return Err(Error::Data("pivot leg produced an empty sentence".into()));
        }
        // The second leg starts from fresh text; a gold length for the
        // original source does not apply to it.
        let second_opts = DecodeOptions { gold_centric_len: None, ..opts.clone() };
        let mut second = self.translate(&first.tokens, via, tgt_lang, &second_opts)?;
        second.truncated |= first.truncated;
        Ok(second)
    }

    // ---- incremental decoder ----------------------------------------

    fn beam_search(
        &self,
        mem: &[f64],
        mem_rows: usize,
        tgt_tag: u32,
        opts: &DecodeOptions,
    ) -> Result<(Vec<u32>, f64, bool)> {
        if opts.beam == 0 {
            return Err(Error::Config("beam width must be positive".into()));
        }
        let cap = opts.max_len.unwrap_or(self.cfg.max_positions - 1);
        if cap == 0 {
            return Err(Error::Config("length cap leaves no room to generate".into()));
        }

        // Per-layer cross-attention keys/values, projected once.
        let cross: Vec<(Vec<f64>, Vec<f64>)> = self
            .idx
            .dec
            .iter()
            .map(|layer| {
                let a = &layer.cross_attn;
                let k = self.matrix_linear(mem, mem_rows, self.block(a.wk), self.block(a.bk));
                let v = self.matrix_linear(mem, mem_rows, self.block(a.wv), self.block(a.bv));
                (k, v)
            })
            .collect();

        let mut live = vec![Hypothesis::empty(self.idx.dec.len())];
        let mut finished: Vec<FinishedHypothesis> = Vec::new();

        for pos in 0..cap {
            // Expand every live hypothesis by one position.
            let mut expansions: Vec<(f64, u32, usize)> = Vec::new();
            let mut stepped: Vec<Hypothesis> = Vec::new();
            for hyp in live.drain(..) {
                let feed = if pos == 0 { tgt_tag } else { *hyp.tokens.last().unwrap() };
                let mut hyp = hyp;
                let logits = self.step(&mut hyp, feed, pos, &cross, mem_rows)?;
                let logp = log_softmax(&logits)?;
                let i = stepped.len();
                for (tok, lp) in logp.iter().enumerate().skip(1) {
                    expansions.push((hyp.sum_logp + lp, tok as u32, i));
                }
                stepped.push(hyp);
            }
            expansions.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2))
            });

            for &(sum, tok, i) in expansions.iter().take(opts.beam) {
                let parent = &stepped[i];
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                if tok == crate::corpus::EOS {
                    finished.push(FinishedHypothesis { tokens, sum_logp: sum, truncated: false });
                } else {
                    live.push(Hypothesis {
                        tokens,
                        sum_logp: sum,
                        caches: parent.caches.clone(),
                    });
                }
            }

            if live.is_empty() || finished.len() >= opts.beam {
                break;
            }
        }
        // Anything still alive ran into the cap.
        for hyp in live {
            finished.push(FinishedHypothesis {
                tokens: hyp.tokens,
                sum_logp: hyp.sum_logp,
                truncated: true,
            });
        }
        if finished.is_empty() {
            return Err(Error::Data("beam search produced no hypotheses".into()));
        }

        let normalized = |f: &FinishedHypothesis| {
            f.sum_logp / (f.tokens.len().max(1) as f64).powf(opts.length_norm)
        };
        let best = finished
            .iter()
            .max_by(|a, b| {
                normalized(a)
                    .partial_cmp(&normalized(b))
                    .unwrap()
                    .then_with(|| b.tokens.cmp(&a.tokens))
            })
            .unwrap();
        let mut tokens = best.tokens.clone();
        let score = normalized(best);
        if tokens.last() == Some(&crate::corpus::EOS) {
            tokens.pop();
        }
        Ok((tokens, score, best.truncated))
    }

    /// Advances one hypothesis by one token; returns the next-token logits.
    fn step(
        &self,
        hyp: &mut Hypothesis,
        token: u32,
        pos: usize,
        cross: &[(Vec<f64>, Vec<f64>)],
        mem_rows: usize,
    ) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let d = cfg.d_model;
        if pos + 1 > cfg.max_positions {
            return Err(Error::Data("hypothesis outgrew the position table".into()));
        }
        let embed = self.block(self.idx.embed);
        let row = token as usize;
        if row >= cfg.vocab_size {
            return Err(Error::Data(format!("token id {token} out of range")));
        }
        let scale = (d as f64).sqrt();
        let mut x: Vec<f64> = (0..d)
            .map(|j| embed[row * d + j] * scale + self.pe[pos * d + j])
            .collect();

        for (li, (layer, (ck, cv))) in self.idx.dec.iter().zip(cross).enumerate() {
            // Causal self-attention over the growing cache.
            let a = self.ln_row(&x, &layer.ln1);
            let q = self.row_linear(&a, self.block(layer.self_attn.wq), self.block(layer.self_attn.bq));
            let k = self.row_linear(&a, self.block(layer.self_attn.wk), self.block(layer.self_attn.bk));
            let v = self.row_linear(&a, self.block(layer.self_attn.wv), self.block(layer.self_attn.bv));
            let cache = &mut hyp.caches[li];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            let rows = cache.k.len() / d;
            let att = attend(&q, &cache.k, &cache.v, rows, cfg.heads, d);
            let o = self.row_linear(&att, self.block(layer.self_attn.wo), self.block(layer.self_attn.bo));
            add_into(&mut x, &o);

            // Cross-attention over the fixed memory.
            let a = self.ln_row(&x, &layer.ln2);
            let q = self.row_linear(&a, self.block(layer.cross_attn.wq), self.block(layer.cross_attn.bq));
            let att = attend(&q, ck, cv, mem_rows, cfg.heads, d);
            let o = self.row_linear(&att, self.block(layer.cross_attn.wo), self.block(layer.cross_attn.bo));
            add_into(&mut x, &o);

            // Feed-forward.
            let a = self.ln_row(&x, &layer.ln3);
            let mut h = self.row_linear(&a, self.block(layer.ffn.w1), self.block(layer.ffn.b1));
            for v in &mut h {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let o = self.row_linear(&h, self.block(layer.ffn.w2), self.block(layer.ffn.b2));
            add_into(&mut x, &o);
        }

        let x = self.ln_row(&x, &self.idx.dec_final_ln);
        // Tied output projection: logits = x · Eᵀ.
        let v_size = cfg.vocab_size;
        let mut logits = vec![0.0; v_size];
        for t in 0..v_size {
            let e = &embed[t * d..(t + 1) * d];
            logits[t] = x.iter().zip(e).map(|(a, b)| a * b).sum();
        }
        for l in &logits {
            if !l.is_finite() {
                return Err(Error::Numeric("non-finite logit while decoding".into()));
            }
        }
        Ok(logits)
    }

    fn ln_row(&self, x: &[f64], ln: &LnIds<usize>) -> Vec<f64> {
        let g = self.block(ln.g);
        let b = self.block(ln.b);
        let c = x.len();
        let mean = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + self.cfg.ln_eps).sqrt();
        (0..c).map(|j| (x[j] - mean) * rstd * g[j] + b[j]).collect()
    }

    /// `x (1 x in) · w (in x out) + b`.
    fn row_linear(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let out = b.len();
        let mut y = b.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * out..(i + 1) * out];
            for j in 0..out {
                y[j] += xi * wrow[j];
            }
        }
        y
    }

    /// Row-wise linear over a whole matrix (`rows x in`).
    fn matrix_linear(&self, x: &[f64], rows: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let in_dim = if rows == 0 { 0 } else { x.len() / rows };
        let mut out = Vec::with_capacity(rows * b.len());
        for r in 0..rows {
            out.extend(self.row_linear(&x[r * in_dim..(r + 1) * in_dim], w, b));
        }
        out
    }
}

#[derive(Clone)]
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    sum_logp: f64,
    caches: Vec<LayerCache>,
}

impl Hypothesis {
    fn empty(layers: usize) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            sum_logp: 0.0,
            caches: vec![LayerCache { k: Vec::new(), v: Vec::new() }; layers],
        }
    }
}

struct FinishedHypothesis {
    tokens: Vec<u32>,
    sum_logp: f64,
    truncated: bool,
}

/// Multi-head scaled dot-product attention for a single query row.
fn attend(q: &[f64], keys: &[f64], values: &[f64], rows: usize, heads: usize, d: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; rows];
    for h in 0..heads {
        let off = h * dh;
        let mut max = f64::NEG_INFINITY;
        for (r, s) in scores.iter_mut().enumerate() {
            let k = &keys[r * d + off..r * d + off + dh];
            *s = q[off..off + dh].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for (r, s) in scores.iter().enumerate() {
            let p = s / z;
            let v = &values[r * d + off..r * d + off + dh];
            for (o, vv) in out[off..off + dh].iter_mut().zip(v) {
                *o += p * vv;
            }
        }
    }
    out
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::Numeric("degenerate distribution while decoding".into()));
    }
    let log_z = max + z.ln();
    Ok(logits.iter().map(|l| l - log_z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::data::Batch;
    use crate::data::SentencePair;
    use crate::model::ParamStore;
    use crate::nn::decoder_forward;

    fn tiny_vocab() -> Vocab {
        let toks = ["<pad>", "<eos>", "<en>", "<xa>", "red", "blue", "cat", "dog"];
        Vocab::from_tokens(toks.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn tiny_cfg(mode: Mode, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            mode,
            d_model: 8,
            heads: 2,
            ffn_hidden: 12,
            enc_layers: 1,
            bridge_layers: if mode == Mode::Mnmt { 0 } else { 2 },
            dec_layers: 2,
            vocab_size: vocab.len(),
            langs: vec!["en".into(), "xa".into()],
            max_slots: 6,
            fixed_len: 3,
            len_classes: 6,
            max_positions: 16,
            ..ModelConfig::default()
        }
    }

    /// Teacher-forced logits from the training-path decoder for a prefix.
    fn tape_logits(
        store: &ParamStore,
        cfg: &ModelConfig,
        vocab: &Vocab,
        src: &[u32],
        src_lang: &str,
        prefix: &[u32],
        tgt_lang: &str,
        slots_override: Option<usize>,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = bind(store, cfg, &mut tape).unwrap();
        let mut ids = vec![vocab.tag(src_lang).unwrap()];
        ids.extend_from_slice(src);
        let segs = [(0, ids.len())];
        let h = encoder_forward(&mut tape, &bound.ids, cfg, &ids, &segs, &mut Dropout::off())
            .unwrap();
        let (mem, mem_segs) = if cfg.mode.uses_bridge() {
            let n = slots_override.unwrap_or(cfg.fixed_len);
            let (m, s) = bridge_forward(
                &mut tape,
                bound.ids.bridge.as_ref().unwrap(),
                cfg,
                h,
                &segs,
                &[src_lang],
                &[n],
                &mut Dropout::off(),
            )
            .unwrap();
            (m, s)
        } else {
            (h, segs.to_vec())
        };
        let mut dec_in = vec![vocab.tag(tgt_lang).unwrap()];
        dec_in.extend_from_slice(prefix);
        let dsegs = [(0, dec_in.len())];
        let logits = decoder_forward(
            &mut tape,
            &bound.ids,
            cfg,
            &dec_in,
            &dsegs,
            mem,
            &mem_segs,
            &mut Dropout::off(),
        )
        .unwrap();
        let v = cfg.vocab_size;
        let all = tape.values(logits);
        all[(dec_in.len() - 1) * v..dec_in.len() * v].to_vec()
    }

    #[test]
    fn incremental_logits_match_the_training_decoder() {
        let vocab = tiny_vocab();
        for mode in [Mode::Mnmt, Mode::Variable] {
            let cfg = tiny_cfg(mode, &vocab);
            let store = ParamStore::init(&cfg, 21).unwrap();
            let tr = Translator::new(&store, &cfg, &vocab).unwrap();
            let src = [4u32, 6, 5];
            let slots = match mode {
                Mode::Variable => Some(3),
                _ => None,
            };
            let enc = tr
                .encode(&src, "en", &DecodeOptions { gold_centric_len: None, ..Default::default() })
                .unwrap();

            // Feed a fixed prefix token by token and compare each step's
            // logits to the teacher-forced decoder on the same prefix.
            let prefix = [7u32, 4, 6, 5];
            let cross: Vec<(Vec<f64>, Vec<f64>)> = tr
                .idx
                .dec
                .iter()
                .map(|layer| {
                    let a = &layer.cross_attn;
                    let k = tr.matrix_linear(&enc.mem, enc.rows, tr.block(a.wk), tr.block(a.bk));
                    let v = tr.matrix_linear(&enc.mem, enc.rows, tr.block(a.wv), tr.block(a.bv));
                    (k, v)
                })
                .collect();
            let mut hyp = Hypothesis::empty(cfg.dec_layers);
            for pos in 0..=prefix.len() {
                let feed = if pos == 0 { vocab.tag("xa").unwrap() } else { prefix[pos - 1] };
                let inc = tr.step(&mut hyp, feed, pos, &cross, enc.rows).unwrap();
                if pos > 0 {
                    hyp.tokens.push(prefix[pos - 1]);
                }
                let full = tape_logits(
                    &store,
                    &cfg,
                    &vocab,
                    &src,
                    "en",
                    &prefix[..pos],
                    "xa",
                    slots,
                );
                for (a, b) in inc.iter().zip(&full) {
                    assert!((a - b).abs() <= 1e-9, "{mode:?} pos {pos}: {a} vs {b}");
                }
            }
        }
    }

    /// Scores one candidate sequence with the training-path decoder.
    fn brute_score(
        store: &ParamStore,
        cfg: &ModelConfig,
        vocab: &Vocab,
        src: &[u32],
        seq: &[u32],
        alpha: f64,
    ) -> f64 {
        let mut sum = 0.0;
        for i in 0..seq.len() {
            let logits = tape_logits(store, cfg, vocab, src, "en", &seq[..i], "xa", None);
            let lp = log_softmax(&logits).unwrap();
            sum += lp[seq[i] as usize];
        }
        sum / (seq.len() as f64).powf(alpha)
    }

    #[test]
    fn a_wide_beam_agrees_with_exhaustive_enumeration() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Mnmt, &vocab);
        let store = ParamStore::init(&cfg, 33).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();
        let src = [5u32, 7];
        let cap = 3;

        // Every sequence the decoder could finish within the cap: shorter
        // ones end in the stop token, cap-length ones may be truncated.
        let inner: Vec<u32> = (2..vocab.len() as u32).collect(); // every non-structural continuation
        let mut candidates: Vec<Vec<u32>> = vec![vec![EOS]];
        let mut frontier: Vec<Vec<u32>> = inner.iter().map(|&t| vec![t]).collect();
        for _ in 1..cap {
            let mut next = Vec::new();
            for f in &frontier {
                let mut closed = f.clone();
                closed.push(EOS);
                candidates.push(closed);
                for &t in &inner {
                    let mut g = f.clone();
                    g.push(t);
                    next.push(g);
                }
            }
            frontier = next;
        }
        candidates.extend(frontier); // truncated at the cap

        for alpha in [1.0, 0.0] {
            let best_brute = candidates
                .iter()
                .map(|s| (brute_score(&store, &cfg, &vocab, &src, s, alpha), s.clone()))
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| b.1.cmp(&a.1)))
                .unwrap();

            let opts = DecodeOptions {
                beam: 1000, // wider than the whole search space: no pruning
                length_norm: alpha,
                max_len: Some(cap),
                gold_centric_len: None,
            };
            let got = tr.translate(&src, "en", "xa", &opts).unwrap();
            let mut best_tokens = best_brute.1.clone();
            if best_tokens.last() == Some(&EOS) {
                best_tokens.pop();
            }
            assert_eq!(got.tokens, best_tokens, "alpha {alpha}");
            assert!((got.score - best_brute.0).abs() < 1e-9, "alpha {alpha}");
        }
    }

    #[test]
    fn variable_mode_slot_choice_prefers_sentence_then_gold_then_prediction() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Variable, &vocab);
        let store = ParamStore::init(&cfg, 5).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();

        // Centric source: slots = its own token count, no prediction used.
        let out = tr.translate(&[4, 5, 6, 7], "en", "xa", &DecodeOptions::default()).unwrap();
        assert_eq!(out.slots, Some(4));
        assert_eq!(out.predicted_centric_len, None);

        // Non-centric source with a gold length: slots = gold, but the
        // predictor's opinion is still reported.
        let opts = DecodeOptions { gold_centric_len: Some(5), ..Default::default() };
        let out = tr.translate(&[4, 5, 6], "xa", "en", &opts).unwrap();
        assert_eq!(out.slots, Some(5));
        let predicted = out.predicted_centric_len.unwrap();
        assert!((1..=cfg.len_classes).contains(&predicted));

        // Non-centric source without gold: slots follow the prediction.
        let out = tr.translate(&[4, 5, 6], "xa", "en", &DecodeOptions::default()).unwrap();
        assert_eq!(out.slots, Some(predicted.min(cfg.max_slots)));
        assert_eq!(out.predicted_centric_len, Some(predicted));
    }

    #[test]
    fn fixed_modes_always_use_the_configured_slot_count() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::FixedUniversal, &vocab);
        let store = ParamStore::init(&cfg, 5).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();
        let out = tr.translate(&[4, 5, 6, 7], "en", "xa", &DecodeOptions::default()).unwrap();
        assert_eq!(out.slots, Some(cfg.fixed_len));
        assert_eq!(out.predicted_centric_len, None);
    }

    #[test]
    fn degenerate_pivot_routes_reduce_to_direct_decoding() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Variable, &vocab);
        let store = ParamStore::init(&cfg, 8).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();
        let opts = DecodeOptions { max_len: Some(6), ..Default::default() };

        // Target is the intermediate language: one hop, same as direct.
        let direct = tr.translate(&[4, 5, 6], "xa", "en", &opts).unwrap();
        let via = tr.translate_pivot(&[4, 5, 6], "xa", "en", "en", &opts).unwrap();
        assert_eq!(via.tokens, direct.tokens);
        assert_eq!(via.score.to_bits(), direct.score.to_bits());

        // Source already is the intermediate language: first hop skipped.
        let direct = tr.translate(&[4, 5], "en", "xa", &opts).unwrap();
        let via = tr.translate_pivot(&[4, 5], "en", "en", "xa", &opts).unwrap();
        assert_eq!(via.tokens, direct.tokens);
    }

    #[test]
    fn a_full_pivot_route_runs_both_legs() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Variable, &vocab);
        let store = ParamStore::init(&cfg, 8).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();
        let opts = DecodeOptions { max_len: Some(6), ..Default::default() };
        let out = tr.translate_pivot(&[4, 5, 6], "xa", "en", "xa", &opts).unwrap();
        // With random weights the output is arbitrary but must be well formed.
        assert!(out.tokens.iter().all(|t| (*t as usize) < vocab.len()));
    }

    #[test]
    fn a_runaway_first_hop_is_capped_so_the_second_hop_can_consume_it() {
        // Random weights tend to decode to the length cap; an uncapped
        // centric intermediate would then exceed the slot table. The pivot
        // must clamp the first leg instead of failing.
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Variable, &vocab);
        let store = ParamStore::init(&cfg, 8).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();
        let opts = DecodeOptions { max_len: None, ..Default::default() };
        let out = tr.translate_pivot(&[4, 5, 6], "xa", "en", "xa", &opts).unwrap();
        assert!(out.tokens.iter().all(|t| (*t as usize) < vocab.len()));
    }

    #[test]
    fn beam_one_is_stepwise_argmax() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Mnmt, &vocab);
        let store = ParamStore::init(&cfg, 41).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();
        let src = [4u32, 7, 5];
        let opts = DecodeOptions { beam: 1, max_len: Some(8), ..Default::default() };
        let got = tr.translate(&src, "en", "xa", &opts).unwrap();

        // Greedy reference: pick the argmax token (smallest id on ties) at
        // every step using the teacher-forced decoder.
        let mut seq: Vec<u32> = Vec::new();
        for _ in 0..8 {
            let logits = tape_logits(&store, &cfg, &vocab, &src, "en", &seq, "xa", None);
            let mut best = 1usize; // ids above <pad> only
            for (t, l) in logits.iter().enumerate().skip(1) {
                if *l > logits[best] {
                    best = t;
                }
            }
            if best as u32 == EOS {
                break;
            }
            seq.push(best as u32);
        }
        assert_eq!(got.tokens, seq);
    }

    #[test]
    fn a_wider_beam_never_scores_worse_here() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Mnmt, &vocab);
        for seed in [3, 9, 27] {
            let store = ParamStore::init(&cfg, seed).unwrap();
            let tr = Translator::new(&store, &cfg, &vocab).unwrap();
            let src = [6u32, 4];
            let narrow = tr
                .translate(&src, "en", "xa", &DecodeOptions { beam: 1, ..Default::default() })
                .unwrap();
            let wide = tr
                .translate(&src, "en", "xa", &DecodeOptions { beam: 5, ..Default::default() })
                .unwrap();
            assert!(
                wide.score >= narrow.score - 1e-12,
                "seed {seed}: beam-5 {} vs beam-1 {}",
                wide.score,
                narrow.score
            );
        }
    }

    #[test]
    fn beam_results_are_deterministic() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Variable, &vocab);
        let store = ParamStore::init(&cfg, 13).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();
        let a = tr.translate(&[4, 6, 5, 7], "en", "xa", &DecodeOptions::default()).unwrap();
        let b = tr.translate(&[4, 6, 5, 7], "en", "xa", &DecodeOptions::default()).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.score.to_bits(), b.score.to_bits());
    }

    #[test]
    fn inference_memory_matches_the_training_side_bridge_output() {
        // The translator encodes one sentence at a time; its memory must be
        // bitwise what the training path computes for the same sentence.
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(Mode::Variable, &vocab);
        let store = ParamStore::init(&cfg, 17).unwrap();
        let tr = Translator::new(&store, &cfg, &vocab).unwrap();
        let p = SentencePair {
            src_lang: "en".into(),
            tgt_lang: "xa".into(),
            src: vec![4, 5, 6],
            tgt: vec![7, 6],
            centric_len: 3,
        };
        let single = Batch::new(vec![p.clone()], &vocab).unwrap();
        let (ids, segs) = single.packed_src();
        let mut tape = Tape::new();
        let bound = bind(&store, &cfg, &mut tape).unwrap();
        let h = encoder_forward(&mut tape, &bound.ids, &cfg, &ids, &segs, &mut Dropout::off())
            .unwrap();
        let (hi, _) = bridge_forward(
            &mut tape,
            bound.ids.bridge.as_ref().unwrap(),
            &cfg,
            h,
            &segs,
            &["en"],
            &[3],
            &mut Dropout::off(),
        )
        .unwrap();
        let expect = tape.values(hi);
        let enc = tr.encode(&p.src, "en", &DecodeOptions::default()).unwrap();
        assert_eq!(enc.mem.len(), expect.len());
        for (a, b) in enc.mem.iter().zip(expect) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
