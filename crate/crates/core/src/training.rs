//! The combined training objective and the optimization loop.
//!
//! Every system trains on the translation cross-entropy; bridge systems add
//! an interlingua alignment term (one minus the mean slot-wise cosine between
//! the source-side and target-side interlingua states of the same sentence
//! pair), and the variable-length system adds a length-classification term.
//! The three parts combine as a weighted sum, and the reported breakdown
//! recombines to the reported total exactly — bit for bit — because both are
//! computed with the same floating-point operations in the same order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::{bridge_forward, length_class, length_logits, slot_count};
use crate::data::{make_batches, Batch, SentencePair, Vocab};
use crate::error::{Error, Result};
use crate::model::{bind, LossWeights, ModelConfig, ModelIds, ParamStore};
use crate::nn::{decoder_forward, encoder_forward, Dropout};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{NodeId, Tape};

use serde::{Deserialize, Serialize};

/// Scalar values of the loss terms for one batch (or an average of batches).
/// Terms that a mode does not use are reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_nmt: f64,
    pub l_ia: f64,
    pub l_lp: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the parts with the given weights, in the same
    /// floating-point order the forward pass uses. For any breakdown
    /// produced by [`combined_loss`], this equals `total` exactly.
    pub fn recombined(&self, w: &LossWeights) -> f64 {
        w.nmt * self.l_nmt + w.align * self.l_ia + w.length * self.l_lp
    }
}

/// Builds the full training loss for one batch on `tape`, returning the loss
/// node (for `backward`) and the scalar breakdown.
pub fn combined_loss(
    tape: &mut Tape,
    model: &ModelIds<NodeId>,
    cfg: &ModelConfig,
    batch: &Batch,
    dropout: &mut Dropout,
) -> Result<(NodeId, LossBreakdown)> {
    let w = &cfg.loss_weights;
    let (src_ids, src_segs) = batch.packed_src();
    let h_s = encoder_forward(tape, model, cfg, &src_ids, &src_segs, dropout)?;

    // Source-side interlingua (bridge modes) or raw encoder states (baseline)
    // become the decoder's memory.
    let mut h_i_src = None;
    let mut src_slots = Vec::new();
    let (mem, mem_segs) = if cfg.mode.uses_bridge() {
        let bridge = model
            .bridge
            .as_ref()
            .ok_or_else(|| Error::Config("bridge mode without bridge parameters".into()))?;
        let langs: Vec<&str> = batch.pairs.iter().map(|p| p.src_lang.as_str()).collect();
        src_slots = batch
            .pairs
            .iter()
            .map(|p| slot_count(cfg, p.src_centric_len(&cfg.centric)))
            .collect::<Result<Vec<usize>>>()?;
        let (h_i, slot_segs) =
            bridge_forward(tape, bridge, cfg, h_s, &src_segs, &langs, &src_slots, dropout)?;
        h_i_src = Some(h_i);
        (h_i, slot_segs)
    } else {
        (h_s, src_segs.clone())
    };

    let dec = batch.packed_dec();
    let logits = decoder_forward(tape, model, cfg, &dec.input, &dec.segs, mem, &mem_segs, dropout)?;
    let mask = vec![true; dec.output.len()];
    let l_nmt = tape.cross_entropy(logits, &dec.output, &mask, cfg.label_smoothing)?;

    let mut breakdown = LossBreakdown { l_nmt: tape.scalar(l_nmt)?, ..Default::default() };
    let mut total = tape.scale(l_nmt, w.nmt)?;

    if let (Some(h_i_src), true) = (h_i_src, cfg.align_loss) {
        let bridge = model.bridge.as_ref().unwrap();
        // The target side runs through the same encoder and bridge as if it
        // were a source sentence; the decoder input rows are exactly that
        // (its language tag followed by its tokens).
        let tgt_langs: Vec<&str> = batch.pairs.iter().map(|p| p.tgt_lang.as_str()).collect();
        let tgt_slots: Vec<usize> = batch
            .pairs
            .iter()
            .map(|p| slot_count(cfg, p.tgt_centric_len(&cfg.centric)))
            .collect::<Result<_>>()?;
        if tgt_slots != src_slots {
            return Err(Error::Data(
                "a pair maps to different interlingua lengths on its two sides".into(),
            ));
        }
        let h_s_tgt = encoder_forward(tape, model, cfg, &dec.input, &dec.segs, dropout)?;
        let (h_i_tgt, _) =
            bridge_forward(tape, bridge, cfg, h_s_tgt, &dec.segs, &tgt_langs, &tgt_slots, dropout)?;
        let l_ia = tape.cosine_alignment_loss(h_i_src, h_i_tgt)?;
        breakdown.l_ia = tape.scalar(l_ia)?;
        let scaled = tape.scale(l_ia, w.align)?;
        total = tape.add(total, scaled)?;
    }

    if cfg.mode.has_length_predictor() {
        let bridge = model
            .bridge
            .as_ref()
            .ok_or_else(|| Error::Config("length predictor without a bridge".into()))?;
        let lp_logits = length_logits(tape, bridge, h_s, &src_segs)?;
        let targets: Vec<u32> = batch
            .pairs
            .iter()
            .map(|p| length_class(p.src_centric_len(&cfg.centric), cfg.len_classes))
            .collect::<Result<_>>()?;
        let lp_mask: Vec<bool> = batch
            .pairs
            .iter()
            .map(|p| cfg.lp_on_centric || p.src_lang != cfg.centric)
            .collect();
        if lp_mask.iter().any(|&m| m) {
            let l_lp = tape.cross_entropy(lp_logits, &targets, &lp_mask, 0.0)?;
            breakdown.l_lp = tape.scalar(l_lp)?;
            let scaled = tape.scale(l_lp, w.length)?;
            total = tape.add(total, scaled)?;
        }
    }

    breakdown.total = tape.scalar(total)?;
    Ok((total, breakdown))
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub losses: LossBreakdown,
    pub split: &'static str,
}

/// Writes metrics as CSV with full `f64` round-trip precision.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("step,epoch,l_nmt,l_ia,l_lp,total,split\n");
    for r in rows {
        let l = &r.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.epoch, l.l_nmt, l.l_ia, l.l_lp, l.total, r.split
        ));
    }
    std::fs::write(path, out).map_err(Error::from)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 32, seed: 1, adam: AdamConfig::default() }
    }
}

/// Owns the parameters and optimizer state and drives the training loop.
#[derive(Clone)]
pub struct Trainer {
    pub cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub store: ParamStore,
    pub adam: Adam,
    pub step: u64,
    pub epoch: u64,
    /// Dropout noise. Not part of checkpoints: training resumes with a
    /// fresh stream (inference is unaffected — dropout is off there).
    rng: ChaCha8Rng,
    /// Lowest-validation-loss state seen by `run`, for checkpoint selection.
    /// Tracked per training invocation, never persisted.
    best: Option<Box<BestState>>,
}

/// Full snapshot (parameters and optimizer moments) of the epoch with the
/// lowest validation translation loss, so the selected checkpoint is also a
/// consistent resume point.
#[derive(Clone)]
struct BestState {
    valid_l_nmt: f64,
    store: ParamStore,
    adam: Adam,
    step: u64,
    epoch: u64,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::init(&cfg, train_cfg.seed)?;
        let adam = Adam::new(train_cfg.adam.clone(), &store.block_sizes());
        Ok(Self::assemble(cfg, train_cfg, store, adam, 0, 0))
    }

    /// Reassembles a trainer from checkpointed parts.
    pub fn from_parts(
        cfg: ModelConfig,
        train_cfg: TrainConfig,
        store: ParamStore,
        adam: Adam,
        step: u64,
        epoch: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::assemble(cfg, train_cfg, store, adam, step, epoch))
    }

    fn assemble(
        cfg: ModelConfig,
        train_cfg: TrainConfig,
        store: ParamStore,
        adam: Adam,
        step: u64,
        epoch: u64,
    ) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0xD1B5_4A32_D192_ED03);
        Trainer { cfg, train_cfg, store, adam, step, epoch, rng, best: None }
    }

    /// The state evaluation should use: parameters and optimizer moments of
    /// the epoch with the lowest validation translation loss, falling back
    /// to the current state when nothing was validated.
    pub fn selected(&self) -> Trainer {
        match &self.best {
            Some(b) => Trainer {
                cfg: self.cfg.clone(),
                train_cfg: self.train_cfg.clone(),
                store: b.store.clone(),
                adam: b.adam.clone(),
                step: b.step,
                epoch: b.epoch,
                rng: self.rng.clone(),
                best: None,
            },
            None => self.clone(),
        }
    }

    /// Epoch and validation translation loss of the selected state, if any
    /// epoch was validated.
    pub fn selected_epoch(&self) -> Option<(u64, f64)> {
        self.best.as_ref().map(|b| (b.epoch, b.valid_l_nmt))
    }

    /// One forward/backward/update on a single batch.
    pub fn train_step(&mut self, tape: &mut Tape, batch: &Batch) -> Result<LossBreakdown> {
        tape.reset();
        let bound = bind(&self.store, &self.cfg, tape)?;
        let mut dropout = if self.cfg.dropout > 0.0 {
            Dropout::train(self.cfg.dropout, &mut self.rng)
        } else {
            Dropout::off()
        };
        let (total, breakdown) = combined_loss(tape, &bound.ids, &self.cfg, batch, &mut dropout)?;
        tape.backward(total)?;
        let grads: Vec<Vec<f64>> = bound
            .flat
            .iter()
            .zip(&self.store.blocks)
            .map(|(node, block)| {
                tape.grad(*node).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; block.values.len()])
            })
            .collect();
        let mut updates: Vec<(&mut [f64], &[f64])> = self
            .store
            .blocks
            .iter_mut()
            .zip(&grads)
            .map(|(b, g)| (b.values.as_mut_slice(), g.as_slice()))
            .collect();
        self.adam.step(&mut updates)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Teacher-forced loss over a whole set, averaged per sentence; the total
    /// is recombined from the averaged parts so the breakdown stays exact.
    pub fn evaluate_loss(&self, tape: &mut Tape, pairs: &[SentencePair], vocab: &Vocab) -> Result<LossBreakdown> {
        let batches =
            make_batches(pairs, vocab, &self.cfg.centric, self.train_cfg.batch_size, None)?;
        let mut sums = LossBreakdown::default();
        let mut n = 0.0;
        for batch in &batches {
            tape.reset();
            let bound = bind(&self.store, &self.cfg, tape)?;
            let (_, bk) = combined_loss(tape, &bound.ids, &self.cfg, batch, &mut Dropout::off())?;
            let count = batch.len() as f64;
            sums.l_nmt += bk.l_nmt * count;
            sums.l_ia += bk.l_ia * count;
            sums.l_lp += bk.l_lp * count;
            n += count;
        }
        if n == 0.0 {
            return Err(Error::Data("no sentences to evaluate".into()));
        }
        let mut mean = LossBreakdown {
            l_nmt: sums.l_nmt / n,
            l_ia: sums.l_ia / n,
            l_lp: sums.l_lp / n,
            total: 0.0,
        };
        mean.total = mean.recombined(&self.cfg.loss_weights);
        Ok(mean)
    }

    /// Runs `train_cfg.epochs` epochs: shuffled length-grouped batches, one
    /// metrics row per step, and one validation row after each epoch.
    pub fn run(
        &mut self,
        train_pairs: &[SentencePair],
        valid_pairs: &[SentencePair],
        vocab: &Vocab,
        rows: &mut Vec<MetricsRow>,
    ) -> Result<()> {
        let mut tape = Tape::new();
        for _ in 0..self.train_cfg.epochs {
            self.epoch += 1;
            // Derived per-epoch so a resumed run shuffles identically.
            let mut shuffle = ChaCha8Rng::seed_from_u64(
                self.train_cfg.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let batches = make_batches(
                train_pairs,
                vocab,
                &self.cfg.centric,
                self.train_cfg.batch_size,
                Some(&mut shuffle),
            )?;
            for batch in &batches {
                let losses = self.train_step(&mut tape, batch)?;
                rows.push(MetricsRow { step: self.step, epoch: self.epoch, losses, split: "train" });
            }
            if !valid_pairs.is_empty() {
                let losses = self.evaluate_loss(&mut tape, valid_pairs, vocab)?;
                rows.push(MetricsRow { step: self.step, epoch: self.epoch, losses, split: "valid" });
                // Strict less-than keeps the earliest epoch on exact ties.
                if self.best.as_ref().map_or(true, |b| losses.l_nmt < b.valid_l_nmt) {
                    self.best = Some(Box::new(BestState {
                        valid_l_nmt: losses.l_nmt,
                        store: self.store.clone(),
                        adam: self.adam.clone(),
                        step: self.step,
                        epoch: self.epoch,
                    }));
                }
            }
        }
        Ok(())
    }
}
