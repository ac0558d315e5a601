//! Model configuration, parameter storage, and the canonical parameter layout.
//!
//! Four system variants share one transformer skeleton:
//!
//! - `mnmt`: shared encoder (more layers) straight into the decoder;
//! - `fixed_universal`: encoder + bridge that re-encodes every sentence into
//!   a fixed number of slots from one shared query table;
//! - `fixed_language_specific`: as above with one query table per language;
//! - `variable`: per-language query tables, slot count tied to the sentence's
//!   centric-language token count, plus a length predictor for inference.
//!
//! The layout of every parameter block (names, shapes, order) is defined once
//! in [`walk_layout`]; initialization, counting, checkpointing, and binding
//! onto a [`Tape`] all walk the same order, so they can never drift apart.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mnmt,
    FixedUniversal,
    FixedLanguageSpecific,
    Variable,
}

impl Mode {
    /// Whether the model has the slot-bridge module between encoder and decoder.
    pub fn uses_bridge(self) -> bool {
        !matches!(self, Mode::Mnmt)
    }

    /// The length predictor exists only where slot counts vary per sentence.
    pub fn has_length_predictor(self) -> bool {
        matches!(self, Mode::Variable)
    }

    pub fn per_language_queries(self) -> bool {
        matches!(self, Mode::Variable | Mode::FixedLanguageSpecific)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mnmt => "mnmt",
            Mode::FixedUniversal => "fixed_universal",
            Mode::FixedLanguageSpecific => "fixed_language_specific",
            Mode::Variable => "variable",
        }
    }
}

/// Weights of the three loss terms: translation, bridge alignment, length
/// prediction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub nmt: f64,
    pub align: f64,
    pub length: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { nmt: 1.0, align: 1.0, length: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub enc_layers: usize,
    pub bridge_layers: usize,
    pub dec_layers: usize,
    /// Token vocabulary size; filled in from the corpus when 0.
    pub vocab_size: usize,
    pub langs: Vec<String>,
    /// The hub language whose token count defines slot counts.
    pub centric: String,
    /// Slot-table rows in `variable` mode (upper bound on slots per sentence).
    pub max_slots: usize,
    /// Slot count (and table rows) in the two fixed modes.
    pub fixed_len: usize,
    /// Length-predictor classes; class `i` means length `i + 1`.
    pub len_classes: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub ln_eps: f64,
    /// Train the bridge alignment term (bridge modes only).
    pub align_loss: bool,
    /// Include centric-source samples in length-predictor training.
    pub lp_on_centric: bool,
    pub loss_weights: LossWeights,
    /// Positional-encoding table rows (longest supported sequence).
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Variable,
            d_model: 64,
            heads: 4,
            ffn_hidden: 256,
            enc_layers: 3,
            bridge_layers: 3,
            dec_layers: 3,
            vocab_size: 0,
            langs: vec!["en".into(), "xa".into(), "xb".into(), "xc".into()],
            centric: "en".into(),
            max_slots: 16,
            fixed_len: 8,
            len_classes: 32,
            dropout: 0.0,
            // Zero by default so loss values stay directly comparable to
            // analytic cross-entropy oracles; smoothing is a config knob.
            label_smoothing: 0.0,
            ln_eps: 1e-6,
            align_loss: true,
            lp_on_centric: true,
            loss_weights: LossWeights::default(),
            max_positions: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide model width {}",
                self.heads, self.d_model
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size is not set".into()));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.mode.uses_bridge() && self.bridge_layers == 0 {
            return Err(Error::Config("bridge modes need at least one bridge layer".into()));
        }
        if !self.langs.contains(&self.centric) {
            return Err(Error::Config(format!(
                "centric language {:?} is not among {:?}",
                self.centric, self.langs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.mode == Mode::Variable && self.max_slots == 0 {
            return Err(Error::Config("max_slots must be positive".into()));
        }
        if matches!(self.mode, Mode::FixedUniversal | Mode::FixedLanguageSpecific)
            && self.fixed_len == 0
        {
            return Err(Error::Config("fixed_len must be positive".into()));
        }
        if self.mode.has_length_predictor() && self.len_classes == 0 {
            return Err(Error::Config("len_classes must be positive".into()));
        }
        Ok(())
    }

    /// Rows of each slot query table.
    pub fn slot_table_rows(&self) -> usize {
        match self.mode {
            Mode::Variable => self.max_slots,
            Mode::FixedUniversal | Mode::FixedLanguageSpecific => self.fixed_len,
            Mode::Mnmt => 0,
        }
    }

    pub fn lang_index(&self, lang: &str) -> Result<usize> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::Data(format!("unknown language {lang:?}")))
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

/// How a block is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Dense projection: zero-mean normal with Xavier scale.
    Weight,
    Bias,
    /// Layer-norm gain (ones).
    Gain,
    /// Token/slot embedding rows: normal with `1/sqrt(width)` scale.
    Embedding,
}

/// Visits every parameter block in canonical order.
pub trait ParamVisitor {
    type Handle: Copy;
    fn visit(&mut self, name: &str, rows: usize, cols: usize, kind: InitKind) -> Result<Self::Handle>;
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds<H> {
    pub wq: H,
    pub bq: H,
    pub wk: H,
    pub bk: H,
    pub wv: H,
    pub bv: H,
    pub wo: H,
    pub bo: H,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds<H> {
    pub w1: H,
    pub b1: H,
    pub w2: H,
    pub b2: H,
}

#[derive(Clone, Copy, Debug)]
pub struct LnIds<H> {
    pub g: H,
    pub b: H,
}

#[derive(Clone, Copy, Debug)]
pub struct EncLayerIds<H> {
    pub ln1: LnIds<H>,
    pub attn: AttnIds<H>,
    pub ln2: LnIds<H>,
    pub ffn: FfnIds<H>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecLayerIds<H> {
    pub ln1: LnIds<H>,
    pub self_attn: AttnIds<H>,
    pub ln2: LnIds<H>,
    pub cross_attn: AttnIds<H>,
    pub ln3: LnIds<H>,
    pub ffn: FfnIds<H>,
}

/// First bridge layer seeds slot states through a feed-forward (no residual);
/// later layers mix slots with self-attention.
#[derive(Clone, Copy, Debug)]
pub enum SlotMixer<H> {
    SeedFfn(FfnIds<H>),
    SelfAttn(AttnIds<H>),
}

#[derive(Clone, Copy, Debug)]
pub struct BridgeLayerIds<H> {
    pub ln_mix: LnIds<H>,
    pub mixer: SlotMixer<H>,
    pub ln_cross: LnIds<H>,
    pub ln_ffn: LnIds<H>,
    pub ffn: FfnIds<H>,
}

#[derive(Clone, Debug)]
pub struct BridgeIds<H> {
    /// Encoder-to-bridge cross-attention, shared by every bridge layer.
    pub cross: AttnIds<H>,
    pub layers: Vec<BridgeLayerIds<H>>,
    pub final_ln: LnIds<H>,
    /// `(language name or "shared", table)` in `cfg.langs` order.
    pub queries: Vec<(String, H)>,
    /// Length predictor `(w, b)`, `variable` mode only.
    pub len_pred: Option<(H, H)>,
}

#[derive(Clone, Debug)]
pub struct ModelIds<H> {
    pub embed: H,
    pub enc: Vec<EncLayerIds<H>>,
    pub enc_final_ln: LnIds<H>,
    pub bridge: Option<BridgeIds<H>>,
    pub dec: Vec<DecLayerIds<H>>,
    pub dec_final_ln: LnIds<H>,
}

fn visit_ln<V: ParamVisitor>(v: &mut V, prefix: &str, d: usize) -> Result<LnIds<V::Handle>> {
    Ok(LnIds {
        g: v.visit(&format!("{prefix}.g"), 1, d, InitKind::Gain)?,
        b: v.visit(&format!("{prefix}.b"), 1, d, InitKind::Bias)?,
    })
}

fn visit_attn<V: ParamVisitor>(v: &mut V, prefix: &str, d: usize) -> Result<AttnIds<V::Handle>> {
    Ok(AttnIds {
        wq: v.visit(&format!("{prefix}.wq"), d, d, InitKind::Weight)?,
        bq: v.visit(&format!("{prefix}.bq"), 1, d, InitKind::Bias)?,
        wk: v.visit(&format!("{prefix}.wk"), d, d, InitKind::Weight)?,
        bk: v.visit(&format!("{prefix}.bk"), 1, d, InitKind::Bias)?,
        wv: v.visit(&format!("{prefix}.wv"), d, d, InitKind::Weight)?,
        bv: v.visit(&format!("{prefix}.bv"), 1, d, InitKind::Bias)?,
        wo: v.visit(&format!("{prefix}.wo"), d, d, InitKind::Weight)?,
        bo: v.visit(&format!("{prefix}.bo"), 1, d, InitKind::Bias)?,
    })
}

fn visit_ffn<V: ParamVisitor>(
    v: &mut V,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> Result<FfnIds<V::Handle>> {
    Ok(FfnIds {
        w1: v.visit(&format!("{prefix}.w1"), d, hidden, InitKind::Weight)?,
        b1: v.visit(&format!("{prefix}.b1"), 1, hidden, InitKind::Bias)?,
        w2: v.visit(&format!("{prefix}.w2"), hidden, d, InitKind::Weight)?,
        b2: v.visit(&format!("{prefix}.b2"), 1, d, InitKind::Bias)?,
    })
}

/// The single source of truth for parameter names, shapes, and order.
pub fn walk_layout<V: ParamVisitor>(cfg: &ModelConfig, v: &mut V) -> Result<ModelIds<V::Handle>> {
    let d = cfg.d_model;
    let f = cfg.ffn_hidden;

    let embed = v.visit("embed", cfg.vocab_size, d, InitKind::Embedding)?;

    let mut enc = Vec::with_capacity(cfg.enc_layers);
    for i in 0..cfg.enc_layers {
        enc.push(EncLayerIds {
            ln1: visit_ln(v, &format!("enc.{i}.ln1"), d)?,
            attn: visit_attn(v, &format!("enc.{i}.attn"), d)?,
            ln2: visit_ln(v, &format!("enc.{i}.ln2"), d)?,
            ffn: visit_ffn(v, &format!("enc.{i}.ffn"), d, f)?,
        });
    }
    let enc_final_ln = visit_ln(v, "enc.final_ln", d)?;

    let bridge = if cfg.mode.uses_bridge() {
        let cross = visit_attn(v, "bridge.cross", d)?;
        let mut layers = Vec::with_capacity(cfg.bridge_layers);
        for i in 0..cfg.bridge_layers {
            let ln_mix = visit_ln(v, &format!("bridge.{i}.ln_mix"), d)?;
            let mixer = if i == 0 {
                SlotMixer::SeedFfn(visit_ffn(v, &format!("bridge.{i}.seed_ffn"), d, d)?)
            } else {
                SlotMixer::SelfAttn(visit_attn(v, &format!("bridge.{i}.self_attn"), d)?)
            };
            layers.push(BridgeLayerIds {
                ln_mix,
                mixer,
                ln_cross: visit_ln(v, &format!("bridge.{i}.ln_cross"), d)?,
                ln_ffn: visit_ln(v, &format!("bridge.{i}.ln_ffn"), d)?,
                ffn: visit_ffn(v, &format!("bridge.{i}.ffn"), d, f)?,
            });
        }
        let final_ln = visit_ln(v, "bridge.final_ln", d)?;

        let rows = cfg.slot_table_rows();
        let mut queries = Vec::new();
        if cfg.mode.per_language_queries() {
            for lang in &cfg.langs {
                let h = v.visit(&format!("bridge.query.{lang}"), rows, d, InitKind::Embedding)?;
                queries.push((lang.clone(), h));
            }
        } else {
            let h = v.visit("bridge.query.shared", rows, d, InitKind::Embedding)?;
            queries.push(("shared".into(), h));
        }

        let len_pred = if cfg.mode.has_length_predictor() {
            let w = v.visit("bridge.len_pred.w", d, cfg.len_classes, InitKind::Weight)?;
            let b = v.visit("bridge.len_pred.b", 1, cfg.len_classes, InitKind::Bias)?;
            Some((w, b))
        } else {
            None
        };

        Some(BridgeIds { cross, layers, final_ln, queries, len_pred })
    } else {
        None
    };

    let mut dec = Vec::with_capacity(cfg.dec_layers);
    for i in 0..cfg.dec_layers {
        dec.push(DecLayerIds {
            ln1: visit_ln(v, &format!("dec.{i}.ln1"), d)?,
            self_attn: visit_attn(v, &format!("dec.{i}.self_attn"), d)?,
            ln2: visit_ln(v, &format!("dec.{i}.ln2"), d)?,
            cross_attn: visit_attn(v, &format!("dec.{i}.cross_attn"), d)?,
            ln3: visit_ln(v, &format!("dec.{i}.ln3"), d)?,
            ffn: visit_ffn(v, &format!("dec.{i}.ffn"), d, f)?,
        });
    }
    let dec_final_ln = visit_ln(v, "dec.final_ln", d)?;

    Ok(ModelIds { embed, enc, enc_final_ln, bridge, dec, dec_final_ln })
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Owns the model's parameters between steps and across checkpoints.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub blocks: Vec<ParamBlock>,
    index: HashMap<String, usize>,
}

struct InitVisitor<'a> {
    rng: &'a mut ChaCha8Rng,
    blocks: Vec<ParamBlock>,
}

impl ParamVisitor for InitVisitor<'_> {
    type Handle = ();

    fn visit(&mut self, name: &str, rows: usize, cols: usize, kind: InitKind) -> Result<()> {
        let n = rows * cols;
        let values = match kind {
            InitKind::Bias => vec![0.0; n],
            InitKind::Gain => vec![1.0; n],
            InitKind::Weight => {
                let std = (2.0 / (rows + cols) as f64).sqrt();
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            InitKind::Embedding => {
                let std = 1.0 / (cols as f64).sqrt();
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
        };
        self.blocks.push(ParamBlock { name: name.to_string(), rows, cols, values });
        Ok(())
    }
}

/// Counts scalars per top-level module (`embed`, `enc`, `bridge`, `dec`).
struct CountVisitor {
    total: usize,
    by_module: Vec<(String, usize)>,
}

impl ParamVisitor for CountVisitor {
    type Handle = ();

    fn visit(&mut self, name: &str, rows: usize, cols: usize, _kind: InitKind) -> Result<()> {
        let n = rows * cols;
        self.total += n;
        let module = name.split('.').next().unwrap_or(name);
        match self.by_module.iter_mut().find(|(m, _)| m == module) {
            Some((_, c)) => *c += n,
            None => self.by_module.push((module.to_string(), n)),
        }
        Ok(())
    }
}

struct BindVisitor<'a, 'b> {
    store: &'a ParamStore,
    tape: &'b mut Tape,
    cursor: usize,
    flat: Vec<NodeId>,
}

impl ParamVisitor for BindVisitor<'_, '_> {
    type Handle = NodeId;

    fn visit(&mut self, name: &str, rows: usize, cols: usize, _kind: InitKind) -> Result<NodeId> {
        let block = self.store.blocks.get(self.cursor).ok_or_else(|| {
            Error::Data(format!("parameter store ended before block {name:?}"))
        })?;
        if block.name != name || block.rows != rows || block.cols != cols {
            return Err(Error::Data(format!(
                "parameter store mismatch: expected {name:?} {rows}x{cols}, found {:?} {}x{}",
                block.name, block.rows, block.cols
            )));
        }
        self.cursor += 1;
        let id = self.tape.param(rows, cols, block.values.clone())?;
        self.flat.push(id);
        Ok(id)
    }
}

impl ParamStore {
    /// Fresh parameters for `cfg`, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = InitVisitor { rng: &mut rng, blocks: Vec::new() };
        walk_layout(cfg, &mut v)?;
        Self::from_blocks(v.blocks)
    }

    pub fn from_blocks(blocks: Vec<ParamBlock>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, b) in blocks.iter().enumerate() {
            if b.values.len() != b.rows * b.cols {
                return Err(Error::Data(format!(
                    "parameter block {:?} has {} values for {}x{}",
                    b.name,
                    b.values.len(),
                    b.rows,
                    b.cols
                )));
            }
            if index.insert(b.name.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate parameter block {:?}", b.name)));
            }
        }
        Ok(ParamStore { blocks, index })
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.index.get(name).map(|&i| &self.blocks[i])
    }

    pub fn total_parameters(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.values.len()).collect()
    }
}

/// Exact trainable scalar count for a configuration, split by top-level
/// module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// `(module, scalars)` in layout order: `embed`, `enc`, `bridge`, `dec`.
    pub by_module: Vec<(String, usize)>,
}

/// Trainable parameters a model of this configuration would have.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamCount> {
    let mut v = CountVisitor { total: 0, by_module: Vec::new() };
    walk_layout(cfg, &mut v)?;
    Ok(ParamCount { total: v.total, by_module: v.by_module })
}

/// Parameters bound onto a tape for one forward/backward pass.
pub struct BoundModel {
    pub ids: ModelIds<NodeId>,
    /// Every block's node in store order (for gradient collection).
    pub flat: Vec<NodeId>,
}

/// Copies every parameter block onto `tape` as a differentiable leaf,
/// verifying that the store matches the configuration's layout.
pub fn bind(store: &ParamStore, cfg: &ModelConfig, tape: &mut Tape) -> Result<BoundModel> {
    let mut v = BindVisitor { store, tape, cursor: 0, flat: Vec::new() };
    let ids = walk_layout(cfg, &mut v)?;
    if v.cursor != store.blocks.len() {
        return Err(Error::Data(format!(
            "parameter store has {} blocks, layout consumed {}",
            store.blocks.len(),
            v.cursor
        )));
    }
    Ok(BoundModel { ids, flat: v.flat })
}

/// Resolves the layout to indices into `store.blocks`, for inference paths
/// that read raw values without building a tape.
pub fn index_layout(store: &ParamStore, cfg: &ModelConfig) -> Result<ModelIds<usize>> {
    struct Index<'a> {
        store: &'a ParamStore,
        cursor: usize,
    }
    impl ParamVisitor for Index<'_> {
        type Handle = usize;
        fn visit(&mut self, name: &str, rows: usize, cols: usize, _k: InitKind) -> Result<usize> {
            let i = self.cursor;
            let b = self.store.blocks.get(i).ok_or_else(|| {
                Error::Data(format!("parameter store is missing {name}"))
            })?;
            if b.name != name || b.rows != rows || b.cols != cols {
                return Err(Error::Data(format!(
                    "parameter store holds {} ({}x{}) where the layout expects {name} ({rows}x{cols})",
                    b.name, b.rows, b.cols
                )));
            }
            self.cursor += 1;
            Ok(i)
        }
    }
    let mut v = Index { store, cursor: 0 };
    let ids = walk_layout(cfg, &mut v)?;
    if v.cursor != store.blocks.len() {
        return Err(Error::Data(format!(
            "parameter store has {} blocks, layout consumed {}",
            store.blocks.len(),
            v.cursor
        )));
    }
    Ok(ids)
}

/// Arranges an externally created flat list of parameter nodes into the
/// model's layout. The list must hold one node per block in store order;
/// this is mainly useful for finite-difference gradient checks, where the
/// checker owns the leaves.
pub fn rebind(cfg: &ModelConfig, nodes: &[NodeId]) -> Result<ModelIds<NodeId>> {
    struct Rebind<'a> {
        nodes: &'a [NodeId],
        cursor: usize,
    }
    impl ParamVisitor for Rebind<'_> {
        type Handle = NodeId;
        fn visit(&mut self, name: &str, _r: usize, _c: usize, _k: InitKind) -> Result<NodeId> {
            let id = self.nodes.get(self.cursor).copied().ok_or_else(|| {
                Error::Shape(format!("ran out of nodes rebinding {name}"))
            })?;
            self.cursor += 1;
            Ok(id)
        }
    }
    let mut v = Rebind { nodes, cursor: 0 };
    let ids = walk_layout(cfg, &mut v)?;
    if v.cursor != nodes.len() {
        return Err(Error::Shape(format!(
            "{} nodes supplied, layout consumed {}",
            nodes.len(),
            v.cursor
        )));
    }
    Ok(ids)
}

impl BridgeIds<NodeId> {
    /// Query table for a source language (the shared table in
    /// `fixed_universal` mode).
    pub fn query_table(&self, lang: &str) -> Result<NodeId> {
        if self.queries.len() == 1 && self.queries[0].0 == "shared" {
            return Ok(self.queries[0].1);
        }
        self.queries
            .iter()
            .find(|(l, _)| l == lang)
            .map(|(_, h)| *h)
            .ok_or_else(|| Error::Data(format!("no slot query table for language {lang:?}")))
    }
}
