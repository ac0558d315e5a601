//! Self-contained binary checkpoints.
//!
//! A checkpoint embeds everything needed to resume training or run
//! inference: the model and training configuration (as TOML), the
//! vocabulary, every parameter block by name, and the optimizer state.
//! All integers and floats are little-endian; the file ends with an
//! FNV-1a fingerprint of everything before it, so truncation or bit rot
//! is detected before any value is used.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamBlock, ParamStore};
use crate::optim::Adam;
use crate::training::{TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"BMTCKPT\0";
const VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Serialize, Deserialize)]
struct MetaBlock {
    model: ModelConfig,
    train: TrainConfig,
    epoch: u64,
    step: u64,
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_bytes(out: &mut Vec<u8>, b: &[u8]) {
    push_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn push_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    out.reserve(vs.len() * 8);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.bytes.len() as u64 {
            return Err(Error::Data("checkpoint declares an impossible length".into()));
        }
        Ok(n as usize)
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes_field()?.to_vec())
            .map_err(|_| Error::Data("checkpoint holds invalid text".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Serializes a trainer and its vocabulary into checkpoint bytes.
pub fn to_bytes(trainer: &Trainer, vocab: &Vocab) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let meta = MetaBlock {
        model: trainer.cfg.clone(),
        train: trainer.train_cfg.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
    };
    let meta_toml =
        toml::to_string(&meta).map_err(|e| Error::Data(format!("cannot encode settings: {e}")))?;
    push_bytes(&mut out, meta_toml.as_bytes());

    push_u64(&mut out, vocab.tokens.len() as u64);
    for t in &vocab.tokens {
        push_bytes(&mut out, t.as_bytes());
    }

    push_u64(&mut out, trainer.store.blocks.len() as u64);
    for b in &trainer.store.blocks {
        push_bytes(&mut out, b.name.as_bytes());
        push_u64(&mut out, b.rows as u64);
        push_u64(&mut out, b.cols as u64);
        push_f64s(&mut out, &b.values);
    }

    let adam = &trainer.adam;
    if adam.m.len() != trainer.store.blocks.len() {
        return Err(Error::Shape("optimizer state does not match the parameters".into()));
    }
    push_u64(&mut out, adam.step);
    for (m, v) in adam.m.iter().zip(&adam.v) {
        push_f64s(&mut out, m);
        push_f64s(&mut out, v);
    }

    let fp = fnv1a(&out);
    push_u64(&mut out, fp);
    Ok(out)
}

/// Parses checkpoint bytes back into a trainer and vocabulary.
pub fn from_bytes(bytes: &[u8]) -> Result<(Trainer, Vocab)> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Data("checkpoint is truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a(body);
    if stored != actual {
        return Err(Error::Data(format!(
            "checkpoint fingerprint mismatch (stored {stored:016x}, computed {actual:016x})"
        )));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }

    let meta: MetaBlock = toml::from_str(&r.string()?)
        .map_err(|e| Error::Data(format!("bad settings in checkpoint: {e}")))?;

    let n_tokens = r.len()?;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(r.string()?);
    }
    let vocab = Vocab::from_tokens(tokens)?;

    let n_blocks = r.len()?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name = r.string()?;
        let rows = r.len()?;
        let cols = r.len()?;
        let size = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Data("checkpoint block shape overflows".into()))?;
        let values = r.f64s(size)?;
        blocks.push(ParamBlock { name, rows, cols, values });
    }
    let store = ParamStore::from_blocks(blocks)?;

    let adam_step = r.u64()?;
    let mut m = Vec::with_capacity(n_blocks);
    let mut v = Vec::with_capacity(n_blocks);
    for b in &store.blocks {
        m.push(r.f64s(b.values.len())?);
        v.push(r.f64s(b.values.len())?);
    }
    if r.pos != body.len() {
        return Err(Error::Data("checkpoint has trailing bytes".into()));
    }

    let adam = Adam { cfg: meta.train.adam.clone(), step: adam_step, m, v };
    let trainer =
        Trainer::from_parts(meta.model, meta.train, store, adam, meta.step, meta.epoch)?;
    if trainer.cfg.vocab_size != vocab.len() {
        return Err(Error::Data(format!(
            "checkpoint vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            trainer.cfg.vocab_size
        )));
    }
    Ok((trainer, vocab))
}

pub fn save(path: &Path, trainer: &Trainer, vocab: &Vocab) -> Result<()> {
    std::fs::write(path, to_bytes(trainer, vocab)?).map_err(Error::from)
}

pub fn load(path: &Path) -> Result<(Trainer, Vocab)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
