//! Synthetic multilingual corpus with an exactly invertible derivation.
//!
//! Sentences are first generated in the centric language from a small
//! phrase grammar over pseudo-words. Every other language is a deterministic
//! transformation of the centric sentence:
//!
//! 1. a seeded bijection renames every content token;
//! 2. a per-language subset of renamed tokens splits into a unique ordered
//!    pair of piece tokens (so sentence lengths diverge across languages);
//! 3. a positional reorder permutes the token sequence.
//!
//! The composition is invertible (reorder⁻¹, merge pieces, bijection⁻¹), so
//! the centric form of any sentence — and therefore its centric token count —
//! is exact, never estimated. Translation pairs between two non-centric
//! languages are perfectly mutual: both sides descend from one centric
//! sentence.
//!
//! On disk a corpus is a directory of parallel text files
//! (`<split>.<src>-<tgt>.{src,tgt,clen}`), a `vocab.txt` (one token per
//! line), and a `meta.toml` with generation facts.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub langs: Vec<String>,
    pub centric: String,
    pub train_sentences: usize,
    pub valid_sentences: usize,
    pub test_sentences: usize,
    pub zeroshot_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of content tokens each language splits into two pieces.
    pub split_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1,
            langs: vec!["en".into(), "xa".into(), "xb".into(), "xc".into()],
            centric: "en".into(),
            train_sentences: 3400,
            valid_sentences: 300,
            test_sentences: 200,
            zeroshot_sentences: 200,
            min_len: 4,
            max_len: 12,
            split_fraction: 0.12,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.langs.len() < 2 {
            return Err(Error::Config("need at least two languages".into()));
        }
        if !self.langs.contains(&self.centric) {
            return Err(Error::Config(format!(
                "centric language {:?} missing from {:?}",
                self.centric, self.langs
            )));
        }
        let mut seen = HashSet::new();
        if !self.langs.iter().all(|l| seen.insert(l)) {
            return Err(Error::Config("duplicate language names".into()));
        }
        if self.min_len < 4 {
            return Err(Error::Config("sentences need at least 4 tokens".into()));
        }
        if self.max_len < self.min_len {
            return Err(Error::Config("max_len below min_len".into()));
        }
        if !(0.0..=0.5).contains(&self.split_fraction) {
            return Err(Error::Config("split_fraction outside [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Part-of-speech sets over content-token vocabulary ids.
#[derive(Debug, Clone)]
pub struct Inventory {
    /// All tokens, id = position. Specials first, then language tags, then
    /// content words, then piece tokens.
    pub tokens: Vec<String>,
    pub tags: HashMap<String, u32>,
    pub det: Vec<u32>,
    pub adj: Vec<u32>,
    pub noun: Vec<u32>,
    pub verb: Vec<u32>,
    pub adv: Vec<u32>,
    pub content: Vec<u32>,
    pub pieces: Vec<u32>,
}

const DET_N: usize = 4;
const ADJ_N: usize = 30;
const NOUN_N: usize = 50;
const VERB_N: usize = 40;
const ADV_N: usize = 20;
const CONTENT_N: usize = DET_N + ADJ_N + NOUN_N + VERB_N + ADV_N;
const PIECE_N: usize = 40;

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let onsets = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    let vowels = ["a", "e", "i", "o", "u"];
    let mut syllables = Vec::new();
    for o in onsets {
        for v in vowels {
            syllables.push(format!("{o}{v}"));
        }
    }
    let mut combos: Vec<String> = Vec::with_capacity(syllables.len() * syllables.len());
    for a in &syllables {
        for b in &syllables {
            combos.push(format!("{a}{b}"));
        }
    }
    combos.shuffle(rng);
    combos.truncate(n);
    combos
}

impl Inventory {
    fn build(langs: &[String], rng: &mut ChaCha8Rng) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<eos>".to_string()];
        let mut tags = HashMap::new();
        for lang in langs {
            tags.insert(lang.clone(), tokens.len() as u32);
            tokens.push(format!("<{lang}>"));
        }
        let words = pseudo_words(CONTENT_N + PIECE_N, rng);
        let content_start = tokens.len() as u32;
        tokens.extend(words.iter().take(CONTENT_N).cloned());
        let piece_start = tokens.len() as u32;
        tokens.extend(words.iter().skip(CONTENT_N).cloned());

        let ids = |from: u32, n: usize| -> Vec<u32> { (from..from + n as u32).collect() };
        let det = ids(content_start, DET_N);
        let adj = ids(content_start + DET_N as u32, ADJ_N);
        let noun = ids(content_start + (DET_N + ADJ_N) as u32, NOUN_N);
        let verb = ids(content_start + (DET_N + ADJ_N + NOUN_N) as u32, VERB_N);
        let adv = ids(content_start + (DET_N + ADJ_N + NOUN_N + VERB_N) as u32, ADV_N);
        let content = ids(content_start, CONTENT_N);
        let pieces = ids(piece_start, PIECE_N);
        Inventory { tokens, tags, det, adj, noun, verb, adv, content, pieces }
    }
}

/// How a language permutes token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderKind {
    None,
    /// Swap positions (0,1), (2,3), …
    SwapAdjacent,
    /// Each full triple [a, b, c] becomes [c, a, b].
    RotateTriples,
}

impl ReorderKind {
    pub fn apply(self, xs: &[u32]) -> Vec<u32> {
        let mut out = xs.to_vec();
        match self {
            ReorderKind::None => {}
            ReorderKind::SwapAdjacent => {
                let mut i = 0;
                while i + 1 < out.len() {
                    out.swap(i, i + 1);
                    i += 2;
                }
            }
            ReorderKind::RotateTriples => {
                let mut i = 0;
                while i + 2 < out.len() {
                    let (a, b, c) = (out[i], out[i + 1], out[i + 2]);
                    out[i] = c;
                    out[i + 1] = a;
                    out[i + 2] = b;
                    i += 3;
                }
            }
        }
        out
    }

    pub fn invert(self, xs: &[u32]) -> Vec<u32> {
        let mut out = xs.to_vec();
        match self {
            ReorderKind::None => {}
            ReorderKind::SwapAdjacent => return self.apply(xs),
            ReorderKind::RotateTriples => {
                let mut i = 0;
                while i + 2 < out.len() {
                    let (c, a, b) = (out[i], out[i + 1], out[i + 2]);
                    out[i] = a;
                    out[i + 1] = b;
                    out[i + 2] = c;
                    i += 3;
                }
            }
        }
        out
    }
}

/// A language's derivation from the centric form, exactly invertible.
#[derive(Debug, Clone)]
pub struct Derivation {
    /// Content-token bijection and its inverse (full-vocab-id keyed).
    rename: HashMap<u32, u32>,
    rename_inv: HashMap<u32, u32>,
    /// Renamed token → its ordered piece pair.
    split: HashMap<u32, (u32, u32)>,
    /// Piece pair → renamed token.
    merge: HashMap<(u32, u32), u32>,
    pub reorder: ReorderKind,
}

impl Derivation {
    fn identity() -> Self {
        Derivation {
            rename: HashMap::new(),
            rename_inv: HashMap::new(),
            split: HashMap::new(),
            merge: HashMap::new(),
            reorder: ReorderKind::None,
        }
    }

    fn generate(inv: &Inventory, reorder: ReorderKind, split_fraction: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut targets = inv.content.clone();
        targets.shuffle(rng);
        let rename: HashMap<u32, u32> =
            inv.content.iter().copied().zip(targets.iter().copied()).collect();
        let rename_inv: HashMap<u32, u32> =
            targets.iter().copied().zip(inv.content.iter().copied()).collect();

        // Pick the split set among renamed tokens; give each a unique pair
        // (first pieces from one half of the pool, second from the other, so
        // a pair's first piece identifies it unambiguously).
        let n_split = (inv.content.len() as f64 * split_fraction).floor() as usize;
        let half = inv.pieces.len() / 2;
        let n_split = n_split.min(half);
        let mut split_tokens = inv.content.clone();
        split_tokens.shuffle(rng);
        split_tokens.truncate(n_split);
        let mut firsts = inv.pieces[..half].to_vec();
        let mut seconds = inv.pieces[half..].to_vec();
        firsts.shuffle(rng);
        seconds.shuffle(rng);

        let mut split = HashMap::new();
        let mut merge = HashMap::new();
        for (i, t) in split_tokens.into_iter().enumerate() {
            let pair = (firsts[i], seconds[i]);
            split.insert(t, pair);
            merge.insert(pair, t);
        }
        Derivation { rename, rename_inv, split, merge, reorder }
    }

    /// Centric sentence → this language's sentence.
    pub fn apply(&self, centric: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(centric.len() + 4);
        for &t in centric {
            let r = *self.rename.get(&t).unwrap_or(&t);
            match self.split.get(&r) {
                Some(&(a, b)) => {
                    out.push(a);
                    out.push(b);
                }
                None => out.push(r),
            }
        }
        self.reorder.apply(&out)
    }

    /// This language's sentence → the centric sentence it derives from.
    pub fn invert(&self, sentence: &[u32]) -> Result<Vec<u32>> {
        let unordered = self.reorder.invert(sentence);
        let mut merged = Vec::with_capacity(unordered.len());
        let mut i = 0;
        while i < unordered.len() {
            if i + 1 < unordered.len() {
                if let Some(&t) = self.merge.get(&(unordered[i], unordered[i + 1])) {
                    merged.push(t);
                    i += 2;
                    continue;
                }
            }
            merged.push(unordered[i]);
            i += 1;
        }
        merged
            .into_iter()
            .map(|t| Ok(*self.rename_inv.get(&t).unwrap_or(&t)))
            .collect()
    }
}

/// A generated corpus, in memory.
#[derive(Debug)]
pub struct Corpus {
    pub cfg: CorpusConfig,
    pub inventory: Inventory,
    pub derivations: HashMap<String, Derivation>,
    /// Centric sentences per partition name (`train`, `valid`, `test`, `zs`).
    pub partitions: Vec<(String, Vec<Vec<u32>>)>,
}

fn gen_sentence(inv: &Inventory, min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let target_len = rng.gen_range(min_len..=max_len);
    let mut extras = target_len - 3; // noun + verb + noun are fixed
    let det1 = extras > 0 && rng.gen_bool(0.5);
    if det1 {
        extras -= 1;
    }
    let det2 = extras > 0 && rng.gen_bool(0.5);
    if det2 {
        extras -= 1;
    }
    let mut counts = [0usize; 3]; // adjectives₁, adjectives₂, adverbs
    for _ in 0..extras {
        counts[rng.gen_range(0..3)] += 1;
    }
    let pick = |set: &[u32], rng: &mut ChaCha8Rng| set[rng.gen_range(0..set.len())];

    let mut s = Vec::with_capacity(target_len);
    if det1 {
        s.push(pick(&inv.det, rng));
    }
    for _ in 0..counts[0] {
        s.push(pick(&inv.adj, rng));
    }
    s.push(pick(&inv.noun, rng));
    s.push(pick(&inv.verb, rng));
    if det2 {
        s.push(pick(&inv.det, rng));
    }
    for _ in 0..counts[1] {
        s.push(pick(&inv.adj, rng));
    }
    s.push(pick(&inv.noun, rng));
    for _ in 0..counts[2] {
        s.push(pick(&inv.adv, rng));
    }
    debug_assert_eq!(s.len(), target_len);
    s
}

/// Generates the whole corpus deterministically from its configuration.
pub fn build(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inventory = Inventory::build(&cfg.langs, &mut rng);

    let reorders = [ReorderKind::SwapAdjacent, ReorderKind::RotateTriples, ReorderKind::None];
    let mut derivations = HashMap::new();
    let mut nth = 0;
    for lang in &cfg.langs {
        if *lang == cfg.centric {
            derivations.insert(lang.clone(), Derivation::identity());
        } else {
            let reorder = reorders[nth % reorders.len()];
            let mut lang_rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(nth as u64 + 1)),
            );
            derivations.insert(
                lang.clone(),
                Derivation::generate(&inventory, reorder, cfg.split_fraction, &mut lang_rng),
            );
            nth += 1;
        }
    }

    let total = cfg.train_sentences + cfg.valid_sentences + cfg.test_sentences + cfg.zeroshot_sentences;
    let mut seen = HashSet::with_capacity(total);
    let mut sentences = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > total * 100 {
            return Err(Error::Data(format!(
                "could not produce {total} distinct sentences (grammar space too small?)"
            )));
        }
        let s = gen_sentence(&inventory, cfg.min_len, cfg.max_len, &mut rng);
        if seen.insert(s.clone()) {
            sentences.push(s);
        }
    }

    let mut rest = sentences;
    let take = |rest: &mut Vec<Vec<u32>>, n: usize| -> Vec<Vec<u32>> {
        rest.drain(..n).collect()
    };
    let partitions = vec![
        ("train".to_string(), take(&mut rest, cfg.train_sentences)),
        ("valid".to_string(), take(&mut rest, cfg.valid_sentences)),
        ("test".to_string(), take(&mut rest, cfg.test_sentences)),
        ("zs".to_string(), take(&mut rest, cfg.zeroshot_sentences)),
    ];

    Ok(Corpus { cfg: cfg.clone(), inventory, derivations, partitions })
}

impl Corpus {
    pub fn partition(&self, name: &str) -> Result<&[Vec<u32>]> {
        self.partitions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
            .ok_or_else(|| Error::Data(format!("no partition {name:?}")))
    }

    /// Fraction of a partition's sentences whose derived form in `lang`
    /// differs in length from the centric form.
    pub fn length_change_fraction(&self, partition: &str, lang: &str) -> Result<f64> {
        let sents = self.partition(partition)?;
        let der = self
            .derivations
            .get(lang)
            .ok_or_else(|| Error::Data(format!("no derivation for {lang:?}")))?;
        let changed = sents.iter().filter(|s| der.apply(s).len() != s.len()).count();
        Ok(changed as f64 / sents.len().max(1) as f64)
    }

    /// Ordered language pairs for the supervised splits: centric ↔ each
    /// other language, both directions.
    pub fn supervised_directions(&self) -> Vec<(String, String)> {
        supervised_directions(&self.cfg.langs, &self.cfg.centric)
    }

    /// Ordered pairs between non-centric languages (the zero-shot set).
    pub fn zeroshot_directions(&self) -> Vec<(String, String)> {
        zeroshot_directions(&self.cfg.langs, &self.cfg.centric)
    }

    fn render(&self, ids: &[u32]) -> String {
        let mut line = String::new();
        for (i, &t) in ids.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&self.inventory.tokens[t as usize]);
        }
        line
    }

    /// Writes the corpus directory: parallel files per split and direction,
    /// the vocabulary, and generation metadata.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;

        let mut vocab = String::new();
        for t in &self.inventory.tokens {
            writeln!(vocab, "{t}").expect("string write");
        }
        std::fs::write(dir.join("vocab.txt"), vocab)?;

        let write_direction = |partition: &str, src_lang: &str, tgt_lang: &str| -> Result<()> {
            let sents = self.partition(partition)?;
            let ds = &self.derivations[src_lang];
            let dt = &self.derivations[tgt_lang];
            let (mut fs, mut ft, mut fc) = (String::new(), String::new(), String::new());
            for e in sents {
                writeln!(fs, "{}", self.render(&ds.apply(e))).expect("string write");
                writeln!(ft, "{}", self.render(&dt.apply(e))).expect("string write");
                writeln!(fc, "{}", e.len()).expect("string write");
            }
            let stem = format!("{partition}.{src_lang}-{tgt_lang}");
            std::fs::write(dir.join(format!("{stem}.src")), fs)?;
            std::fs::write(dir.join(format!("{stem}.tgt")), ft)?;
            std::fs::write(dir.join(format!("{stem}.clen")), fc)?;
            Ok(())
        };

        for split in ["train", "valid", "test"] {
            for (s, t) in self.supervised_directions() {
                write_direction(split, &s, &t)?;
            }
        }
        for (s, t) in self.zeroshot_directions() {
            write_direction("zs", &s, &t)?;
        }

        let meta = Meta {
            langs: self.cfg.langs.clone(),
            centric: self.cfg.centric.clone(),
            seed: self.cfg.seed,
            vocab_size: self.inventory.tokens.len(),
            min_len: self.cfg.min_len,
            max_len: self.cfg.max_len,
            split_fraction: self.cfg.split_fraction,
            partitions: self
                .partitions
                .iter()
                .map(|(n, s)| (n.clone(), s.len()))
                .collect(),
            length_change_fraction: self
                .cfg
                .langs
                .iter()
                .filter(|l| **l != self.cfg.centric)
                .map(|l| Ok((l.clone(), self.length_change_fraction("train", l)?)))
                .collect::<Result<_>>()?,
        };
        let meta_s = toml::to_string_pretty(&meta)
            .map_err(|e| Error::Data(format!("meta serialization: {e}")))?;
        std::fs::write(dir.join("meta.toml"), meta_s)?;
        Ok(())
    }
}

/// Ordered language pairs for the supervised splits: centric ↔ each other
/// language, both directions.
pub fn supervised_directions(langs: &[String], centric: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for lang in langs {
        if lang != centric {
            out.push((centric.to_string(), lang.clone()));
            out.push((lang.clone(), centric.to_string()));
        }
    }
    out
}

/// Ordered pairs between non-centric languages (the zero-shot set).
pub fn zeroshot_directions(langs: &[String], centric: &str) -> Vec<(String, String)> {
    let others: Vec<&String> = langs.iter().filter(|l| *l != centric).collect();
    let mut out = Vec::new();
    for a in &others {
        for b in &others {
            if a != b {
                out.push(((*a).clone(), (*b).clone()));
            }
        }
    }
    out
}

/// Facts about a written corpus, stored alongside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub langs: Vec<String>,
    pub centric: String,
    pub seed: u64,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub split_fraction: f64,
    pub partitions: Vec<(String, usize)>,
    pub length_change_fraction: Vec<(String, f64)>,
}

impl Meta {
    pub fn load(dir: &Path) -> Result<Meta> {
        let path = dir.join("meta.toml");
        let s = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&s).map_err(|e| Error::Data(format!("bad meta.toml: {e}")))
    }

    pub fn supervised_directions(&self) -> Vec<(String, String)> {
        supervised_directions(&self.langs, &self.centric)
    }

    pub fn zeroshot_directions(&self) -> Vec<(String, String)> {
        zeroshot_directions(&self.langs, &self.centric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            seed: 42,
            train_sentences: 300,
            valid_sentences: 40,
            test_sentences: 30,
            zeroshot_sentences: 30,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn every_language_round_trips_every_sentence() {
        let corpus = build(&small_cfg()).unwrap();
        for (_, sents) in &corpus.partitions {
            for e in sents {
                for lang in &corpus.cfg.langs {
                    let der = &corpus.derivations[lang];
                    let x = der.apply(e);
                    assert_eq!(&der.invert(&x).unwrap(), e, "{lang}");
                }
            }
        }
    }

    #[test]
    fn partitions_are_disjoint_sets_of_sentences() {
        let corpus = build(&small_cfg()).unwrap();
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        for (name, sents) in &corpus.partitions {
            for s in sents {
                assert!(seen.insert(s.clone()), "sentence shared across partitions ({name})");
            }
        }
    }

    #[test]
    fn lengths_are_uniform_by_chi_squared() {
        // 4..=12 inclusive: 9 bins, 8 degrees of freedom.
        // Critical value at significance 0.01: 20.09.
        let cfg = CorpusConfig { seed: 7, ..CorpusConfig::default() };
        let corpus = build(&cfg).unwrap();
        let mut counts = [0usize; 9];
        let mut n = 0usize;
        for (_, sents) in &corpus.partitions {
            for s in sents {
                counts[s.len() - 4] += 1;
                n += 1;
            }
        }
        let expected = n as f64 / 9.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 20.09, "chi² = {chi2:.2} over counts {counts:?}");
    }

    #[test]
    fn at_least_thirty_percent_of_pairs_change_length() {
        let corpus = build(&small_cfg()).unwrap();
        for lang in &corpus.cfg.langs {
            if lang == &corpus.cfg.centric {
                continue;
            }
            let f = corpus.length_change_fraction("train", lang).unwrap();
            assert!(f >= 0.30, "{lang}: only {:.0}% of sentences change length", f * 100.0);
        }
    }

    #[test]
    fn non_centric_pairs_are_mutual_translations() {
        // A zero-shot pair must agree on its centric source: deriving the
        // target side from the inverted source side reproduces the file pair.
        let corpus = build(&small_cfg()).unwrap();
        let xa = &corpus.derivations["xa"];
        let xb = &corpus.derivations["xb"];
        for e in corpus.partition("zs").unwrap() {
            let src = xa.apply(e);
            let tgt = xb.apply(e);
            let recovered = xb.apply(&xa.invert(&src).unwrap());
            assert_eq!(recovered, tgt);
        }
    }

    #[test]
    fn same_seed_reproduces_the_corpus_exactly() {
        let a = build(&small_cfg()).unwrap();
        let b = build(&small_cfg()).unwrap();
        for ((na, sa), (nb, sb)) in a.partitions.iter().zip(&b.partitions) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
        }
        assert_eq!(a.inventory.tokens, b.inventory.tokens);
        let c = build(&CorpusConfig { seed: 43, ..small_cfg() }).unwrap();
        assert_ne!(
            a.partition("train").unwrap(),
            c.partition("train").unwrap(),
            "different seeds must differ"
        );
    }

    #[test]
    fn written_directory_has_all_direction_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            train_sentences: 30,
            valid_sentences: 10,
            test_sentences: 10,
            zeroshot_sentences: 10,
            ..small_cfg()
        };
        let corpus = build(&cfg).unwrap();
        corpus.write_dir(dir.path()).unwrap();

        assert!(dir.path().join("vocab.txt").exists());
        assert!(dir.path().join("meta.toml").exists());
        for split in ["train", "valid", "test"] {
            for (s, t) in corpus.supervised_directions() {
                for ext in ["src", "tgt", "clen"] {
                    let f = dir.path().join(format!("{split}.{s}-{t}.{ext}"));
                    assert!(f.exists(), "missing {}", f.display());
                }
            }
        }
        for (s, t) in corpus.zeroshot_directions() {
            assert!(dir.path().join(format!("zs.{s}-{t}.src")).exists());
        }

        let meta = Meta::load(dir.path()).unwrap();
        assert_eq!(meta.vocab_size, corpus.inventory.tokens.len());
        assert_eq!(meta.partitions[0], ("train".to_string(), 30));

        // The clen column equals the centric token count per line.
        let clen = std::fs::read_to_string(dir.path().join("train.xa-en.clen")).unwrap();
        let tgt = std::fs::read_to_string(dir.path().join("train.xa-en.tgt")).unwrap();
        for (c, t) in clen.lines().zip(tgt.lines()) {
            let n: usize = c.parse().unwrap();
            assert_eq!(n, t.split_whitespace().count(), "clen must equal centric length");
        }
    }

    #[test]
    fn derived_sentences_use_only_known_tokens() {
        let corpus = build(&small_cfg()).unwrap();
        let v = corpus.inventory.tokens.len() as u32;
        for lang in &corpus.cfg.langs {
            let der = &corpus.derivations[lang];
            for e in corpus.partition("train").unwrap().iter().take(50) {
                for t in der.apply(e) {
                    assert!(t < v);
                }
            }
        }
    }

    proptest! {
        /// Reorderings invert exactly on arbitrary sequences.
        #[test]
        fn reorder_roundtrip(xs in proptest::collection::vec(0u32..500, 0..40)) {
            for kind in [ReorderKind::None, ReorderKind::SwapAdjacent, ReorderKind::RotateTriples] {
                prop_assert_eq!(kind.invert(&kind.apply(&xs)), xs.clone());
            }
        }

        /// Derivations invert exactly on arbitrary content-token sentences,
        /// not just grammar-shaped ones.
        #[test]
        fn derivation_roundtrip_on_arbitrary_content(ix in proptest::collection::vec(0usize..CONTENT_N, 1..30), seed in 0u64..50) {
            let cfg = CorpusConfig { seed, train_sentences: 1, valid_sentences: 1, test_sentences: 1, zeroshot_sentences: 1, ..CorpusConfig::default() };
            let corpus = build(&cfg).unwrap();
            let sentence: Vec<u32> = ix.iter().map(|&i| corpus.inventory.content[i]).collect();
            for lang in &corpus.cfg.langs {
                let der = &corpus.derivations[lang];
                prop_assert_eq!(der.invert(&der.apply(&sentence)).unwrap(), sentence.clone());
            }
        }
    }
}
