//! Vocabulary, parallel data loading, and batching.
//!
//! A [`Batch`] is the rectangular contract type: `B x max_len` id matrices
//! padded with `<pad>` plus boolean masks marking real positions. The
//! forward passes never consume the padded form directly — the packed
//! accessors strip padding into contiguous rows with per-sentence segments,
//! so padded positions cannot influence any result.
//!
//! Batches group pairs by their centric-side token count, which makes every
//! sentence in a batch occupy the same number of bridge slots in variable
//! mode.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EOS, PAD};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Vocab {
    pub tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        if tokens.len() < 2 || tokens[PAD as usize] != "<pad>" || tokens[EOS as usize] != "<eos>" {
            return Err(Error::Data(
                "vocabulary must start with <pad> and <eos>".into(),
            ));
        }
        Ok(Vocab { tokens, index })
    }

    /// Reads a vocabulary file: one token per line, id = line number.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("token id {id} out of range")))
    }

    /// Id of a language's tag token `<lang>`.
    pub fn tag(&self, lang: &str) -> Result<u32> {
        self.id(&format!("<{lang}>"))
    }

    pub fn encode_line(&self, line: &str) -> Result<Vec<u32>> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect::<Result<_>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    /// Token count of the sentence's centric-language form.
    pub centric_len: usize,
}

impl SentencePair {
    /// Centric token count as seen from the source side: the sentence itself
    /// when the source is centric, otherwise the stored centric length.
    pub fn src_centric_len(&self, centric: &str) -> usize {
        if self.src_lang == centric {
            self.src.len()
        } else {
            self.centric_len
        }
    }

    pub fn tgt_centric_len(&self, centric: &str) -> usize {
        if self.tgt_lang == centric {
            self.tgt.len()
        } else {
            self.centric_len
        }
    }
}

/// Loads one direction of one split from a corpus directory.
pub fn load_pairs(
    dir: &Path,
    split: &str,
    src_lang: &str,
    tgt_lang: &str,
    vocab: &Vocab,
) -> Result<Vec<SentencePair>> {
    let stem = format!("{split}.{src_lang}-{tgt_lang}");
    let read = |ext: &str| -> Result<String> {
        let path = dir.join(format!("{stem}.{ext}"));
        std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
    };
    let src_f = read("src")?;
    let tgt_f = read("tgt")?;
    let clen_f = read("clen")?;
    let (src_l, tgt_l, clen_l): (Vec<&str>, Vec<&str>, Vec<&str>) =
        (src_f.lines().collect(), tgt_f.lines().collect(), clen_f.lines().collect());
    if src_l.len() != tgt_l.len() || src_l.len() != clen_l.len() {
        return Err(Error::Data(format!(
            "{stem}: {} source, {} target, {} length lines",
            src_l.len(),
            tgt_l.len(),
            clen_l.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src_l.len());
    for (i, ((s, t), c)) in src_l.iter().zip(&tgt_l).zip(&clen_l).enumerate() {
        let src = vocab.encode_line(s)?;
        let tgt = vocab.encode_line(t)?;
        let centric_len: usize = c
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("{stem} line {}: bad length: {e}", i + 1)))?;
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Data(format!("{stem} line {}: empty sentence", i + 1)));
        }
        pairs.push(SentencePair {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            src,
            tgt,
            centric_len,
        });
    }
    Ok(pairs)
}

/// Loads several directions of one split and concatenates them.
pub fn load_split(
    dir: &Path,
    split: &str,
    directions: &[(String, String)],
    vocab: &Vocab,
) -> Result<Vec<SentencePair>> {
    let mut pairs = Vec::new();
    for (src, tgt) in directions {
        pairs.extend(load_pairs(dir, split, src, tgt, vocab)?);
    }
    Ok(pairs)
}

/// A rectangular padded batch plus masks; packed accessors strip the padding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<SentencePair>,
    pub max_src: usize,
    pub max_tgt: usize,
    /// `B x max_src`: `[<src_lang>] tokens… <pad>…`
    pub src_ids: Vec<u32>,
    pub src_mask: Vec<bool>,
    /// `B x max_tgt`: `[<tgt_lang>] tokens… <pad>…` (decoder input)
    pub dec_in: Vec<u32>,
    /// `B x max_tgt`: `tokens… <eos> <pad>…` (decoder targets)
    pub dec_out: Vec<u32>,
    pub tgt_mask: Vec<bool>,
}

/// Packed decoder views of a batch.
pub struct PackedDec {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
    pub segs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(pairs: Vec<SentencePair>, vocab: &Vocab) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let max_src = pairs.iter().map(|p| p.src.len() + 1).max().unwrap();
        let max_tgt = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap();
        let b = pairs.len();
        let mut src_ids = vec![PAD; b * max_src];
        let mut src_mask = vec![false; b * max_src];
        let mut dec_in = vec![PAD; b * max_tgt];
        let mut dec_out = vec![PAD; b * max_tgt];
        let mut tgt_mask = vec![false; b * max_tgt];
        for (i, p) in pairs.iter().enumerate() {
            let src_tag = vocab.tag(&p.src_lang)?;
            let tgt_tag = vocab.tag(&p.tgt_lang)?;
            let sr = &mut src_ids[i * max_src..(i + 1) * max_src];
            sr[0] = src_tag;
            sr[1..=p.src.len()].copy_from_slice(&p.src);
            src_mask[i * max_src..i * max_src + p.src.len() + 1].fill(true);

            let di = &mut dec_in[i * max_tgt..(i + 1) * max_tgt];
            di[0] = tgt_tag;
            di[1..=p.tgt.len()].copy_from_slice(&p.tgt);
            let do_ = &mut dec_out[i * max_tgt..(i + 1) * max_tgt];
            do_[..p.tgt.len()].copy_from_slice(&p.tgt);
            do_[p.tgt.len()] = EOS;
            tgt_mask[i * max_tgt..i * max_tgt + p.tgt.len() + 1].fill(true);
        }
        Ok(Batch { pairs, max_src, max_tgt, src_ids, src_mask, dec_in, dec_out, tgt_mask })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn pack(ids: &[u32], mask: &[bool], width: usize, rows: usize) -> (Vec<u32>, Vec<(usize, usize)>) {
        let mut packed = Vec::with_capacity(ids.len());
        let mut segs = Vec::with_capacity(rows);
        for r in 0..rows {
            let start = packed.len();
            for c in 0..width {
                if mask[r * width + c] {
                    packed.push(ids[r * width + c]);
                }
            }
            segs.push((start, packed.len() - start));
        }
        (packed, segs)
    }

    /// Source ids without padding, with per-sentence segments.
    pub fn packed_src(&self) -> (Vec<u32>, Vec<(usize, usize)>) {
        Self::pack(&self.src_ids, &self.src_mask, self.max_src, self.len())
    }

    /// Decoder input/target ids without padding (they share one mask and
    /// therefore one segment layout).
    pub fn packed_dec(&self) -> PackedDec {
        let (input, segs) = Self::pack(&self.dec_in, &self.tgt_mask, self.max_tgt, self.len());
        let (output, _) = Self::pack(&self.dec_out, &self.tgt_mask, self.max_tgt, self.len());
        PackedDec { input, output, segs }
    }
}

/// Groups pairs by centric-side token count, then chunks each group into
/// batches of at most `batch_size`. With an rng, pair order within groups and
/// the final batch order are shuffled (deterministically for a given seed).
pub fn make_batches(
    pairs: &[SentencePair],
    vocab: &Vocab,
    centric: &str,
    batch_size: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut groups: BTreeMap<usize, Vec<&SentencePair>> = BTreeMap::new();
    for p in pairs {
        let src_basis = p.src_centric_len(centric);
        let tgt_basis = p.tgt_centric_len(centric);
        if src_basis != tgt_basis {
            return Err(Error::Data(format!(
                "pair {}→{} disagrees on its centric length ({src_basis} vs {tgt_basis})",
                p.src_lang, p.tgt_lang
            )));
        }
        groups.entry(src_basis).or_default().push(p);
    }
    let mut batches = Vec::new();
    for (_, mut group) in groups {
        if let Some(r) = rng.as_deref_mut() {
            group.shuffle(r);
        }
        for chunk in group.chunks(batch_size) {
            batches.push(Batch::new(chunk.iter().map(|p| (*p).clone()).collect(), vocab)?);
        }
    }
    if let Some(r) = rng.as_deref_mut() {
        batches.shuffle(r);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use rand::SeedableRng;

    fn test_vocab() -> Vocab {
        let toks = ["<pad>", "<eos>", "<en>", "<xa>", "w1", "w2", "w3", "w4", "w5"];
        Vocab::from_tokens(toks.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn pair(src_lang: &str, tgt_lang: &str, src: &[u32], tgt: &[u32], clen: usize) -> SentencePair {
        SentencePair {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            src: src.to_vec(),
            tgt: tgt.to_vec(),
            centric_len: clen,
        }
    }

    #[test]
    fn vocab_lookups_and_tags_work_both_ways() {
        let v = test_vocab();
        assert_eq!(v.id("w1").unwrap(), 4);
        assert_eq!(v.token(4).unwrap(), "w1");
        assert_eq!(v.tag("xa").unwrap(), 3);
        assert!(v.id("nope").is_err());
        assert!(v.token(99).is_err());
        assert_eq!(v.encode_line("w1 w3").unwrap(), vec![4, 6]);
        assert_eq!(v.decode(&[4, 6]).unwrap(), "w1 w3");
    }

    #[test]
    fn vocab_rejects_duplicates_and_missing_specials() {
        assert!(Vocab::from_tokens(vec!["<pad>".into(), "<eos>".into(), "a".into(), "a".into()])
            .is_err());
        assert!(Vocab::from_tokens(vec!["a".into(), "b".into()]).is_err());
    }

    #[test]
    fn batches_pad_to_rectangles_and_mask_real_positions() {
        let v = test_vocab();
        let pairs = vec![
            pair("en", "xa", &[4, 5], &[6, 7, 8], 2),
            pair("xa", "en", &[5], &[4, 5], 2),
        ];
        let b = Batch::new(pairs, &v).unwrap();
        // max_src = 2 tokens + tag = 3; max_tgt = 3 tokens + eos = 4.
        assert_eq!((b.max_src, b.max_tgt), (3, 4));
        // Row 0: <en> w1 w2 ; row 1: <xa> w2 <pad>.
        assert_eq!(b.src_ids, vec![2, 4, 5, 3, 5, 0]);
        assert_eq!(b.src_mask, vec![true, true, true, true, true, false]);
        // Decoder input rows start with the *target* language tag.
        assert_eq!(&b.dec_in[0..4], &[3, 6, 7, 8]);
        assert_eq!(&b.dec_in[4..8], &[2, 4, 5, 0]);
        // Targets are the sentence shifted out, closed with <eos>.
        assert_eq!(&b.dec_out[0..4], &[6, 7, 8, 1]);
        assert_eq!(&b.dec_out[4..8], &[4, 5, 1, 0]);
        assert_eq!(b.tgt_mask, vec![true, true, true, true, true, true, true, false]);
    }

    #[test]
    fn packing_strips_exactly_the_padded_positions() {
        let v = test_vocab();
        let pairs = vec![
            pair("en", "xa", &[4, 5], &[6, 7, 8], 2),
            pair("xa", "en", &[5], &[4, 5], 2),
        ];
        let b = Batch::new(pairs, &v).unwrap();
        let (src, segs) = b.packed_src();
        assert_eq!(src, vec![2, 4, 5, 3, 5]);
        assert_eq!(segs, vec![(0, 3), (3, 2)]);
        let dec = b.packed_dec();
        assert_eq!(dec.input, vec![3, 6, 7, 8, 2, 4, 5]);
        assert_eq!(dec.output, vec![6, 7, 8, 1, 4, 5, 1]);
        assert_eq!(dec.segs, vec![(0, 4), (4, 3)]);
    }

    #[test]
    fn batching_groups_by_centric_length() {
        let v = test_vocab();
        // Centric lengths 4, 4, 7 with room for all three in one batch:
        // grouping must still produce {4,4} and {7}.
        let pairs = vec![
            pair("en", "xa", &[4, 5, 6, 7], &[6, 7, 8], 4),
            pair("en", "xa", &[5, 6, 7, 8], &[6, 7], 4),
            pair("en", "xa", &[4, 4, 4, 4, 4, 4, 4], &[5, 5, 5, 5, 5, 5, 5, 5], 7),
        ];
        let batches = make_batches(&pairs, &v, "en", 8, None).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 2);
        assert_eq!(batches[1].len(), 1);
        assert_eq!(batches[0].pairs[0].centric_len, 4);
        assert_eq!(batches[1].pairs[0].centric_len, 7);
    }

    #[test]
    fn batching_respects_batch_size_and_covers_every_pair() {
        let v = test_vocab();
        let pairs: Vec<SentencePair> =
            (0..10).map(|i| pair("en", "xa", &[4, 5, 6], &[4 + (i % 3), 5], 3)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = make_batches(&pairs, &v, "en", 4, Some(&mut rng)).unwrap();
        assert_eq!(batches.iter().map(Batch::len).sum::<usize>(), 10);
        assert!(batches.iter().all(|b| b.len() <= 4));
    }

    #[test]
    fn shuffled_batching_is_deterministic_in_the_seed() {
        let v = test_vocab();
        let pairs: Vec<SentencePair> = (0..20)
            .map(|i| pair("en", "xa", &[4 + (i % 4), 5, 6], &[4, 5 + (i % 3)], 3))
            .collect();
        let run = |seed: u64| -> Vec<Vec<u32>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_batches(&pairs, &v, "en", 3, Some(&mut rng))
                .unwrap()
                .iter()
                .map(|b| b.src_ids.clone())
                .collect()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6), "different seeds should reorder");
    }

    #[test]
    fn mismatched_centric_lengths_in_a_pair_are_rejected() {
        let v = test_vocab();
        // Source is centric with 2 tokens but the stored centric length says 3.
        let bad = vec![pair("en", "xa", &[4, 5], &[6, 7], 3)];
        assert!(make_batches(&bad, &v, "en", 4, None).is_err());
    }

    #[test]
    fn corpus_files_load_back_into_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = corpus::CorpusConfig {
            seed: 9,
            train_sentences: 25,
            valid_sentences: 5,
            test_sentences: 5,
            zeroshot_sentences: 5,
            ..corpus::CorpusConfig::default()
        };
        let built = corpus::build(&cfg).unwrap();
        built.write_dir(dir.path()).unwrap();

        let vocab = Vocab::load(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(vocab.len(), built.inventory.tokens.len());

        let pairs = load_pairs(dir.path(), "train", "en", "xa", &vocab).unwrap();
        assert_eq!(pairs.len(), 25);
        for p in &pairs {
            // Source side is centric here, so its length is the centric length.
            assert_eq!(p.src.len(), p.centric_len);
        }

        let zs = load_pairs(dir.path(), "zs", "xb", "xc", &vocab).unwrap();
        assert_eq!(zs.len(), 5);
        // Mixed directions batch together by centric length.
        let mut all = pairs;
        all.extend(load_pairs(dir.path(), "train", "xa", "en", &vocab).unwrap());
        let batches = make_batches(&all, &vocab, "en", 8, None).unwrap();
        for b in &batches {
            let l0 = b.pairs[0].src_centric_len("en");
            assert!(b.pairs.iter().all(|p| p.src_centric_len("en") == l0));
        }
    }
}
