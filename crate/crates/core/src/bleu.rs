//! Corpus-level BLEU-4 with effective-order smoothing.
//!
//! N-gram counts are pooled over the whole corpus and clipped against the
//! reference. Orders for which the candidate corpus has no n-grams at all
//! (every candidate shorter than `n`) are dropped from the geometric mean;
//! orders that exist but have zero matches contribute a floor precision of
//! 1e-9 instead of collapsing the logarithm. Scores are scaled to 0–100.

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;
const ZERO_MATCH_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    /// Clipped precision per n-gram order (1–4).
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts(sentence: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if sentence.len() >= n {
        for g in sentence.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Scores a corpus of candidate translations against one reference each.
pub fn corpus_bleu(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<BleuScore> {
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates against {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Data("nothing to score".into()));
    }

    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut candidate_len = 0usize;
    let mut reference_len = 0usize;

    for (cand, reference) in candidates.iter().zip(references) {
        candidate_len += cand.len();
        reference_len += reference.len();
        for n in 1..=MAX_ORDER {
            let cand_counts = ngram_counts(cand, n);
            if cand_counts.is_empty() {
                continue;
            }
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in &cand_counts {
                totals[n - 1] += count;
                matches[n - 1] += count.min(ref_counts.get(gram).unwrap_or(&0));
            }
        }
    }

    let mut precisions = [ZERO_MATCH_FLOOR; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut effective_orders = 0usize;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        precisions[n] = if matches[n] == 0 {
            ZERO_MATCH_FLOOR
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += precisions[n].ln();
        effective_orders += 1;
    }

    if candidate_len == 0 {
        return Ok(BleuScore {
            score: 0.0,
            precisions,
            brevity_penalty: 0.0,
            candidate_len,
            reference_len,
        });
    }

    let brevity_penalty = if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    let geo_mean = (log_sum / effective_orders.max(1) as f64).exp();
    Ok(BleuScore {
        score: 100.0 * brevity_penalty * geo_mean,
        precisions,
        brevity_penalty,
        candidate_len,
        reference_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(ids: &[u32]) -> Vec<u32> {
        ids.to_vec()
    }

    #[test]
    fn a_corpus_scored_against_itself_is_exactly_one_hundred() {
        let sents = vec![s(&[5, 6, 7, 8, 9]), s(&[10, 11, 12, 13]), s(&[14, 15, 16, 17, 18, 19])];
        let b = corpus_bleu(&sents, &sents).unwrap();
        assert_eq!(b.score, 100.0);
        assert_eq!(b.precisions, [1.0, 1.0, 1.0, 1.0]);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn disjoint_corpora_score_essentially_zero() {
        let cands = vec![s(&[1, 2, 3, 4, 5])];
        let refs = vec![s(&[6, 7, 8, 9, 10])];
        let b = corpus_bleu(&cands, &refs).unwrap();
        assert!(b.score <= 1e-6, "{}", b.score);
        assert!(b.score >= 0.0);
    }

    #[test]
    fn one_token_short_candidate_keeps_unit_precisions_and_pays_brevity() {
        // Candidate a b c d, reference a b c d e: every candidate n-gram
        // matches, so the whole score is the brevity penalty.
        let b = corpus_bleu(&[s(&[1, 2, 3, 4])], &[s(&[1, 2, 3, 4, 5])]).unwrap();
        assert_eq!(b.precisions, [1.0, 1.0, 1.0, 1.0]);
        let expected_bp = (1.0f64 - 5.0 / 4.0).exp();
        assert!((b.brevity_penalty - expected_bp).abs() < 1e-9);
        assert!((b.score - 100.0 * expected_bp).abs() < 1e-9);
    }

    #[test]
    fn repeated_words_are_clipped_by_the_reference_count() {
        // "the the the the" vs "the cat": one clipped unigram out of four.
        let b = corpus_bleu(&[s(&[7, 7, 7, 7])], &[s(&[7, 8])]).unwrap();
        assert_eq!(b.precisions[0], 0.25);
        // No bigram of the candidate appears in the reference.
        assert_eq!(b.precisions[1], ZERO_MATCH_FLOOR);
    }

    #[test]
    fn orders_longer_than_the_candidate_are_excluded() {
        // A perfect two-token translation should not be punished for having
        // no trigrams or four-grams.
        let b = corpus_bleu(&[s(&[3, 4])], &[s(&[3, 4])]).unwrap();
        assert_eq!(b.score, 100.0);
    }

    #[test]
    fn counts_pool_over_the_corpus_before_the_ratio() {
        // Pair 1 matches fully, pair 2 not at all: pooled unigram and bigram
        // precisions are both 1/2, higher orders never occur, lengths agree.
        let cands = vec![s(&[1, 2]), s(&[3, 4])];
        let refs = vec![s(&[1, 2]), s(&[8, 9])];
        let b = corpus_bleu(&cands, &refs).unwrap();
        assert_eq!(b.precisions[0], 0.5);
        assert_eq!(b.precisions[1], 0.5);
        assert!((b.score - 50.0).abs() < 1e-9);
    }

    #[test]
    fn empty_inputs_are_rejected_and_empty_candidates_score_zero() {
        assert!(corpus_bleu(&[], &[]).is_err());
        assert!(corpus_bleu(&[s(&[1])], &[]).is_err());
        let b = corpus_bleu(&[s(&[])], &[s(&[1, 2])]).unwrap();
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn reordering_the_sentence_pairs_leaves_the_score_bitwise_unchanged() {
        // All counting is integer arithmetic pooled over the corpus, so any
        // permutation of the pairs must give the identical floating result.
        let cands = vec![
            s(&[1, 2, 3, 4, 5]),
            s(&[6, 7, 8]),
            s(&[1, 2, 9, 9, 9, 9]),
            s(&[10]),
            s(&[3, 4, 5, 6, 7, 8, 1]),
        ];
        let refs = vec![
            s(&[1, 2, 3, 9, 5]),
            s(&[6, 7, 8, 2]),
            s(&[1, 2, 9]),
            s(&[10, 11]),
            s(&[3, 4, 5, 9, 7, 8]),
        ];
        let forward = corpus_bleu(&cands, &refs).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let pc: Vec<Vec<u32>> = perm.iter().map(|&i| cands[i].clone()).collect();
        let pr: Vec<Vec<u32>> = perm.iter().map(|&i| refs[i].clone()).collect();
        let shuffled = corpus_bleu(&pc, &pr).unwrap();
        assert_eq!(forward.score.to_bits(), shuffled.score.to_bits());
        assert_eq!(forward.brevity_penalty.to_bits(), shuffled.brevity_penalty.to_bits());
        for k in 0..4 {
            assert_eq!(forward.precisions[k].to_bits(), shuffled.precisions[k].to_bits());
        }
    }
}
