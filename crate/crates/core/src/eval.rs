//! Corpus BLEU and model evaluation.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, ParallelCorpus, Vocabulary};
use crate::model::{greedy_decode, greedy_decode_ensemble, ModelParams};
use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0 to 100.
    pub score: f64,
    /// Modified n-gram precisions in percent, orders 1..=max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-order (clipped matches, total hypothesis n-grams) for one sentence.
fn sentence_stats<T: Hash + Eq>(hyp: &[T], r: &[T], max_n: usize) -> Vec<(usize, usize)> {
    (1..=max_n)
        .map(|n| {
            let refs = ngram_counts(r, n);
            let hyps = ngram_counts(hyp, n);
            let matched = hyps
                .iter()
                .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
                .sum();
            (matched, hyp.len().saturating_sub(n - 1))
        })
        .collect()
}

/// Single-reference corpus BLEU without smoothing.
pub fn corpus_bleu<T: Hash + Eq + Sync>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<BleuScore> {
    corpus_bleu_smoothed(hyps, refs, max_n, false)
}

/// Corpus BLEU. With `add_one`, orders 2 and above add one to both the match
/// count and the total before the precision is taken.
pub fn corpus_bleu_smoothed<T: Hash + Eq + Sync>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
    add_one: bool,
) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() || max_n == 0 {
        return Err(Error::InvalidInput("BLEU needs at least one sentence and order 1".into()));
    }
    let per_sentence: Vec<Vec<(usize, usize)>> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| sentence_stats(h, r, max_n))
        .collect();
    let mut matched = vec![0.0; max_n];
    let mut total = vec![0.0; max_n];
    for stats in &per_sentence {
        for (n, (m, t)) in stats.iter().enumerate() {
            matched[n] += *m as f64;
            total[n] += *t as f64;
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();

    let mut precisions = vec![0.0; max_n];
    for n in 0..max_n {
        if add_one && n > 0 {
            matched[n] += 1.0;
            total[n] += 1.0;
        }
        if total[n] > 0.0 {
            precisions[n] = 100.0 * matched[n] / total[n];
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        // geometric mean of fractions so a perfect corpus scores exactly 100
        let mean_log = precisions.iter().map(|p| (p / 100.0).ln()).sum::<f64>() / max_n as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuScore { score, precisions, brevity_penalty, hyp_len, ref_len })
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Turns decoder output ids back into whitespace tokens.
pub fn postprocess(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    words(&detokenize(&vocab.decode(ids)))
}

fn score_outputs(outputs: Vec<Vec<String>>, test: &ParallelCorpus) -> Result<BleuScore> {
    let refs: Vec<Vec<String>> = test.pairs.iter().map(|p| words(&p.raw_target)).collect();
    corpus_bleu(&outputs, &refs, MAX_ORDER)
}

/// Greedy-decodes every source of `test`, undoes BPE and scores against the raw targets.
pub fn evaluate_model(m: &ModelParams, test: &ParallelCorpus, vocab: &Vocabulary) -> Result<BleuScore> {
    let max_len = m.config().max_decode_len;
    let outputs = test
        .pairs
        .par_iter()
        .map(|p| postprocess(&greedy_decode(m, &p.source, max_len), vocab))
        .collect();
    score_outputs(outputs, test)
}

/// As [`evaluate_model`], decoding from the mean of the models' distributions.
pub fn evaluate_ensemble(
    models: &[&ModelParams],
    test: &ParallelCorpus,
    vocab: &Vocabulary,
) -> Result<BleuScore> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidInput("empty ensemble".into()))?;
    for m in models {
        if m.config().vocab_size != first.config().vocab_size {
            return Err(Error::Shape("ensemble members disagree on vocabulary size".into()));
        }
    }
    let max_len = first.config().max_decode_len;
    let outputs = test
        .pairs
        .par_iter()
        .map(|p| postprocess(&greedy_decode_ensemble(models, &p.source, max_len), vocab))
        .collect();
    score_outputs(outputs, test)
}

/// Index of the highest mean BLEU, preferring the later checkpoint on ties.
pub fn rank_checkpoints(mean_bleu: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in mean_bleu.iter().enumerate() {
        if best.is_none_or(|b| s >= mean_bleu[b]) {
            best = Some(i);
        }
    }
    best
}
