//! Cross-entropy-difference ranking of generic data and gradual finetuning on
//! a shrinking top-ranked subset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Fingerprint, ParallelCorpus, SentencePair};
use crate::lm::{train_ngram, NGramLM};
use crate::model::{train, ModelParams, TrainExample, TrainOutcome, TrainRun};
use crate::{Error, Result};

/// In-domain and generic language models on both sides.
#[derive(Debug, Clone)]
pub struct CedRanker {
    pub lm_in_src: NGramLM,
    pub lm_gen_src: NGramLM,
    pub lm_in_tgt: NGramLM,
    pub lm_gen_tgt: NGramLM,
    /// Per-word cross-entropy instead of total sentence cross-entropy.
    pub normalized: bool,
}

impl CedRanker {
    pub fn new(
        lm_in_src: NGramLM,
        lm_gen_src: NGramLM,
        lm_in_tgt: NGramLM,
        lm_gen_tgt: NGramLM,
        normalized: bool,
    ) -> Result<Self> {
        let fp = lm_in_src.fingerprint();
        for lm in [&lm_gen_src, &lm_in_tgt, &lm_gen_tgt] {
            lm.fingerprint().check(fp)?;
        }
        Ok(CedRanker { lm_in_src, lm_gen_src, lm_in_tgt, lm_gen_tgt, normalized })
    }

    /// Trains the four models from an in-domain and a generic corpus.
    pub fn train(
        in_domain: &ParallelCorpus,
        generic: &ParallelCorpus,
        order: usize,
        weights: &[f64],
        vocab_size: usize,
        fingerprint: Fingerprint,
        normalized: bool,
    ) -> Result<Self> {
        let lm = |it: Vec<&[u32]>| train_ngram(it, order, weights, vocab_size, fingerprint);
        CedRanker::new(
            lm(in_domain.sources().collect())?,
            lm(generic.sources().collect())?,
            lm(in_domain.targets().collect())?,
            lm(generic.targets().collect())?,
            normalized,
        )
    }

    /// `[H_I(src) − H_G(src)] + [H_I(tgt) − H_G(tgt)]`; lower is more in-domain.
    pub fn ced_score(&self, pair: &SentencePair) -> f64 {
        let h = |lm: &NGramLM, t: &[u32]| lm.cross_entropy(t, self.normalized);
        (h(&self.lm_in_src, &pair.source) - h(&self.lm_gen_src, &pair.source))
            + (h(&self.lm_in_tgt, &pair.target) - h(&self.lm_gen_tgt, &pair.target))
    }

    pub fn score_corpus(&self, g: &ParallelCorpus) -> Vec<f64> {
        g.pairs.par_iter().map(|p| self.ced_score(p)).collect()
    }

    /// Indices of `g` by ascending CED, ties by original index.
    pub fn rank_by_ced(&self, g: &ParallelCorpus) -> Vec<usize> {
        rank_scores(&self.score_corpus(g))
    }
}

/// Stable ascending argsort.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSchedule {
    /// Relative start size.
    pub alpha: f64,
    /// Fraction kept per `nu` epochs.
    pub beta: f64,
    pub nu: u32,
    pub generic_size: usize,
    /// Evaluate the exponent `(i − 1) / ν` with integer division, keeping the
    /// subset constant within each block of `ν` epochs.
    #[serde(default)]
    pub integer_exponent: bool,
}

impl SelectionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.nu == 0 {
            return Err(Error::Config("nu must be at least 1".into()));
        }
        Ok(())
    }

    /// `round(α·|G|·β^((i−1)/ν))`, rounded half up and floored at 1.
    pub fn selection_size(&self, epoch: usize) -> usize {
        assert!(epoch >= 1, "epochs are numbered from 1");
        let steps = (epoch - 1) as f64;
        let exponent = if self.integer_exponent {
            ((epoch - 1) / self.nu as usize) as f64
        } else {
            steps / f64::from(self.nu)
        };
        let n = self.alpha * self.generic_size as f64 * self.beta.powf(exponent);
        ((n + 0.5).floor() as usize).max(1)
    }
}

/// The first `n` pairs of `g` in ranked order. `n` larger than `g` is clamped.
pub fn select_subset(ranked: &[usize], g: &ParallelCorpus, n: usize) -> ParallelCorpus {
    if n > g.len() {
        log::warn!("selection size {n} exceeds generic corpus size {}; clamping", g.len());
    }
    let pairs = ranked.iter().take(n.min(g.len())).map(|&i| g.pairs[i].clone()).collect();
    ParallelCorpus::new(g.domain_tag.clone(), pairs)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub train: TrainOutcome,
    /// Generic subset size used in each epoch.
    pub subset_sizes: Vec<usize>,
}

/// Finetunes `base` for `run.cfg.epochs` epochs; epoch `i` sees all of `in_domain`
/// plus the `n(i)` best-ranked generic pairs. In-domain and generic examples form
/// separate batch groups.
pub fn dynamic_finetune(
    base: ModelParams,
    in_domain: &ParallelCorpus,
    generic: &ParallelCorpus,
    ranking: &[usize],
    schedule: &SelectionSchedule,
    run: &TrainRun,
) -> Result<FinetuneOutcome> {
    schedule.validate()?;
    if ranking.len() != generic.len() {
        return Err(Error::InvalidInput(format!(
            "ranking covers {} pairs, generic corpus has {}",
            ranking.len(),
            generic.len()
        )));
    }
    let subset_sizes: Vec<usize> = (1..=run.cfg.epochs)
        .map(|i| schedule.selection_size(i).min(generic.len()))
        .collect();
    let outcome = train(base, run, |epoch| {
        let mut ex: Vec<TrainExample> = in_domain
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| TrainExample {
                group: 0,
                index: i as u64,
                source: &p.source,
                target: p.decoder_target(),
                soft: None,
            })
            .collect();
        ex.extend(ranking[..subset_sizes[epoch - 1]].iter().map(|&i| {
            let p = &generic.pairs[i];
            TrainExample {
                group: 1,
                index: i as u64,
                source: &p.source,
                target: p.decoder_target(),
                soft: None,
            }
        }));
        ex
    })?;
    Ok(FinetuneOutcome { train: outcome, subset_sizes })
}
