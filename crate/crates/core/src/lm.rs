//! Interpolated n-gram language models over token ids.
//!
//! Orders 1..=n are mixed with fixed weights (Jelinek-Mercer). The unigram
//! level is add-one smoothed over the observed support plus UNK and EOS, so
//! every conditional is a proper distribution. A higher order whose context was
//! never seen falls back to the next lower order's estimate. All logs are natural.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Fingerprint, TokenId, BOS, EOS, UNK};
use crate::{Error, Result};

type Counts = BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    order: usize,
    weights: Vec<f64>,
    vocab_size: usize,
    fingerprint: Fingerprint,
    counts: Counts,
    context_totals: BTreeMap<Vec<TokenId>, u64>,
    support: BTreeSet<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceScore {
    pub total_logprob: f64,
    pub num_tokens: usize,
}

impl SentenceScore {
    pub fn per_word_cross_entropy(&self) -> f64 {
        -self.total_logprob / self.num_tokens as f64
    }
}

/// Uniform interpolation weights `1/order`.
pub fn uniform_weights(order: usize) -> Vec<f64> {
    vec![1.0 / order as f64; order]
}

fn validate(order: usize, weights: &[f64]) -> Result<()> {
    if order == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    if weights.len() != order {
        return Err(Error::Config(format!(
            "{} interpolation weights for order {order}",
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "interpolation weights must be nonnegative and sum to 1, got {weights:?}"
        )));
    }
    Ok(())
}

/// Trains an `order`-gram model. Each sentence is left-padded with BOS and
/// terminated by EOS.
pub fn train_ngram<'a, I>(
    sentences: I,
    order: usize,
    weights: &[f64],
    vocab_size: usize,
    fingerprint: Fingerprint,
) -> Result<NGramLM>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    validate(order, weights)?;
    let mut lm = NGramLM {
        order,
        weights: weights.to_vec(),
        vocab_size,
        fingerprint,
        counts: Counts::new(),
        context_totals: BTreeMap::new(),
        support: BTreeSet::from([UNK, EOS]),
    };
    let mut any = false;
    for sentence in sentences {
        any = true;
        let padded = lm.pad(sentence);
        for i in (order - 1)..padded.len() {
            lm.add_occurrence(&padded[..i], padded[i]);
        }
    }
    if !any {
        return Err(Error::InvalidInput(
            "cannot train a language model on an empty corpus".into(),
        ));
    }
    Ok(lm)
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Tokens that receive their own probability mass; everything else is scored as UNK.
    pub fn support(&self) -> &BTreeSet<TokenId> {
        &self.support
    }

    fn pad(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        let mut padded = vec![BOS; self.order - 1];
        padded.extend_from_slice(tokens);
        padded.push(EOS);
        padded
    }

    /// Records one occurrence of `word` after `history`, at every order.
    pub fn add_occurrence(&mut self, history: &[TokenId], word: TokenId) {
        let max_ctx = (self.order - 1).min(history.len());
        for k in 0..=max_ctx {
            let ctx = history[history.len() - k..].to_vec();
            *self
                .counts
                .entry(ctx.clone())
                .or_default()
                .entry(word)
                .or_default() += 1;
            *self.context_totals.entry(ctx).or_default() += 1;
        }
        self.support.insert(word);
    }

    fn map_token(&self, t: TokenId) -> TokenId {
        if t == BOS || self.support.contains(&t) {
            t
        } else {
            UNK
        }
    }

    fn unigram(&self, word: TokenId) -> f64 {
        let total = self.context_totals.get(&Vec::new()).copied().unwrap_or(0);
        let count = self
            .counts
            .get(&Vec::new())
            .and_then(|m| m.get(&word))
            .copied()
            .unwrap_or(0);
        (count + 1) as f64 / (total + self.support.len() as u64) as f64
    }

    /// P(word | history). Only the last `order - 1` history tokens are used.
    pub fn prob(&self, history: &[TokenId], word: TokenId) -> f64 {
        let word = self.map_token(word);
        let keep = (self.order - 1).min(history.len());
        let ctx: Vec<TokenId> = history[history.len() - keep..]
            .iter()
            .map(|&t| self.map_token(t))
            .collect();
        let mut level = self.unigram(word);
        let mut p = self.weights[0] * level;
        for k in 1..self.order {
            if k <= ctx.len() {
                let c = &ctx[ctx.len() - k..];
                if let Some(&total) = self.context_totals.get(c) {
                    let n = self.counts[c].get(&word).copied().unwrap_or(0);
                    level = n as f64 / total as f64;
                }
            }
            p += self.weights[k] * level;
        }
        p
    }

    pub fn sentence_logprob(&self, tokens: &[TokenId]) -> SentenceScore {
        let padded = self.pad(tokens);
        let start = self.order - 1;
        let total_logprob = (start..padded.len())
            .map(|i| self.prob(&padded[..i], padded[i]).ln())
            .sum();
        SentenceScore {
            total_logprob,
            num_tokens: padded.len() - start,
        }
    }

    /// Per-word (`normalized`) or total cross-entropy of `tokens` in nats.
    pub fn cross_entropy(&self, tokens: &[TokenId], normalized: bool) -> f64 {
        let s = self.sentence_logprob(tokens);
        if normalized {
            s.per_word_cross_entropy()
        } else {
            -s.total_logprob
        }
    }

    /// Flat text format: a header line followed by `context-ids next-id count` lines.
    pub fn to_text(&self) -> String {
        let weights: Vec<String> = self.weights.iter().map(f64::to_string).collect();
        let mut out = format!(
            "order {}; weights {}; vocab_fingerprint {}; vocab_size {}\n",
            self.order,
            weights.join(" "),
            self.fingerprint,
            self.vocab_size
        );
        for (ctx, nexts) in &self.counts {
            for (next, count) in nexts {
                for t in ctx {
                    let _ = write!(out, "{t} ");
                }
                let _ = writeln!(out, "{next} {count}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("n-gram model", d);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut order = None;
        let mut weights = None;
        let mut fingerprint = None;
        let mut vocab_size = 0;
        for field in header.split(';').map(str::trim) {
            let (key, value) = field.split_once(' ').unwrap_or((field, ""));
            match key {
                "order" => order = value.parse::<usize>().ok(),
                "weights" => {
                    weights = value
                        .split_whitespace()
                        .map(str::parse::<f64>)
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .ok()
                }
                "vocab_fingerprint" => fingerprint = Some(Fingerprint::from_hex(value)?),
                "vocab_size" => {
                    vocab_size = value.parse().map_err(|_| bad("bad vocab_size".into()))?
                }
                other => return Err(bad(format!("unknown header field {other:?}"))),
            }
        }
        let (Some(order), Some(weights), Some(fingerprint)) = (order, weights, fingerprint) else {
            return Err(bad("header needs order, weights and vocab_fingerprint".into()));
        };
        validate(order, &weights)?;
        let mut lm = NGramLM {
            order,
            weights,
            vocab_size,
            fingerprint,
            counts: Counts::new(),
            context_totals: BTreeMap::new(),
            support: BTreeSet::from([UNK, EOS]),
        };
        for (i, line) in lines.enumerate() {
            let nums = line
                .split_whitespace()
                .map(str::parse::<u64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            if nums.len() < 2 || nums.len() > order + 1 {
                return Err(bad(format!("line {}: wrong field count", i + 2)));
            }
            let (ctx, rest) = nums.split_at(nums.len() - 2);
            let ctx: Vec<TokenId> = ctx.iter().map(|&t| t as TokenId).collect();
            let (next, count) = (rest[0] as TokenId, rest[1]);
            *lm.counts.entry(ctx.clone()).or_default().entry(next).or_default() += count;
            *lm.context_totals.entry(ctx).or_default() += count;
            lm.support.insert(next);
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
