//! Joint byte-pair encoding over whitespace-separated words.
//!
//! Words are split into characters with [`END_OF_WORD`] glued to the last
//! character, so segmentations can be undone by concatenation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::ParallelCorpus;
use crate::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
const HEADER: &str = "#version: 0.2";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), rank).is_some() {
                return Err(Error::format(
                    "BPE model",
                    format!("duplicate merge {} {}", m.0, m.1),
                ));
            }
        }
        Ok(BpeModel { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Segments whitespace-separated `text` into subword tokens.
    pub fn apply(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .flat_map(|w| self.apply_word(w))
            .collect()
    }

    /// Segments one word. At each step the adjacent pair with the lowest merge
    /// rank is merged everywhere in the word, which replays merges in learned order.
    pub fn apply_word(&self, word: &str) -> Vec<String> {
        let mut symbols = split_word(word);
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min();
            let Some(&rank) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_symbols(&symbols, left, right);
        }
        symbols
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.starts_with("#version") => {}
            _ => return Err(Error::format("BPE model", "missing version header")),
        }
        let merges = lines
            .enumerate()
            .map(|(i, line)| {
                let mut parts = line.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                        Ok((l.to_string(), r.to_string()))
                    }
                    _ => Err(Error::format(
                        "BPE model",
                        format!("line {}: expected \"left right\"", i + 2),
                    )),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        BpeModel::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn split_word(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

/// Merges non-overlapping occurrences of `(left, right)` scanning left to right.
fn merge_symbols(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Undoes segmentation: tokens are concatenated and every end-of-word marker
/// becomes a word boundary.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        match tok.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                out.push_str(stem);
                out.push(' ');
            }
            None => out.push_str(tok),
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Learns merges jointly over both sides of every corpus.
pub fn learn_bpe(corpora: &[&ParallelCorpus], num_merges: usize) -> BpeModel {
    let mut words: BTreeMap<String, u64> = BTreeMap::new();
    for c in corpora {
        for p in &c.pairs {
            for w in p
                .raw_source
                .split_whitespace()
                .chain(p.raw_target.split_whitespace())
            {
                *words.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    learn_bpe_from_words(&words, num_merges)
}

/// Greedy merge learning: the most frequent adjacent pair wins, ties go to
/// the lexicographically smallest `(left, right)`; stops once no pair occurs twice.
pub fn learn_bpe_from_words(word_counts: &BTreeMap<String, u64>, num_merges: usize) -> BpeModel {
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| (split_word(w), c))
        .collect();
    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += count;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        for (symbols, _) in words.iter_mut() {
            *symbols = merge_symbols(symbols, &l, &r);
        }
        merges.push((l, r));
    }
    BpeModel::from_merges(merges).expect("learned merges are unique")
}
