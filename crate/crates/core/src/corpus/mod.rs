//! Parallel corpora: loading, length filtering and BPE encoding.

mod bpe;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

pub use bpe::{detokenize, learn_bpe, learn_bpe_from_words, BpeModel, END_OF_WORD};
pub use vocab::{build_vocab, Fingerprint, Vocabulary, BOS, EOS, PAD, RESERVED_TOKENS, UNK};

use crate::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub raw_source: String,
    pub raw_target: String,
}

impl SentencePair {
    /// A pair that has not been encoded yet.
    pub fn from_raw(raw_source: impl Into<String>, raw_target: impl Into<String>) -> Self {
        SentencePair {
            source: Vec::new(),
            target: Vec::new(),
            raw_source: raw_source.into(),
            raw_target: raw_target.into(),
        }
    }

    /// Decoder sequence used for teacher forcing: `BOS target EOS`.
    pub fn decoder_target(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.target.len() + 2);
        out.push(BOS);
        out.extend_from_slice(&self.target);
        out.push(EOS);
        out
    }

    /// Number of predicted positions under teacher forcing (target tokens plus EOS).
    pub fn target_positions(&self) -> usize {
        self.target.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParallelCorpus {
    pub domain_tag: String,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(domain_tag: impl Into<String>, pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus {
            domain_tag: domain_tag.into(),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[TokenId]> {
        self.pairs.iter().map(|p| p.source.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[TokenId]> {
        self.pairs.iter().map(|p| p.target.as_slice())
    }

    /// Encodes every pair with `bpe` and `vocab`, filling the token-id sides.
    pub fn encode(&self, bpe: &BpeModel, vocab: &Vocabulary) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .map(|p| SentencePair {
                source: vocab.encode(&bpe.apply(&p.raw_source)),
                target: vocab.encode(&bpe.apply(&p.raw_target)),
                raw_source: p.raw_source.clone(),
                raw_target: p.raw_target.clone(),
            })
            .collect();
        ParallelCorpus::new(self.domain_tag.clone(), pairs)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

/// Reads two line-aligned files into an unencoded corpus.
pub fn load_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    domain_tag: &str,
) -> Result<ParallelCorpus> {
    let src = read_lines(src_path.as_ref())?;
    let tgt = read_lines(tgt_path.as_ref())?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment {
            src_lines: src.len(),
            tgt_lines: tgt.len(),
        });
    }
    let pairs = src
        .into_iter()
        .zip(tgt)
        .map(|(s, t)| SentencePair::from_raw(s, t))
        .collect();
    Ok(ParallelCorpus::new(domain_tag, pairs))
}

/// Keeps pairs whose encoded sides are both non-empty, at most `max_len` tokens
/// long, and whose longer/shorter length ratio does not exceed `max_ratio`.
pub fn filter_corpus(c: &ParallelCorpus, max_len: usize, max_ratio: f64) -> ParallelCorpus {
    let pairs = c
        .pairs
        .iter()
        .filter(|p| keep_pair(p.source.len(), p.target.len(), max_len, max_ratio))
        .cloned()
        .collect();
    ParallelCorpus::new(c.domain_tag.clone(), pairs)
}

fn keep_pair(src_len: usize, tgt_len: usize, max_len: usize, max_ratio: f64) -> bool {
    if src_len == 0 || tgt_len == 0 || src_len > max_len || tgt_len > max_len {
        return false;
    }
    let (lo, hi) = (src_len.min(tgt_len) as f64, src_len.max(tgt_len) as f64);
    hi / lo <= max_ratio
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::File::create(&path)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        path
    }

    fn pair(src: usize, tgt: usize) -> SentencePair {
        SentencePair {
            source: vec![4; src],
            target: vec![5; tgt],
            ..Default::default()
        }
    }

    #[test]
    fn load_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "a.src", "one\ntwo\nthree\n");
        let t = write(dir.path(), "a.tgt", "un\ndeux\ntrois\n");
        let c = load_parallel(&s, &t, "toy").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.pairs[1].raw_source, "two");
        assert_eq!(c.pairs[2].raw_target, "trois");
        assert_eq!(c.domain_tag, "toy");
    }

    #[test]
    fn load_rejects_misaligned_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "a.src", "1\n2\n3\n4\n5\n");
        let t = write(dir.path(), "a.tgt", "1\n2\n3\n4\n");
        match load_parallel(&s, &t, "x") {
            Err(Error::Alignment {
                src_lines: 5,
                tgt_lines: 4,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "a.src", "");
        let t = write(dir.path(), "a.tgt", "");
        assert!(load_parallel(&s, &t, "x").unwrap().is_empty());
    }

    #[test]
    fn load_missing_file_is_io_error() {
        let err = load_parallel("/nonexistent/a", "/nonexistent/b", "x").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/a"));
    }

    #[test]
    fn filter_rules() {
        let c = ParallelCorpus::new(
            "t",
            vec![pair(251, 250), pair(10, 10), pair(4, 7), pair(2, 3), pair(0, 1)],
        );
        let kept = filter_corpus(&c, 250, 1.5);
        let lens: Vec<_> = kept
            .pairs
            .iter()
            .map(|p| (p.source.len(), p.target.len()))
            .collect();
        // 251 is too long, 7/4 = 1.75 > 1.5, 3/2 = 1.5 is kept, empty sides dropped
        assert_eq!(lens, vec![(10, 10), (2, 3)]);
    }

    #[test]
    fn decoder_target_wraps_bos_eos() {
        let p = SentencePair {
            target: vec![7, 8],
            ..Default::default()
        };
        assert_eq!(p.decoder_target(), vec![BOS, 7, 8, EOS]);
        assert_eq!(p.target_positions(), 3);
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(lens in prop::collection::vec((0usize..20, 0usize..20), 0..40),
                                max_len in 1usize..20, ratio in 1.0f64..3.0) {
            let c = ParallelCorpus::new("p", lens.iter().map(|&(s, t)| pair(s, t)).collect());
            let once = filter_corpus(&c, max_len, ratio);
            let twice = filter_corpus(&once, max_len, ratio);
            prop_assert_eq!(once, twice);
        }
    }
}
