use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BpeModel, ParallelCorpus, TokenId};
use crate::{Error, Result};

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// First eight bytes of the SHA-256 of the newline-joined token list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Fingerprint(pub [u8; 8]);

impl Fingerprint {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::format("fingerprint", e.to_string()))?;
        let arr: [u8; 8] = bytes
            .try_into()
            .map_err(|_| Error::format("fingerprint", "expected 8 bytes"))?;
        Ok(Fingerprint(arr))
    }

    /// Errors with [`Error::FingerprintMismatch`] unless `self == other`.
    pub fn check(self, other: Fingerprint) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch {
                expected: self.to_hex(),
                found: other.to_hex(),
            })
        }
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Joint source/target vocabulary. Ids 0..=3 are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reserved tokens first, then by descending count, ties lexicographic.
    pub fn from_counts(counts: &BTreeMap<String, u64>) -> Self {
        let mut ranked: Vec<(&String, u64)> = counts
            .iter()
            .filter(|(t, _)| !RESERVED_TOKENS.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.clone()))
            .collect();
        Self::from_tokens(tokens).expect("counts have unique keys")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Maps tokens to ids; unknown tokens and literal reserved strings become UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| match self.id(t.as_ref()) {
                Some(id) if id > UNK => id,
                _ => UNK,
            })
            .collect()
    }

    /// Maps ids back to token strings, dropping PAD/BOS/EOS. Out-of-range ids become `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        Fingerprint(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()] != RESERVED_TOKENS
        {
            return Err(Error::format(
                "vocabulary",
                "first four lines must be the reserved tokens",
            ));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Builds the joint vocabulary over the BPE segmentation of both sides of all corpora.
pub fn build_vocab(corpora: &[&ParallelCorpus], bpe: &BpeModel) -> Vocabulary {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for c in corpora {
        for p in &c.pairs {
            for tok in bpe
                .apply(&p.raw_source)
                .into_iter()
                .chain(bpe.apply(&p.raw_target))
            {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    Vocabulary::from_counts(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentencePair;

    #[test]
    fn empty_vocab_has_reserved_only() {
        let v = build_vocab(&[], &BpeModel::default());
        assert_eq!(v.tokens(), RESERVED_TOKENS);
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let counts: BTreeMap<String, u64> = [("y", 1), ("x", 3), ("a", 1)]
            .iter()
            .map(|&(t, c)| (t.to_string(), c))
            .collect();
        let v = Vocabulary::from_counts(&counts);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("x"), Some(4));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("y"), Some(6));
    }

    #[test]
    fn toy_corpus_ids() {
        let c = ParallelCorpus::new("t", vec![SentencePair::from_raw("x x x y", "")]);
        let v = build_vocab(&[&c], &BpeModel::default());
        assert_eq!(v.id("x</w>"), Some(4));
        assert_eq!(v.id("y</w>"), Some(5));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn duplicated_corpus_gives_same_vocab() {
        let c = ParallelCorpus::new(
            "t",
            vec![SentencePair::from_raw("ab cd ab", "cd ef"), SentencePair::from_raw("gh", "ab")],
        );
        let bpe = BpeModel::default();
        let once = build_vocab(&[&c], &bpe);
        let twice = build_vocab(&[&c, &c], &bpe);
        assert_eq!(once, twice);
        assert_eq!(once.fingerprint(), twice.fingerprint());
    }

    #[test]
    fn encode_decode_and_unk() {
        let counts: BTreeMap<String, u64> =
            [("a", 2), ("b", 1)].iter().map(|&(t, c)| (t.to_string(), c)).collect();
        let v = Vocabulary::from_counts(&counts);
        assert_eq!(v.encode(&["a", "zz", "b", "<s>"]), vec![4, UNK, 5, UNK]);
        assert_eq!(v.decode(&[BOS, 4, UNK, 5, EOS, 99]), vec!["a", "<unk>", "b", "<unk>"]);
    }

    #[test]
    fn text_round_trip_and_validation() {
        let counts: BTreeMap<String, u64> =
            [("a", 2), ("b", 1)].iter().map(|&(t, c)| (t.to_string(), c)).collect();
        let v = Vocabulary::from_counts(&counts);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        let fp = v.fingerprint();
        assert_eq!(Fingerprint::from_hex(&fp.to_hex()).unwrap(), fp);
        assert!(fp.check(Fingerprint([0; 8])).is_err());
    }
}
