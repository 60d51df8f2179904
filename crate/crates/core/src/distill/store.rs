//! Persistent top-K teacher distributions.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "KDST" | u32 version | u32 |V| | u32 K | [u8; 8] vocab fingerprint | u64 sentence count
//! per sentence: u64 index | u32 length T | T*K records of (u32 token_id, f32 prob)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::{topk_extract, SoftTargets};
use crate::corpus::{Fingerprint, ParallelCorpus};
use crate::model::{forward, ModelParams};
use crate::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"KDST";
pub const STORE_VERSION: u32 = 1;

/// Tolerance on per-position mass after the f32 round trip.
const READ_MASS_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetStore {
    pub fingerprint: Fingerprint,
    pub vocab_size: usize,
    pub top_k: usize,
    /// Not part of the binary format; the caller tracks it (file name, manifest).
    pub teacher_tag: String,
    pub sentences: BTreeMap<u64, SoftTargets>,
}

impl SoftTargetStore {
    pub fn new(fingerprint: Fingerprint, vocab_size: usize, top_k: usize, teacher_tag: &str) -> Self {
        SoftTargetStore {
            fingerprint,
            vocab_size,
            top_k,
            teacher_tag: teacher_tag.to_string(),
            sentences: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<&SoftTargets> {
        self.sentences.get(&index)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.top_k as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.0);
        out.extend_from_slice(&(self.sentences.len() as u64).to_le_bytes());
        for (&index, targets) in &self.sentences {
            out.extend_from_slice(&index.to_le_bytes());
            out.extend_from_slice(&(targets.len() as u32).to_le_bytes());
            for (j, pos) in targets.positions.iter().enumerate() {
                if pos.len() != self.top_k {
                    return Err(Error::Shape(format!(
                        "sentence {index} position {j} holds {} entries, store K is {}",
                        pos.len(),
                        self.top_k
                    )));
                }
                for &(tok, p) in pos {
                    out.extend_from_slice(&tok.to_le_bytes());
                    out.extend_from_slice(&(p as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses and validates a store: token ids below |V|, distinct ids per
    /// position and per-position mass of one.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::format("soft-target store", "bad magic"));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::format(
                "soft-target store",
                format!("unsupported version {version}"),
            ));
        }
        let vocab_size = r.u32()? as usize;
        let top_k = r.u32()? as usize;
        let mut fp = [0u8; 8];
        fp.copy_from_slice(r.take(8)?);
        let count = r.u64()?;
        let mut store = SoftTargetStore::new(Fingerprint(fp), vocab_size, top_k, "");
        for _ in 0..count {
            let index = r.u64()?;
            let len = r.u32()? as usize;
            let mut positions = Vec::with_capacity(len);
            for j in 0..len {
                let mut pos = Vec::with_capacity(top_k);
                for _ in 0..top_k {
                    let tok = r.u32()?;
                    let p = f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64;
                    if tok as usize >= vocab_size || !(p >= 0.0 && p.is_finite()) {
                        return Err(Error::format(
                            "soft-target store",
                            format!("sentence {index} position {j}: bad record ({tok}, {p})"),
                        ));
                    }
                    if pos.iter().any(|&(t, _)| t == tok) {
                        return Err(Error::format(
                            "soft-target store",
                            format!("sentence {index} position {j}: repeated token {tok}"),
                        ));
                    }
                    pos.push((tok, p));
                }
                let mass: f64 = pos.iter().map(|e| e.1).sum();
                if (mass - 1.0).abs() > READ_MASS_TOLERANCE {
                    return Err(Error::format(
                        "soft-target store",
                        format!("sentence {index} position {j}: mass {mass}"),
                    ));
                }
                positions.push(pos);
            }
            if store
                .sentences
                .insert(index, SoftTargets { positions })
                .is_some()
            {
                return Err(Error::format(
                    "soft-target store",
                    format!("duplicate sentence {index}"),
                ));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("soft-target store", "trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, teacher_tag: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut store = Self::from_bytes(&bytes)?;
        store.teacher_tag = teacher_tag.to_string();
        Ok(store)
    }

    /// Loads a store and rejects it unless it was built under `expected`.
    pub fn load_checked(path: &Path, teacher_tag: &str, expected: Fingerprint) -> Result<Self> {
        let store = Self::load(path, teacher_tag)?;
        expected.check(store.fingerprint)?;
        Ok(store)
    }

    /// Confirms the store covers `corpus` position for position.
    pub fn check_covers(&self, corpus: &ParallelCorpus) -> Result<()> {
        for (i, pair) in corpus.pairs.iter().enumerate() {
            let targets = self.get(i as u64).ok_or_else(|| {
                Error::Config(format!(
                    "store for {:?} has no entry for sentence {i}",
                    self.teacher_tag
                ))
            })?;
            if targets.len() != pair.target_positions() {
                return Err(Error::Config(format!(
                    "store for {:?}: sentence {i} has {} positions, expected {}",
                    self.teacher_tag,
                    targets.len(),
                    pair.target_positions()
                )));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format("soft-target store", "truncated file"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Runs the teacher under teacher forcing on every pair of `corpus` and keeps the
/// top-`k` distribution at each target position, indexed by sentence position.
pub fn build_soft_target_store(
    teacher: &ModelParams,
    corpus: &ParallelCorpus,
    k: usize,
    fingerprint: Fingerprint,
    teacher_tag: &str,
) -> Result<SoftTargetStore> {
    let vocab = teacher.config().vocab_size;
    if k == 0 || k > vocab {
        return Err(Error::Config(format!("top_k {k} must lie in 1..={vocab}")));
    }
    let sentences: Vec<(u64, SoftTargets)> = corpus
        .pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let dists = forward(teacher, &pair.source, &pair.decoder_target());
            let positions = dists.iter().map(|d| topk_extract(d, k)).collect();
            (i as u64, SoftTargets { positions })
        })
        .collect();
    let mut store = SoftTargetStore::new(fingerprint, vocab, k, teacher_tag);
    store.sentences.extend(sentences);
    Ok(store)
}
