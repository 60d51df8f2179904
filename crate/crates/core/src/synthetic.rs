//! A seeded toy translation task with domain-dependent word substitutions.
//!
//! Sentences are two-letter words. Common words and domain marker words are
//! copied verbatim. The ambiguous words `na ne ni` are copied in generic text
//! but rewritten by each domain: domain 0 maps them to `ta te ti`, domain 1 to
//! `va ve vi`, and so on. Domain marker words tell the model which rule applies.
//! A share of the generic corpus is domain-like, so data selection has
//! something to find.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ParallelCorpus, SentencePair};
use crate::{Error, Result};

pub const MAX_DOMAINS: usize = 4;
const COMMON_CONSONANTS: [char; 7] = ['b', 'd', 'f', 'g', 'l', 'm', 'h'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
const MARKER_CONSONANTS: [char; MAX_DOMAINS] = ['k', 'p', 'r', 's'];
const MARKER_VOWELS: [char; 4] = ['a', 'e', 'i', 'o'];
const AMBIGUOUS: [&str; 3] = ["na", "ne", "ni"];
const REWRITE_CONSONANTS: [char; MAX_DOMAINS] = ['t', 'v', 'w', 'y'];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub train_per_domain: usize,
    pub dev_per_domain: usize,
    pub test_per_domain: usize,
    pub generic_train: usize,
    pub generic_dev: usize,
    /// Fraction of generic sentences that follow some domain's rule.
    pub generic_domain_like: f64,
    /// Per-token probability of an ambiguous word.
    pub ambiguous_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_domains: 2,
            train_per_domain: 500,
            dev_per_domain: 100,
            test_per_domain: 200,
            generic_train: 8000,
            generic_dev: 50,
            generic_domain_like: 0.15,
            ambiguous_rate: 0.15,
            min_len: 2,
            max_len: 4,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DomainSplits {
    pub tag: String,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub generic_train: ParallelCorpus,
    pub generic_dev: ParallelCorpus,
    pub domains: Vec<DomainSplits>,
}

pub fn domain_tag(d: usize) -> String {
    format!("dom{d}")
}

fn common_words() -> Vec<String> {
    COMMON_CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect()
}

fn marker_words(d: usize) -> Vec<String> {
    MARKER_VOWELS.iter().map(|v| format!("{}{v}", MARKER_CONSONANTS[d])).collect()
}

/// Target word for `word` under domain `d`, or plain copying when `d` is `None`.
pub fn translate_word(word: &str, d: Option<usize>) -> String {
    match (d, AMBIGUOUS.iter().position(|a| *a == word)) {
        (Some(d), Some(_)) => format!("{}{}", REWRITE_CONSONANTS[d], &word[1..]),
        _ => word.to_owned(),
    }
}

struct Generator {
    rng: ChaCha8Rng,
    common: Vec<String>,
    spec: SyntheticSpec,
}

impl Generator {
    fn sentence(&mut self, domain: Option<usize>) -> SentencePair {
        let len = self.rng.gen_range(self.spec.min_len..=self.spec.max_len);
        let mut src: Vec<String> = (0..len)
            .map(|_| {
                if self.rng.gen_bool(self.spec.ambiguous_rate) {
                    AMBIGUOUS.choose(&mut self.rng).unwrap().to_string()
                } else {
                    self.common.choose(&mut self.rng).unwrap().clone()
                }
            })
            .collect();
        if let Some(d) = domain {
            // one or two marker words at random positions
            let markers = marker_words(d);
            for _ in 0..self.rng.gen_range(1..=2) {
                let at = self.rng.gen_range(0..len);
                src[at] = markers.choose(&mut self.rng).unwrap().clone();
            }
        }
        let tgt: Vec<String> = src.iter().map(|w| translate_word(w, domain)).collect();
        SentencePair::from_raw(src.join(" "), tgt.join(" "))
    }

    fn corpus(&mut self, tag: &str, n: usize, domain: impl Fn(&mut ChaCha8Rng) -> Option<usize>) -> ParallelCorpus {
        let pairs = (0..n)
            .map(|_| {
                let d = domain(&mut self.rng);
                self.sentence(d)
            })
            .collect();
        ParallelCorpus::new(tag, pairs)
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.num_domains == 0 || spec.num_domains > MAX_DOMAINS {
        return Err(Error::Config(format!("num_domains must be 1..={MAX_DOMAINS}")));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config("sentence length range is empty".into()));
    }
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        common: common_words(),
        spec: spec.clone(),
    };
    let nd = spec.num_domains;
    let like = spec.generic_domain_like;
    let generic_domain = move |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(like) {
            Some(rng.gen_range(0..nd))
        } else {
            None
        }
    };
    let generic_train = g.corpus("generic", spec.generic_train, generic_domain);
    let generic_dev = g.corpus("generic", spec.generic_dev, generic_domain);
    let mut domains = Vec::new();
    for d in 0..nd {
        let tag = domain_tag(d);
        domains.push(DomainSplits {
            train: g.corpus(&tag, spec.train_per_domain, |_| Some(d)),
            dev: g.corpus(&tag, spec.dev_per_domain, |_| Some(d)),
            test: g.corpus(&tag, spec.test_per_domain, |_| Some(d)),
            tag,
        });
    }
    Ok(SyntheticData { generic_train, generic_dev, domains })
}

fn write_side(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.src` and `<stem>.tgt` under `dir`.
pub fn write_corpus(dir: &Path, stem: &str, c: &ParallelCorpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_side(&dir.join(format!("{stem}.src")), c.pairs.iter().map(|p| p.raw_source.clone()))?;
    write_side(&dir.join(format!("{stem}.tgt")), c.pairs.iter().map(|p| p.raw_target.clone()))
}

impl SyntheticData {
    /// Writes every split as `generic.train.{src,tgt}`, `dom0.dev.{src,tgt}` and so on.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_corpus(dir, "generic.train", &self.generic_train)?;
        write_corpus(dir, "generic.dev", &self.generic_dev)?;
        for d in &self.domains {
            write_corpus(dir, &format!("{}.train", d.tag), &d.train)?;
            write_corpus(dir, &format!("{}.dev", d.tag), &d.dev)?;
            write_corpus(dir, &format!("{}.test", d.tag), &d.test)?;
        }
        Ok(())
    }
}

/// An experiment config for the files written by [`SyntheticData::write`], with
/// paths relative to the config's own directory.
pub fn example_config(num_domains: usize) -> String {
    let mut out = String::from(
        r#"seed = 1
student_generic_fraction = 0.1

[generic]
train_src = "generic.train.src"
train_tgt = "generic.train.tgt"
dev_src = "generic.dev.src"
dev_tgt = "generic.dev.tgt"
"#,
    );
    for d in 0..num_domains {
        let t = domain_tag(d);
        out.push_str(&format!(
            r#"
[[domains]]
tag = "{t}"
train_src = "{t}.train.src"
train_tgt = "{t}.train.tgt"
dev_src = "{t}.dev.src"
dev_tgt = "{t}.dev.tgt"
test_src = "{t}.test.src"
test_tgt = "{t}.test.tgt"
"#
        ));
    }
    out.push_str(EXAMPLE_SETTINGS);
    out
}

const EXAMPLE_SETTINGS: &str = r#"
[preprocess]
bpe_merges = 200
max_len = 250
max_ratio = 1.5

[lm]
order = 3
normalized = true

[model]
embed_dim = 32
hidden_dim = 32
max_decode_len = 10

[distill]
lambda = 0.7
top_k = 8

[selection]
alpha = 0.1
beta = 0.7
nu = 1

[train.generic]
epochs = 60
batch_size = 16
lr_scale = 2.0
warmup_steps = 400
label_smoothing = 0.1
checkpoint_every = 1
patience = 0
select = "average_last"
average_last = 3

[train.teacher]
epochs = 20
batch_size = 16
lr_scale = 0.2
warmup_steps = 200
label_smoothing = 0.1
select = "best_dev_loss"

[train.student]
epochs = 30
batch_size = 16
lr_scale = 0.2
warmup_steps = 200
label_smoothing = 0.1
select = "best_dev_bleu"
"#;
