//! End-to-end orchestration: generic model, teachers finetuned with dynamic
//! data selection, soft-target stores, the distilled student and the two
//! baselines (mixed finetuning and teacher ensembling).
//!
//! Each stage reads its inputs from and writes its outputs to a run directory,
//! recording them in `manifest.json`, so stages can be rerun independently:
//!
//! ```text
//! config.toml              snapshot, written once
//! data/                    bpe.codes, vocab.txt, filtered raw and BPE text per split
//! select/<tag>/            ranking.txt, scores.txt, subsets/epoch_NNNN.txt
//! generic/ teachers/<tag>/ student/ baseline/
//!                          ckpt/ (resumable checkpoints and log), final.bin
//! stores/<tag>.kdst        top-K teacher distributions over the domain's training set
//! eval/report.json         BLEU per system and domain, Δ table
//! ```

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    DistillConfig, DomainPaths, ExperimentConfig, GenericPaths, LmConfig, ModelDims,
    PreprocessConfig, ScheduleConfig, StageTraining,
};
pub use manifest::{sha256_file, Artifact, RunManifest, StageRecord, MANIFEST_FILE};

use crate::corpus::{
    build_vocab, filter_corpus, learn_bpe, load_parallel, BpeModel, ParallelCorpus, Vocabulary,
};
use crate::distill::{build_soft_target_store, LossConfig, SoftTargetStore};
use crate::eval::{evaluate_ensemble, evaluate_model, BleuScore};
use crate::model::{
    init_model, load_checkpoint, save_checkpoint, train, DevSet, ModelConfig, ModelParams,
    TrainExample, TrainOutcome, TrainRun,
};
use crate::selection::{dynamic_finetune, rank_scores, CedRanker};
use crate::{Error, Result};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const REPORT_FILE: &str = "eval/report.json";

/// Derives an independent seed for a named sub-run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Debug, Clone)]
pub struct DomainData {
    pub tag: String,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

/// Encoded corpora plus the shared BPE model and vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
    pub generic_train: ParallelCorpus,
    pub generic_dev: Option<ParallelCorpus>,
    pub domains: Vec<DomainData>,
}

impl PreparedData {
    pub fn domain_trains(&self) -> Vec<&ParallelCorpus> {
        self.domains.iter().map(|d| &d.train).collect()
    }

    pub fn domain_devs(&self) -> Vec<&ParallelCorpus> {
        self.domains.iter().map(|d| &d.dev).collect()
    }
}

/// Training data for the student and the mixed-finetuning baseline.
#[derive(Debug, Clone, Copy)]
pub struct MixedData<'a> {
    pub domains: &'a [&'a ParallelCorpus],
    pub generic: &'a ParallelCorpus,
    /// Indices into `generic`.
    pub generic_subset: &'a [usize],
}

/// Trains on the union of all domain corpora and the generic subset. Domain
/// batches use the combined loss against their domain's store; generic batches
/// use NLL only. With λ = 0 the stores are never consulted.
pub fn distill_student(
    init: ModelParams,
    data: &MixedData,
    stores: Option<&[SoftTargetStore]>,
    run: &TrainRun,
) -> Result<TrainOutcome> {
    let use_stores = run.loss.lambda > 0.0;
    if use_stores {
        let stores = stores
            .ok_or_else(|| Error::Config("λ > 0 needs a soft-target store per domain".into()))?;
        if stores.len() != data.domains.len() {
            return Err(Error::Config(format!(
                "{} stores for {} domains",
                stores.len(),
                data.domains.len()
            )));
        }
        for (s, c) in stores.iter().zip(data.domains) {
            if s.vocab_size != init.config().vocab_size {
                return Err(Error::Config(format!(
                    "store {:?} has |V| = {}, model has {}",
                    s.teacher_tag,
                    s.vocab_size,
                    init.config().vocab_size
                )));
            }
            s.check_covers(c)?;
        }
    }
    let stores = if use_stores { stores } else { None };
    train(init, run, |_| {
        let mut ex = Vec::new();
        for (d, c) in data.domains.iter().enumerate() {
            ex.extend(c.pairs.iter().enumerate().map(|(i, p)| TrainExample {
                group: d as u32 + 1,
                index: i as u64,
                source: &p.source,
                target: p.decoder_target(),
                soft: stores.and_then(|s| s[d].get(i as u64)),
            }));
        }
        ex.extend(data.generic_subset.iter().map(|&i| {
            let p = &data.generic.pairs[i];
            TrainExample {
                group: 0,
                index: i as u64,
                source: &p.source,
                target: p.decoder_target(),
                soft: None,
            }
        }));
        ex
    })
}

/// Mixed finetuning: the student path with λ = 0.
pub fn run_baseline_finetune(init: ModelParams, data: &MixedData, run: &TrainRun) -> Result<TrainOutcome> {
    let loss = LossConfig { lambda: 0.0, ..run.loss };
    let run = TrainRun { loss, ..*run };
    distill_student(init, data, None, &run)
}

/// Test BLEU of the teachers' averaged distributions on every test corpus.
pub fn run_baseline_ensemble(
    teachers: &[&ModelParams],
    tests: &[&ParallelCorpus],
    vocab: &Vocabulary,
) -> Result<Vec<BleuScore>> {
    tests.iter().map(|t| evaluate_ensemble(teachers, t, vocab)).collect()
}

/// Mean over domains of `kd − ft`.
pub fn compute_delta(kd: &BTreeMap<String, f64>, ft: &BTreeMap<String, f64>) -> Result<f64> {
    if kd.is_empty() || !kd.keys().eq(ft.keys()) {
        return Err(Error::InvalidInput(format!(
            "Δ needs the same non-empty domain set, got {:?} and {:?}",
            kd.keys().collect::<Vec<_>>(),
            ft.keys().collect::<Vec<_>>()
        )));
    }
    Ok(kd.iter().map(|(k, v)| v - ft[k]).sum::<f64>() / kd.len() as f64)
}

/// Seeded random subset of `0..n` of size `round(fraction · n)`, ascending.
pub fn generic_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(((n as f64 * fraction) + 0.5).floor() as usize);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub per_domain: BTreeMap<String, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: Vec<String>,
    /// System name → domain tag → test BLEU. Teachers are scored on their own domain.
    pub systems: BTreeMap<String, BTreeMap<String, BleuScore>>,
    /// Student against the mixed-finetuning baseline.
    pub delta: Option<DeltaTable>,
}

impl EvalReport {
    pub fn scores(&self, system: &str) -> Option<BTreeMap<String, f64>> {
        self.systems
            .get(system)
            .map(|m| m.iter().map(|(k, b)| (k.clone(), b.score)).collect())
    }

    pub fn mean(&self, system: &str) -> Option<f64> {
        let s = self.scores(system)?;
        Some(s.values().sum::<f64>() / s.len().max(1) as f64)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn lines<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string() + "\n").collect()
}

/// One experiment bound to a run directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    dir: PathBuf,
}

impl Experiment {
    /// Validates the config and binds it to `dir`. The first call writes the config
    /// snapshot; later calls must present the same config.
    pub fn create(config: ExperimentConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snapshot = config.to_toml();
        let path = dir.join(CONFIG_SNAPSHOT);
        if path.exists() {
            let existing = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if existing != snapshot {
                return Err(Error::Config(format!(
                    "{} holds a run with a different configuration",
                    dir.display()
                )));
            }
        } else {
            write_text(&path, &snapshot)?;
        }
        let exp = Experiment { config, dir: dir.to_path_buf() };
        if RunManifest::load(dir)?.is_none() {
            RunManifest {
                config_snapshot: CONFIG_SNAPSHOT.into(),
                config_sha256: sha256_file(&path)?,
                ..Default::default()
            }
            .save(dir)?;
        }
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        RunManifest::load(&self.dir)?
            .ok_or_else(|| Error::Config(format!("no manifest in {}", self.dir.display())))
    }

    fn record(&self, stage: &str, rec: StageRecord, fingerprint: Option<String>) -> Result<()> {
        let mut m = self.manifest()?;
        if fingerprint.is_some() {
            m.vocab_fingerprint = fingerprint;
        }
        m.stages.insert(stage.to_owned(), rec);
        m.save(&self.dir)
    }

    fn artifacts(&self, rels: &[String]) -> Result<Vec<Artifact>> {
        rels.iter().map(|r| RunManifest::artifact(&self.dir, r)).collect()
    }

    fn require(&self, rel: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::Config(format!(
                "missing {}; run the {stage} stage first",
                p.display()
            )));
        }
        Ok(p)
    }

    // ---- preprocessing ----

    fn split_names(&self) -> Vec<(String, String)> {
        // (file stem, corpus tag)
        let mut out = vec![("generic.train".to_owned(), "generic".to_owned())];
        if self.config.generic.dev_src.is_some() {
            out.push(("generic.dev".into(), "generic".into()));
        }
        for d in &self.config.domains {
            for split in ["train", "dev", "test"] {
                out.push((format!("{}.{split}", d.tag), d.tag.clone()));
            }
        }
        out
    }

    /// Learns BPE and the vocabulary on the training corpora, filters training
    /// pairs by length and ratio, and writes everything under `data/`.
    pub fn preprocess(&self) -> Result<PreparedData> {
        let cfg = &self.config;
        cfg.check_inputs_exist()?;
        let g = &cfg.generic;
        let generic_train = load_parallel(&g.train_src, &g.train_tgt, "generic")?;
        let generic_dev = match (&g.dev_src, &g.dev_tgt) {
            (Some(s), Some(t)) => Some(load_parallel(s, t, "generic")?),
            _ => None,
        };
        let mut domains = Vec::new();
        for d in &cfg.domains {
            domains.push(DomainData {
                tag: d.tag.clone(),
                train: load_parallel(&d.train_src, &d.train_tgt, &d.tag)?,
                dev: load_parallel(&d.dev_src, &d.dev_tgt, &d.tag)?,
                test: load_parallel(&d.test_src, &d.test_tgt, &d.tag)?,
            });
        }
        let mut train_sets: Vec<&ParallelCorpus> = vec![&generic_train];
        train_sets.extend(domains.iter().map(|d| &d.train));
        let bpe = learn_bpe(&train_sets, cfg.preprocess.bpe_merges);
        let vocab = build_vocab(&train_sets, &bpe);

        let p = &cfg.preprocess;
        let prep_train = |c: &ParallelCorpus| filter_corpus(&c.encode(&bpe, &vocab), p.max_len, p.max_ratio);
        let data = PreparedData {
            generic_train: prep_train(&generic_train),
            generic_dev: generic_dev.map(|c| c.encode(&bpe, &vocab)),
            domains: domains
                .iter()
                .map(|d| DomainData {
                    tag: d.tag.clone(),
                    train: prep_train(&d.train),
                    dev: d.dev.encode(&bpe, &vocab),
                    test: d.test.encode(&bpe, &vocab),
                })
                .collect(),
            bpe,
            vocab,
        };
        if data.generic_train.is_empty() || data.domains.iter().any(|d| d.train.is_empty()) {
            return Err(Error::Config("a training corpus is empty after filtering".into()));
        }

        let mut written = vec!["data/bpe.codes".to_owned(), "data/vocab.txt".to_owned()];
        let data_dir = self.path("data");
        std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        data.bpe.save(&self.path("data/bpe.codes"))?;
        data.vocab.save(&self.path("data/vocab.txt"))?;
        let mut metrics = BTreeMap::new();
        for (stem, corpus) in self.split_names().iter().map(|(s, _)| s).zip(self.corpora(&data)) {
            let sides: [(&str, Vec<&str>); 2] = [
                ("src", corpus.pairs.iter().map(|p| p.raw_source.as_str()).collect()),
                ("tgt", corpus.pairs.iter().map(|p| p.raw_target.as_str()).collect()),
            ];
            for (side, raw) in sides {
                let raw_rel = format!("data/{stem}.{side}");
                write_text(&self.path(&raw_rel), &lines(&raw))?;
                let bpe_rel = format!("data/{stem}.bpe.{side}");
                let text = lines(raw.iter().map(|s| data.bpe.apply(s).join(" ")));
                write_text(&self.path(&bpe_rel), &text)?;
                written.extend([raw_rel, bpe_rel]);
            }
            metrics.insert(format!("{stem}.pairs"), corpus.len() as f64);
        }
        metrics.insert("vocab_size".into(), data.vocab.len() as f64);
        metrics.insert("bpe_merges".into(), data.bpe.num_merges() as f64);
        log::info!(
            "preprocess: |V| = {}, {} merges, {} generic pairs",
            data.vocab.len(),
            data.bpe.num_merges(),
            data.generic_train.len()
        );
        let rec = StageRecord { artifacts: self.artifacts(&written)?, metrics, ..Default::default() };
        self.record("preprocess", rec, Some(data.vocab.fingerprint().to_hex()))?;
        Ok(data)
    }

    fn corpora<'a>(&self, data: &'a PreparedData) -> Vec<&'a ParallelCorpus> {
        let mut out = vec![&data.generic_train];
        out.extend(&data.generic_dev);
        for d in &data.domains {
            out.extend([&d.train, &d.dev, &d.test]);
        }
        out
    }

    /// Reloads the preprocessed corpora from `data/`.
    pub fn load_prepared(&self) -> Result<PreparedData> {
        let bpe = BpeModel::load(&self.require("data/bpe.codes", "preprocess")?)?;
        let vocab = Vocabulary::load(&self.require("data/vocab.txt", "preprocess")?)?;
        let mut loaded = BTreeMap::new();
        for (stem, tag) in self.split_names() {
            let src = self.require(&format!("data/{stem}.src"), "preprocess")?;
            let tgt = self.require(&format!("data/{stem}.tgt"), "preprocess")?;
            loaded.insert(stem, load_parallel(src, tgt, &tag)?.encode(&bpe, &vocab));
        }
        let mut take = |stem: &str| loaded.remove(stem).expect("split listed above");
        let generic_train = take("generic.train");
        let generic_dev = self.config.generic.dev_src.as_ref().map(|_| take("generic.dev"));
        let domains = self
            .config
            .domains
            .iter()
            .map(|d| DomainData {
                tag: d.tag.clone(),
                train: take(&format!("{}.train", d.tag)),
                dev: take(&format!("{}.dev", d.tag)),
                test: take(&format!("{}.test", d.tag)),
            })
            .collect();
        Ok(PreparedData { bpe, vocab, generic_train, generic_dev, domains })
    }

    fn model_config(&self, vocab: &Vocabulary, dims: &ModelDims, seed: u64) -> ModelConfig {
        ModelConfig::new(vocab.len(), dims.embed_dim, dims.hidden_dim, dims.max_decode_len, seed)
    }

    // ---- selection ----

    /// Ranks the generic corpus by CED for every domain and writes the ranking
    /// and per-epoch subsets.
    pub fn select(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let data = self.load_prepared()?;
        let lm = &self.config.lm;
        let weights = lm.resolved_weights();
        let schedule = self.config.selection.with_size(data.generic_train.len());
        let mut written = Vec::new();
        let mut out = BTreeMap::new();
        for d in &data.domains {
            let ranker = CedRanker::train(
                &d.train,
                &data.generic_train,
                lm.order,
                &weights,
                data.vocab.len(),
                data.vocab.fingerprint(),
                lm.normalized,
            )?;
            let scores = ranker.score_corpus(&data.generic_train);
            let ranking = rank_scores(&scores);
            let base = format!("select/{}", d.tag);
            let files = [
                (format!("{base}/ranking.txt"), lines(&ranking)),
                (format!("{base}/scores.txt"), lines(scores.iter().map(|s| format!("{s:.17e}")))),
            ];
            for (r, text) in files {
                write_text(&self.path(&r), &text)?;
                written.push(r);
            }
            for (name, model) in [
                ("in_src", &ranker.lm_in_src),
                ("gen_src", &ranker.lm_gen_src),
                ("in_tgt", &ranker.lm_in_tgt),
                ("gen_tgt", &ranker.lm_gen_tgt),
            ] {
                let r = format!("{base}/lm_{name}.txt");
                model.save(&self.path(&r))?;
                written.push(r);
            }
            for epoch in 1..=self.config.train.teacher.epochs {
                let n = schedule.selection_size(epoch).min(ranking.len());
                let r = format!("{base}/subsets/epoch_{epoch:04}.txt");
                write_text(&self.path(&r), &lines(&ranking[..n]))?;
                written.push(r);
            }
            out.insert(d.tag.clone(), ranking);
        }
        let rec = StageRecord { artifacts: self.artifacts(&written)?, ..Default::default() };
        self.record("select", rec, None)?;
        Ok(out)
    }

    fn load_ranking(&self, tag: &str, generic_size: usize) -> Result<Vec<usize>> {
        let path = self.require(&format!("select/{tag}/ranking.txt"), "select")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ranking: Vec<usize> = text
            .lines()
            .map(|l| l.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("ranking", e.to_string()))?;
        let mut sorted = ranking.clone();
        sorted.sort_unstable();
        if sorted != (0..generic_size).collect::<Vec<_>>() {
            return Err(Error::format("ranking", format!("{} is not a permutation of the generic corpus", path.display())));
        }
        Ok(ranking)
    }

    // ---- training stages ----

    fn save_final(&self, rel_path: &str, p: &ModelParams) -> Result<()> {
        let path = self.path(rel_path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(&path, p)
    }

    fn check_divergence(&self, stage: &str, r: Result<TrainOutcome>) -> Result<TrainOutcome> {
        if let Err(Error::Divergence(msg)) = &r {
            let mut m = self.manifest()?;
            let rec = m.stages.entry(stage.to_owned()).or_default();
            rec.metrics.insert("diverged".into(), 1.0);
            m.save(&self.dir)?;
            log::error!("{stage} diverged: {msg}");
        }
        r
    }

    /// Trains the generic model from a seeded initialisation.
    pub fn train_generic(&self) -> Result<ModelParams> {
        let data = self.load_prepared()?;
        let cfg = &self.config;
        let init = init_model(&self.model_config(&data.vocab, &cfg.model, cfg.seed));
        let dev_corpora: Vec<&ParallelCorpus> = data.generic_dev.iter().collect();
        let ckpt = self.path("generic/ckpt");
        let run = TrainRun {
            cfg: &cfg.train.generic,
            loss: LossConfig::nll(0.0, data.vocab.len()),
            seed: derive_seed(cfg.seed, "generic"),
            dev: (!dev_corpora.is_empty()).then_some(DevSet { corpora: &dev_corpora, vocab: Some(&data.vocab) }),
            checkpoint_dir: Some(&ckpt),
        };
        let examples = |_| {
            data.generic_train
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
                .collect()
        };
        let out = self.check_divergence("generic", train(init, &run, examples))?;
        self.save_final("generic/final.bin", &out.params)?;
        let rec = StageRecord {
            artifacts: self.artifacts(&["generic/final.bin".to_owned()])?,
            logs: BTreeMap::from([("generic".to_owned(), out.log.clone())]),
            metrics: BTreeMap::from([("steps".to_owned(), out.steps as f64)]),
        };
        self.record("generic", rec, None)?;
        Ok(out.params)
    }

    pub fn load_generic(&self) -> Result<ModelParams> {
        load_checkpoint(&self.require("generic/final.bin", "generic training")?)
    }

    /// One teacher per domain, finetuned from the generic model with dynamic data
    /// selection. Teachers train in parallel and share no state.
    pub fn finetune_teachers(&self) -> Result<Vec<ModelParams>> {
        let data = self.load_prepared()?;
        let generic = self.load_generic()?;
        let cfg = &self.config;
        let schedule = cfg.selection.with_size(data.generic_train.len());
        let rankings = data
            .domains
            .iter()
            .map(|d| self.load_ranking(&d.tag, data.generic_train.len()))
            .collect::<Result<Vec<_>>>()?;
        let outcomes = data
            .domains
            .par_iter()
            .zip(&rankings)
            .map(|(d, ranking)| {
                let ckpt = self.path(&format!("teachers/{}/ckpt", d.tag));
                let dev = [&d.dev];
                let run = TrainRun {
                    cfg: &cfg.train.teacher,
                    loss: LossConfig::nll(0.0, data.vocab.len()),
                    seed: derive_seed(cfg.seed, &format!("teacher/{}", d.tag)),
                    dev: Some(DevSet { corpora: &dev, vocab: Some(&data.vocab) }),
                    checkpoint_dir: Some(&ckpt),
                };
                let out = dynamic_finetune(generic.clone(), &d.train, &data.generic_train, ranking, &schedule, &run);
                let out = self.check_divergence("teacher", out.map(|o| o.train))?;
                self.save_final(&format!("teachers/{}/final.bin", d.tag), &out.params)?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let finals: Vec<String> = data.domains.iter().map(|d| format!("teachers/{}/final.bin", d.tag)).collect();
        let rec = StageRecord {
            artifacts: self.artifacts(&finals)?,
            logs: data.domains.iter().zip(&outcomes).map(|(d, o)| (d.tag.clone(), o.log.clone())).collect(),
            ..Default::default()
        };
        self.record("teacher", rec, None)?;
        log::info!("teachers: {} trained", outcomes.len());
        Ok(outcomes.into_iter().map(|o| o.params).collect())
    }

    pub fn load_teachers(&self) -> Result<Vec<ModelParams>> {
        self.config
            .domains
            .iter()
            .map(|d| load_checkpoint(&self.require(&format!("teachers/{}/final.bin", d.tag), "teacher training")?))
            .collect()
    }

    fn store_rel(tag: &str) -> String {
        format!("stores/{tag}.kdst")
    }

    /// Runs every teacher over its domain's training set and writes the top-K store.
    pub fn distill_targets(&self) -> Result<Vec<SoftTargetStore>> {
        let data = self.load_prepared()?;
        let teachers = self.load_teachers()?;
        let fp = data.vocab.fingerprint();
        let mut stores = Vec::new();
        let mut written = Vec::new();
        for (d, t) in data.domains.iter().zip(&teachers) {
            let store = build_soft_target_store(t, &d.train, self.config.distill.top_k, fp, &d.tag)?;
            let r = Self::store_rel(&d.tag);
            let path = self.path(&r);
            std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
            store.save(&path)?;
            written.push(r);
            stores.push(store);
        }
        let rec = StageRecord { artifacts: self.artifacts(&written)?, ..Default::default() };
        self.record("distill-targets", rec, None)?;
        Ok(stores)
    }

    pub fn load_stores(&self, vocab: &Vocabulary) -> Result<Vec<SoftTargetStore>> {
        self.config
            .domains
            .iter()
            .map(|d| {
                let path = self.path(&Self::store_rel(&d.tag));
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "missing soft-target store {}; run distill-targets first",
                        path.display()
                    )));
                }
                SoftTargetStore::load_checked(&path, &d.tag, vocab.fingerprint())
            })
            .collect()
    }

    fn student_init(&self, data: &PreparedData) -> Result<ModelParams> {
        let generic = self.load_generic()?;
        match &self.config.student_model {
            Some(dims) => {
                let c = self.model_config(&data.vocab, dims, derive_seed(self.config.seed, "student-init"));
                if c.same_shape(generic.config()) {
                    Ok(generic)
                } else {
                    Ok(init_model(&c))
                }
            }
            None => Ok(generic),
        }
    }

    fn train_mixed(&self, stage: &str, lambda: f64) -> Result<ModelParams> {
        let data = self.load_prepared()?;
        let cfg = &self.config;
        let stores = if lambda > 0.0 { Some(self.load_stores(&data.vocab)?) } else { None };
        let init = self.student_init(&data)?;
        let subset = generic_subset(
            data.generic_train.len(),
            cfg.student_generic_fraction,
            derive_seed(cfg.seed, "generic-subset"),
        );
        let trains = data.domain_trains();
        let devs = data.domain_devs();
        let ckpt = self.path(&format!("{stage}/ckpt"));
        let run = TrainRun {
            cfg: &cfg.train.student,
            loss: LossConfig {
                lambda,
                label_smoothing: cfg.train.student.label_smoothing,
                top_k: cfg.distill.top_k,
                vocab_size: data.vocab.len(),
            },
            // the student and the baseline share a seed so they see identical batches
            seed: derive_seed(cfg.seed, "mixed"),
            dev: Some(DevSet { corpora: &devs, vocab: Some(&data.vocab) }),
            checkpoint_dir: Some(&ckpt),
        };
        let mixed = MixedData { domains: &trains, generic: &data.generic_train, generic_subset: &subset };
        let out = self.check_divergence(stage, distill_student(init, &mixed, stores.as_deref(), &run))?;
        let final_rel = format!("{stage}/final.bin");
        self.save_final(&final_rel, &out.params)?;
        let rec = StageRecord {
            artifacts: self.artifacts(&[final_rel])?,
            logs: BTreeMap::from([(stage.to_owned(), out.log.clone())]),
            metrics: BTreeMap::from([
                ("steps".to_owned(), out.steps as f64),
                ("lambda".to_owned(), lambda),
                ("generic_subset".to_owned(), subset.len() as f64),
            ]),
        };
        self.record(stage, rec, None)?;
        Ok(out.params)
    }

    /// The multi-domain student, trained from the stores with the configured λ.
    pub fn train_student(&self) -> Result<ModelParams> {
        self.train_mixed("student", self.config.distill.lambda)
    }

    /// Mixed finetuning on the same data and batches as the student, λ = 0.
    pub fn train_baseline(&self) -> Result<ModelParams> {
        self.train_mixed("baseline", 0.0)
    }

    // ---- evaluation ----

    /// Scores every trained system on the domain test sets and writes the report.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let data = self.load_prepared()?;
        let tests: Vec<&ParallelCorpus> = data.domains.iter().map(|d| &d.test).collect();
        let tags: Vec<String> = data.domains.iter().map(|d| d.tag.clone()).collect();
        let per_domain = |m: &ModelParams| -> Result<BTreeMap<String, BleuScore>> {
            tags.iter().zip(&tests).map(|(t, c)| Ok((t.clone(), evaluate_model(m, c, &data.vocab)?))).collect()
        };
        let mut systems = BTreeMap::new();
        systems.insert("generic".to_owned(), per_domain(&self.load_generic()?)?);
        let teacher_paths: Vec<PathBuf> =
            tags.iter().map(|t| self.path(&format!("teachers/{t}/final.bin"))).collect();
        if teacher_paths.iter().all(|p| p.exists()) {
            let teachers = self.load_teachers()?;
            let own = tags
                .iter()
                .zip(&teachers)
                .zip(&tests)
                .map(|((t, m), c)| Ok((t.clone(), evaluate_model(m, c, &data.vocab)?)))
                .collect::<Result<_>>()?;
            systems.insert("teacher".to_owned(), own);
            let refs: Vec<&ModelParams> = teachers.iter().collect();
            let ens = run_baseline_ensemble(&refs, &tests, &data.vocab)?;
            systems.insert("ensemble".to_owned(), tags.iter().cloned().zip(ens).collect());
        }
        for stage in ["student", "baseline"] {
            let p = self.path(&format!("{stage}/final.bin"));
            if p.exists() {
                systems.insert(stage.to_owned(), per_domain(&load_checkpoint(&p)?)?);
            }
        }
        let mut report = EvalReport { domains: tags.clone(), systems, delta: None };
        if let (Some(kd), Some(ft)) = (report.scores("student"), report.scores("baseline")) {
            let per_domain = kd.iter().map(|(k, v)| (k.clone(), v - ft[k])).collect();
            report.delta = Some(DeltaTable { per_domain, mean: compute_delta(&kd, &ft)? });
        }
        let text = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
        write_text(&self.path(REPORT_FILE), &text)?;
        let mut metrics = BTreeMap::new();
        for name in report.systems.keys() {
            metrics.insert(format!("{name}.mean_bleu"), report.mean(name).unwrap_or(0.0));
        }
        if let Some(d) = &report.delta {
            metrics.insert("delta".into(), d.mean);
        }
        let rec = StageRecord { artifacts: self.artifacts(&[REPORT_FILE.to_owned()])?, metrics, ..Default::default() };
        self.record("evaluate", rec, None)?;
        Ok(report)
    }

    pub fn load_report(&self) -> Result<EvalReport> {
        let path = self.require(REPORT_FILE, "evaluate")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("evaluation report", e.to_string()))
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.preprocess()?;
        self.select()?;
        self.train_generic()?;
        self.finetune_teachers()?;
        self.distill_targets()?;
        self.train_student()?;
        self.train_baseline()?;
        self.evaluate()
    }
}
