//! Mini-batch training loop shared by every stage.
//!
//! Batches are drawn from one group at a time (a domain, or the generic
//! subset) so a batch either carries soft targets or it does not. Epoch `e`
//! shuffles with a generator seeded from `(seed, e)`, which makes a run resumable
//! from any saved epoch with bit-identical results.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_optimizer, save_optimizer};
use super::{
    adam_step, average_checkpoints, backward, forward, load_checkpoint, noam_lr, save_checkpoint,
    AdamState, ModelParams,
};
use crate::corpus::{ParallelCorpus, TokenId, Vocabulary};
use crate::distill::{nll_loss, LossConfig, SoftTargets};
use crate::eval::evaluate_model;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalSelection {
    /// Parameters after the last epoch.
    Last,
    /// Mean of the last `average_last` checkpoints.
    AverageLast,
    /// Checkpoint with the lowest dev loss.
    BestDevLoss,
    /// Checkpoint with the highest mean dev BLEU; ties go to the later one.
    BestDevBleu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sentences per batch.
    pub batch_size: usize,
    /// Noam scale; the schedule uses the hidden size as model dimension.
    pub lr_scale: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    /// Global gradient-norm clip, 0 disables.
    pub max_grad_norm: f64,
    /// Save (and evaluate) every this many epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
    /// Stop after this many evaluations without dev-loss improvement, 0 disables.
    pub patience: usize,
    pub select: FinalSelection,
    pub average_last: usize,
    /// Accepted for compatibility with common configs; the model has no dropout.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr_scale: 2.0,
            warmup_steps: 100,
            label_smoothing: 0.1,
            max_grad_norm: 5.0,
            checkpoint_every: 1,
            patience: 5,
            select: FinalSelection::Last,
            average_last: 3,
            dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.select == FinalSelection::AverageLast && self.average_last == 0 {
            return Err(Error::Config("average_last must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training sentence. `target` is the decoder sequence `BOS … EOS`.
#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub group: u32,
    pub index: u64,
    pub source: &'a [TokenId],
    pub target: Vec<TokenId>,
    pub soft: Option<&'a SoftTargets>,
}

/// Held-out data used for checkpoint selection and early stopping.
#[derive(Debug, Clone, Copy)]
pub struct DevSet<'a> {
    pub corpora: &'a [&'a ParallelCorpus],
    /// Needed only for BLEU-based selection.
    pub vocab: Option<&'a Vocabulary>,
}

impl DevSet<'_> {
    /// Mean per-sentence NLL without smoothing.
    pub fn loss(&self, p: &ModelParams) -> f64 {
        let pairs: Vec<_> = self.corpora.iter().flat_map(|c| &c.pairs).collect();
        if pairs.is_empty() {
            return 0.0;
        }
        let total: f64 = pairs
            .par_iter()
            .map(|pair| {
                let tgt = pair.decoder_target();
                nll_loss(&forward(p, &pair.source, &tgt), &tgt[1..], 0.0).unwrap_or(f64::INFINITY)
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        total / pairs.len() as f64
    }

    /// Mean corpus BLEU over the dev corpora.
    pub fn bleu(&self, p: &ModelParams) -> Result<f64> {
        let vocab = self
            .vocab
            .ok_or_else(|| Error::Config("BLEU selection needs a vocabulary".into()))?;
        let mut sum = 0.0;
        for c in self.corpora {
            sum += evaluate_model(p, c, vocab)?.score;
        }
        Ok(sum / self.corpora.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    pub examples: usize,
    /// Mean training loss per sentence.
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_bleu: Option<f64>,
    /// SHA-256 over the epoch's batch sequence of `(group, index)` ids.
    pub batch_digest: String,
    pub checkpoint: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The parameters chosen by [`TrainConfig::select`].
    pub params: ModelParams,
    pub last: ModelParams,
    pub checkpoints: Vec<(usize, ModelParams)>,
    pub log: Vec<EpochRecord>,
    pub steps: u64,
    pub stopped_early: bool,
}

pub struct TrainRun<'a> {
    pub cfg: &'a TrainConfig,
    /// λ and top-K for examples that carry soft targets; label smoothing comes from `cfg`.
    pub loss: LossConfig,
    pub seed: u64,
    pub dev: Option<DevSet<'a>>,
    /// When set, checkpoints, optimizer state and the log are written here and
    /// an interrupted run resumes from the latest complete epoch.
    pub checkpoint_dir: Option<&'a Path>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

/// Groups examples, shuffles within each group, cuts batches and shuffles the batch order.
fn make_batches(examples: &[TrainExample], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = epoch_rng(seed, epoch);
    let mut groups: Vec<u32> = examples.iter().map(|e| e.group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut batches = Vec::new();
    for g in groups {
        let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].group == g).collect();
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

fn ckpt_path(dir: &Path, epoch: usize, ext: &str) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.{ext}"))
}

fn log_path(dir: &Path) -> PathBuf {
    dir.join("train_log.json")
}

fn write_log(dir: &Path, log: &[EpochRecord]) -> Result<()> {
    let path = log_path(dir);
    let text = serde_json::to_string_pretty(log).expect("log serialises");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

struct Resume {
    params: ModelParams,
    optimizer: AdamState,
    log: Vec<EpochRecord>,
    checkpoints: Vec<(usize, ModelParams)>,
}

fn try_resume(dir: &Path, init: &ModelParams) -> Result<Option<Resume>> {
    let Ok(text) = std::fs::read_to_string(log_path(dir)) else {
        return Ok(None);
    };
    let mut log: Vec<EpochRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::format("training log", e.to_string()))?;
    // latest epoch with a complete checkpoint on disk
    let Some(last) = log.iter().rev().find(|r| {
        r.checkpoint && ckpt_path(dir, r.epoch, "bin").exists() && ckpt_path(dir, r.epoch, "opt").exists()
    }) else {
        return Ok(None);
    };
    let epoch = last.epoch;
    log.retain(|r| r.epoch <= epoch);
    let params = load_checkpoint(&ckpt_path(dir, epoch, "bin"))?;
    if !params.config().same_shape(init.config()) {
        return Err(Error::Config(format!(
            "checkpoint in {} does not match the model configuration",
            dir.display()
        )));
    }
    let optimizer = load_optimizer(&ckpt_path(dir, epoch, "opt"))?;
    let mut checkpoints = Vec::new();
    for r in log.iter().filter(|r| r.checkpoint) {
        checkpoints.push((r.epoch, load_checkpoint(&ckpt_path(dir, r.epoch, "bin"))?));
    }
    Ok(Some(Resume { params, optimizer, log, checkpoints }))
}

fn should_stop(log: &[EpochRecord], patience: usize) -> bool {
    if patience == 0 {
        return false;
    }
    let evals: Vec<f64> = log.iter().filter_map(|r| r.dev_loss).collect();
    let Some(best_at) = evals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
    else {
        return false;
    };
    evals.len() - 1 - best_at >= patience
}

/// Trains from `init`. `epoch_data(e)` supplies the examples of epoch `e` (1-based).
pub fn train<'d>(
    init: ModelParams,
    run: &TrainRun,
    mut epoch_data: impl FnMut(usize) -> Vec<TrainExample<'d>>,
) -> Result<TrainOutcome> {
    let cfg = run.cfg;
    cfg.validate()?;
    let model_dim = init.config().hidden_dim;
    let loss_cfg = LossConfig {
        label_smoothing: cfg.label_smoothing,
        vocab_size: init.config().vocab_size,
        ..run.loss
    };

    let mut params = init.clone();
    let mut optimizer = AdamState::new(params.len());
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut checkpoints: Vec<(usize, ModelParams)> = Vec::new();
    if let Some(dir) = run.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(r) = try_resume(dir, &init)? {
            log::info!("resuming {} from epoch {}", dir.display(), r.log.last().map_or(0, |l| l.epoch));
            params = r.params;
            optimizer = r.optimizer;
            log = r.log;
            checkpoints = r.checkpoints;
        }
    }

    let start = log.last().map_or(1, |r| r.epoch + 1);
    let mut stopped_early = should_stop(&log, cfg.patience) && run.dev.is_some();
    for epoch in start..=cfg.epochs {
        if stopped_early {
            break;
        }
        let examples = epoch_data(epoch);
        let batches = make_batches(&examples, cfg.batch_size, run.seed, epoch);
        let mut digest = Sha256::new();
        let mut loss_sum = 0.0;
        for batch in &batches {
            for &i in batch {
                digest.update(examples[i].group.to_le_bytes());
                digest.update(examples[i].index.to_le_bytes());
            }
            digest.update(b";");
            let results: Vec<(ModelParams, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &examples[i];
                    backward(&params, ex.source, &ex.target, &loss_cfg, ex.soft)
                })
                .collect::<Result<_>>()?;
            let mut grad = ModelParams::zeros(*params.config());
            let mut batch_loss = 0.0;
            for (g, l) in &results {
                grad.add_assign(g);
                batch_loss += l;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, step {}",
                    optimizer.step + 1
                )));
            }
            loss_sum += batch_loss;
            grad.scale(1.0 / batch.len() as f64);
            if cfg.max_grad_norm > 0.0 {
                let norm = grad.l2_norm();
                if norm > cfg.max_grad_norm {
                    grad.scale(cfg.max_grad_norm / norm);
                }
            }
            let lr = noam_lr(optimizer.step + 1, cfg.warmup_steps, model_dim, cfg.lr_scale);
            adam_step(&mut params, &grad, &mut optimizer, lr)?;
        }

        let save = epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs;
        let (dev_loss, dev_bleu) = match (&run.dev, save) {
            (Some(dev), true) => {
                let bleu = if cfg.select == FinalSelection::BestDevBleu {
                    Some(dev.bleu(&params)?)
                } else {
                    None
                };
                (Some(dev.loss(&params)), bleu)
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            steps: optimizer.step,
            examples: examples.len(),
            train_loss: loss_sum / examples.len().max(1) as f64,
            dev_loss,
            dev_bleu,
            batch_digest: hex::encode(digest.finalize()),
            checkpoint: save,
        };
        log::debug!("epoch {epoch}: {record:?}");
        log.push(record);
        if save {
            checkpoints.push((epoch, params.clone()));
            if let Some(dir) = run.checkpoint_dir {
                save_checkpoint(&ckpt_path(dir, epoch, "bin"), &params)?;
                save_optimizer(&ckpt_path(dir, epoch, "opt"), &optimizer)?;
                write_log(dir, &log)?;
            }
            if run.dev.is_some() && should_stop(&log, cfg.patience) {
                stopped_early = true;
            }
        }
    }

    let chosen = select_final(cfg, &init, &params, &checkpoints, &log)?;
    Ok(TrainOutcome {
        params: chosen,
        last: params,
        steps: optimizer.step,
        checkpoints,
        log,
        stopped_early,
    })
}

fn select_final(
    cfg: &TrainConfig,
    init: &ModelParams,
    last: &ModelParams,
    checkpoints: &[(usize, ModelParams)],
    log: &[EpochRecord],
) -> Result<ModelParams> {
    if checkpoints.is_empty() {
        return Ok(last.clone());
    }
    let find = |epoch: usize| {
        checkpoints
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, p)| p.clone())
    };
    Ok(match cfg.select {
        FinalSelection::Last => last.clone(),
        FinalSelection::AverageLast => {
            let k = cfg.average_last.min(checkpoints.len());
            let tail: Vec<ModelParams> = checkpoints[checkpoints.len() - k..]
                .iter()
                .map(|(_, p)| p.clone())
                .collect();
            average_checkpoints(&tail)?
        }
        FinalSelection::BestDevLoss => log
            .iter()
            .filter(|r| r.checkpoint)
            .filter_map(|r| r.dev_loss.map(|l| (r.epoch, l)))
            // strict improvement keeps the earliest best
            .fold(None, |best: Option<(usize, f64)>, (e, l)| match best {
                Some((_, b)) if l >= b => best,
                _ => Some((e, l)),
            })
            .and_then(|(e, _)| find(e))
            .unwrap_or_else(|| last.clone()),
        FinalSelection::BestDevBleu => {
            let scored: Vec<(usize, f64)> = log
                .iter()
                .filter(|r| r.checkpoint)
                .filter_map(|r| r.dev_bleu.map(|b| (r.epoch, b)))
                .collect();
            let scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
            match crate::eval::rank_checkpoints(&scores) {
                Some(i) => find(scored[i].0).unwrap_or_else(|| last.clone()),
                None => last.clone(),
            }
        }
    })
    .map(|p| if checkpoints.is_empty() { init.clone() } else { p })
}
