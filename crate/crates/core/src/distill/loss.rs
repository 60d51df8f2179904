use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::{Error, Result};

/// Floor applied to log-probabilities so a zero probability yields a finite loss.
pub const LOG_FLOOR: f64 = -745.0;

pub fn clamped_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the teacher term; 0 is plain NLL, 1 is pure distillation.
    pub lambda: f64,
    /// Label smoothing applied to the ground-truth term only.
    pub label_smoothing: f64,
    pub top_k: usize,
    pub vocab_size: usize,
}

impl LossConfig {
    pub fn nll(label_smoothing: f64, vocab_size: usize) -> Self {
        LossConfig {
            lambda: 0.0,
            label_smoothing,
            top_k: 1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.top_k == 0 || self.top_k > self.vocab_size {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Teacher distributions for one sentence: per target position, the retained
/// `(token, probability)` pairs in descending probability order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SoftTargets {
    pub positions: Vec<Vec<(TokenId, f64)>>,
}

impl SoftTargets {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Dense mixing weights `(1-λ)·q + λ·p_T` for one position, where `q` is the
/// (optionally smoothed) one-hot of `gold`. With no teacher the weights are `q`.
pub fn position_weights(
    vocab: usize,
    gold: TokenId,
    eps: f64,
    lambda: f64,
    teacher: Option<&[(TokenId, f64)]>,
) -> Vec<f64> {
    let (hit, miss) = if eps > 0.0 && vocab > 1 {
        (1.0 - eps, eps / (vocab - 1) as f64)
    } else {
        (1.0, 0.0)
    };
    let mut w = vec![miss; vocab];
    w[gold as usize] = hit;
    if let Some(teacher) = teacher {
        let mut t = vec![0.0; vocab];
        for &(k, p) in teacher {
            t[k as usize] += p;
        }
        for (wk, tk) in w.iter_mut().zip(t) {
            *wk = (1.0 - lambda) * *wk + lambda * tk;
        }
    }
    w
}

fn weighted_cross_entropy(dist: &[f64], weights: &[f64]) -> f64 {
    -dist
        .iter()
        .zip(weights)
        .map(|(&p, &w)| w * clamped_ln(p))
        .sum::<f64>()
}

fn check_alignment(dist: usize, other: usize, what: &str) -> Result<()> {
    if dist != other {
        return Err(Error::Shape(format!(
            "{dist} student positions vs {other} {what} positions"
        )));
    }
    Ok(())
}

/// Negative log-likelihood of `gold` (one token per position), with label smoothing `eps`.
pub fn nll_loss(dist: &[Vec<f64>], gold: &[TokenId], eps: f64) -> Result<f64> {
    check_alignment(dist.len(), gold.len(), "target")?;
    Ok(dist
        .iter()
        .zip(gold)
        .map(|(d, &y)| weighted_cross_entropy(d, &position_weights(d.len(), y, eps, 0.0, None)))
        .sum())
}

/// Teacher-weighted cross-entropy `-Σ_j Σ_k p_T(k) log p_S(k)` over the retained tokens.
pub fn kd_loss(student: &[Vec<f64>], teacher: &SoftTargets) -> Result<f64> {
    check_alignment(student.len(), teacher.len(), "teacher")?;
    Ok(student
        .iter()
        .zip(&teacher.positions)
        .map(|(d, t)| {
            // gold is irrelevant at lambda = 1
            weighted_cross_entropy(d, &position_weights(d.len(), 0, 0.0, 1.0, Some(t)))
        })
        .sum())
}

/// The λ-mixed loss. Without a teacher this is the NLL term alone.
pub fn combined_loss(
    student: &[Vec<f64>],
    teacher: Option<&SoftTargets>,
    gold: &[TokenId],
    cfg: &LossConfig,
) -> Result<f64> {
    check_alignment(student.len(), gold.len(), "target")?;
    if let Some(t) = teacher {
        check_alignment(student.len(), t.len(), "teacher")?;
    }
    Ok(student
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let t = teacher.map(|t| t.positions[j].as_slice());
            let w = position_weights(d.len(), gold[j], cfg.label_smoothing, cfg.lambda, t);
            weighted_cross_entropy(d, &w)
        })
        .sum())
}

/// The `k` most probable tokens (ties to the lowest id), renormalised to sum to one.
pub fn topk_extract(dist: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let mass: f64 = idx.iter().map(|&i| dist[i]).sum();
    idx.into_iter()
        .map(|i| (i as TokenId, dist[i] / mass))
        .collect()
}
