//! Forward pass, exact reverse-mode gradient and greedy decoding.

use super::{Block, ModelParams};
use crate::corpus::{TokenId, BOS, EOS};
use crate::distill::{clamped_ln, position_weights, LossConfig, SoftTargets};
use crate::{Error, Result};

// out += M x, M is out.len() × x.len()
fn matvec_acc(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

// out += Mᵀ y, M is y.len() × out.len()
fn matvec_t_acc(out: &mut [f64], m: &[f64], y: &[f64]) {
    let cols = out.len();
    for (row, &yr) in m.chunks_exact(cols).zip(y) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

// G += a bᵀ
fn outer_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
    for (row, &ar) in g.chunks_exact_mut(b.len()).zip(a) {
        for (x, bc) in row.iter_mut().zip(b) {
            *x += ar * bc;
        }
    }
}

fn add_into(out: &mut [f64], x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

fn embedding(p: &ModelParams, table: Block, tok: TokenId) -> &[f64] {
    let e = p.config().embed_dim;
    let t = tok as usize;
    &p.block(table)[t * e..(t + 1) * e]
}

fn rnn_step(p: &ModelParams, whh: Block, whx: Block, bias: Block, h: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a = p.block(bias).to_vec();
    matvec_acc(&mut a, p.block(whh), h);
    matvec_acc(&mut a, p.block(whx), x);
    a.iter_mut().for_each(|v| *v = v.tanh());
    a
}

/// Encoder states `h_1..h_Lx`, starting from a zero state.
pub fn encode(p: &ModelParams, src: &[TokenId]) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; p.config().hidden_dim];
    src.iter()
        .map(|&x| {
            h = rnn_step(p, Block::EncWhh, Block::EncWhx, Block::EncBias, &h, embedding(p, Block::SrcEmbed, x));
            h.clone()
        })
        .collect()
}

fn decoder_init(p: &ModelParams, src: &[TokenId]) -> Vec<f64> {
    encode(p, src)
        .pop()
        .unwrap_or_else(|| vec![0.0; p.config().hidden_dim])
}

fn decoder_step(p: &ModelParams, h: &[f64], prev: TokenId) -> Vec<f64> {
    rnn_step(p, Block::DecWhh, Block::DecWhx, Block::DecBias, h, embedding(p, Block::TgtEmbed, prev))
}

fn output_dist(p: &ModelParams, h: &[f64]) -> Vec<f64> {
    let mut z = p.block(Block::OutBias).to_vec();
    matvec_acc(&mut z, p.block(Block::OutW), h);
    softmax_in_place(&mut z);
    z
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn argmax(d: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Teacher-forced output distributions. `tgt` starts with BOS; the result has
/// one distribution per following token.
pub fn forward(p: &ModelParams, src: &[TokenId], tgt: &[TokenId]) -> Vec<Vec<f64>> {
    let mut h = decoder_init(p, src);
    tgt.iter()
        .take(tgt.len().saturating_sub(1))
        .map(|&prev| {
            h = decoder_step(p, &h, prev);
            output_dist(p, &h)
        })
        .collect()
}

/// Position-wise mean of each model's teacher-forced distributions.
pub fn ensemble_forward(models: &[&ModelParams], src: &[TokenId], tgt: &[TokenId]) -> Vec<Vec<f64>> {
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for m in models {
        let d = forward(m, src, tgt);
        match acc.as_mut() {
            None => acc = Some(d),
            Some(a) => a.iter_mut().zip(&d).for_each(|(x, y)| add_into(x, y)),
        }
    }
    let mut acc = acc.unwrap_or_default();
    let n = models.len() as f64;
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    acc
}

/// Greedy decoding: argmax at each step (ties to the lowest id) until EOS,
/// which is included, or `max_len` tokens.
pub fn greedy_decode(p: &ModelParams, src: &[TokenId], max_len: usize) -> Vec<TokenId> {
    greedy_decode_ensemble(&[p], src, max_len)
}

/// Greedy decoding from the mean of the models' step distributions.
pub fn greedy_decode_ensemble(models: &[&ModelParams], src: &[TokenId], max_len: usize) -> Vec<TokenId> {
    let mut states: Vec<Vec<f64>> = models.iter().map(|m| decoder_init(m, src)).collect();
    let n = models.len() as f64;
    let mut out = Vec::new();
    let mut prev = BOS;
    while out.len() < max_len && !models.is_empty() {
        let mut mean: Vec<f64> = Vec::new();
        for (m, h) in models.iter().zip(states.iter_mut()) {
            *h = decoder_step(m, h, prev);
            let d = output_dist(m, h);
            if mean.is_empty() {
                mean = d;
            } else {
                add_into(&mut mean, &d);
            }
        }
        mean.iter_mut().for_each(|x| *x /= n);
        prev = argmax(&mean);
        out.push(prev);
        if prev == EOS {
            break;
        }
    }
    out
}

/// Loss and exact gradient of the λ-mixed loss for one sentence pair.
/// Without soft targets the teacher term is dropped (plain, possibly smoothed, NLL).
pub fn backward(
    p: &ModelParams,
    src: &[TokenId],
    tgt: &[TokenId],
    loss: &LossConfig,
    soft: Option<&SoftTargets>,
) -> Result<(ModelParams, f64)> {
    let cfg = *p.config();
    let (vocab, hidden) = (cfg.vocab_size, cfg.hidden_dim);
    let steps = tgt.len().saturating_sub(1);
    if let Some(s) = soft {
        if s.len() != steps {
            return Err(Error::Shape(format!(
                "{} soft-target positions for {steps} decoder steps",
                s.len()
            )));
        }
    }

    let enc = encode(p, src);
    let mut dec = vec![enc.last().cloned().unwrap_or_else(|| vec![0.0; hidden])];
    let mut dists = Vec::with_capacity(steps);
    for j in 0..steps {
        let h = decoder_step(p, &dec[j], tgt[j]);
        dists.push(output_dist(p, &h));
        dec.push(h);
    }

    let lambda = if soft.is_some() { loss.lambda } else { 0.0 };
    let mut g = ModelParams::zeros(cfg);
    let mut losses = vec![0.0; steps];
    let mut dh_next = vec![0.0; hidden];
    for j in (0..steps).rev() {
        let teacher = soft.map(|s| s.positions[j].as_slice());
        let w = position_weights(vocab, tgt[j + 1], loss.label_smoothing, lambda, teacher);
        let dist = &dists[j];
        losses[j] = -dist.iter().zip(&w).map(|(&pk, &wk)| wk * clamped_ln(pk)).sum::<f64>();
        let mass: f64 = w.iter().sum();
        let dz: Vec<f64> = dist.iter().zip(&w).map(|(pk, wk)| mass * pk - wk).collect();

        let h = &dec[j + 1];
        outer_acc(g.block_mut(Block::OutW), &dz, h);
        add_into(g.block_mut(Block::OutBias), &dz);
        let mut dh = std::mem::take(&mut dh_next);
        matvec_t_acc(&mut dh, p.block(Block::OutW), &dz);

        let da: Vec<f64> = dh.iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
        outer_acc(g.block_mut(Block::DecWhh), &da, &dec[j]);
        outer_acc(g.block_mut(Block::DecWhx), &da, embedding(p, Block::TgtEmbed, tgt[j]));
        add_into(g.block_mut(Block::DecBias), &da);
        let e = cfg.embed_dim;
        let row = tgt[j] as usize * e;
        matvec_t_acc(&mut g.block_mut(Block::TgtEmbed)[row..row + e], p.block(Block::DecWhx), &da);
        dh_next = vec![0.0; hidden];
        matvec_t_acc(&mut dh_next, p.block(Block::DecWhh), &da);
    }

    // dh_next now holds the gradient at the final encoder state
    let mut dh = dh_next;
    for t in (0..enc.len()).rev() {
        let h = &enc[t];
        let zero = vec![0.0; hidden];
        let h_prev = if t == 0 { &zero } else { &enc[t - 1] };
        let da: Vec<f64> = dh.iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
        outer_acc(g.block_mut(Block::EncWhh), &da, h_prev);
        outer_acc(g.block_mut(Block::EncWhx), &da, embedding(p, Block::SrcEmbed, src[t]));
        add_into(g.block_mut(Block::EncBias), &da);
        let e = cfg.embed_dim;
        let row = src[t] as usize * e;
        matvec_t_acc(&mut g.block_mut(Block::SrcEmbed)[row..row + e], p.block(Block::EncWhx), &da);
        dh = vec![0.0; hidden];
        matvec_t_acc(&mut dh, p.block(Block::EncWhh), &da);
    }

    Ok((g, losses.iter().sum()))
}
