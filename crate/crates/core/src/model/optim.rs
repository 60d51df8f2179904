use super::ModelParams;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient is rejected before any
/// state is touched.
pub fn adam_step(p: &mut ModelParams, g: &ModelParams, s: &mut AdamState, lr: f64) -> Result<()> {
    if p.len() != g.len() || p.len() != s.m.len() {
        return Err(Error::Shape(format!(
            "params {}, gradient {}, optimizer {}",
            p.len(),
            g.len(),
            s.m.len()
        )));
    }
    if !g.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    s.step += 1;
    let bc1 = 1.0 - s.beta1.powi(s.step as i32);
    let bc2 = 1.0 - s.beta2.powi(s.step as i32);
    let params = p.as_mut_slice();
    for (i, &gi) in g.as_slice().iter().enumerate() {
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * gi;
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * gi * gi;
        let m_hat = s.m[i] / bc1;
        let v_hat = s.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + s.eps);
    }
    if !p.is_finite() {
        return Err(Error::Divergence(format!("non-finite parameters after step {}", s.step)));
    }
    Ok(())
}

/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`
pub fn noam_lr(step: u64, warmup: u64, model_dim: usize, scale: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    scale * (model_dim as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}
