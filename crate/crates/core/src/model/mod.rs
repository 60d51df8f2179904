//! A small tanh RNN encoder-decoder trained with hand-written backpropagation.
//!
//! All weights live in one flat `Vec<f64>`, so gradients, optimizer moments and
//! checkpoints share a single index space. Block order (row-major):
//! source embeddings `V×E`, target embeddings `V×E`, encoder `W_hh` `H×H`,
//! encoder `W_hx` `H×E`, encoder bias `H`, decoder `W_hh` `H×H`, decoder `W_hx` `H×E`,
//! decoder bias `H`, output projection `V×H`, output bias `V`.

mod checkpoint;
mod optim;
mod rnn;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{adam_step, noam_lr, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use rnn::{
    backward, encode, ensemble_forward, forward, greedy_decode, greedy_decode_ensemble,
};
pub use train::{
    train, DevSet, EpochRecord, FinalSelection, TrainConfig, TrainExample, TrainOutcome, TrainRun,
};

use crate::{Error, Result};

pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        max_decode_len: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim,
            hidden_dim,
            max_decode_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.max_decode_len < 2 {
            return Err(Error::Config("max_decode_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Same shapes, ignoring the seed.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        (self.vocab_size, self.embed_dim, self.hidden_dim)
            == (other.vocab_size, other.embed_dim, other.hidden_dim)
    }

    pub fn num_params(&self) -> usize {
        Block::ALL.iter().map(|b| b.len(self)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    SrcEmbed,
    TgtEmbed,
    EncWhh,
    EncWhx,
    EncBias,
    DecWhh,
    DecWhx,
    DecBias,
    OutW,
    OutBias,
}

impl Block {
    pub const ALL: [Block; 10] = [
        Block::SrcEmbed,
        Block::TgtEmbed,
        Block::EncWhh,
        Block::EncWhx,
        Block::EncBias,
        Block::DecWhh,
        Block::DecWhx,
        Block::DecBias,
        Block::OutW,
        Block::OutBias,
    ];

    /// (rows, cols)
    pub fn shape(self, c: &ModelConfig) -> (usize, usize) {
        let (v, e, h) = (c.vocab_size, c.embed_dim, c.hidden_dim);
        match self {
            Block::SrcEmbed | Block::TgtEmbed => (v, e),
            Block::EncWhh | Block::DecWhh => (h, h),
            Block::EncWhx | Block::DecWhx => (h, e),
            Block::EncBias | Block::DecBias => (h, 1),
            Block::OutW => (v, h),
            Block::OutBias => (v, 1),
        }
    }

    pub fn len(self, c: &ModelConfig) -> usize {
        let (r, k) = self.shape(c);
        r * k
    }

    fn offset(self, c: &ModelConfig) -> usize {
        Block::ALL
            .iter()
            .take_while(|&&b| b != self)
            .map(|b| b.len(c))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        ModelParams {
            config,
            data: vec![0.0; config.num_params()],
        }
    }

    pub fn from_vec(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        if data.len() != config.num_params() {
            return Err(Error::Shape(format!(
                "{} values for a model with {} parameters",
                data.len(),
                config.num_params()
            )));
        }
        Ok(ModelParams { config, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat view over every scalar parameter.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, b: Block) -> &[f64] {
        let off = b.offset(&self.config);
        &self.data[off..off + b.len(&self.config)]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let off = b.offset(&self.config);
        let len = b.len(&self.config);
        &mut self.data[off..off + len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Seeded uniform initialisation in `[-0.1, 0.1]`.
pub fn init_model(cfg: &ModelConfig) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = (0..cfg.num_params())
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    ModelParams { config: *cfg, data }
}

/// Coordinate-wise mean of checkpoints with identical shapes.
pub fn average_checkpoints(list: &[ModelParams]) -> Result<ModelParams> {
    let first = list
        .first()
        .ok_or_else(|| Error::InvalidInput("no checkpoints to average".into()))?;
    let mut sum = ModelParams::zeros(first.config);
    for p in list {
        if !p.config.same_shape(&first.config) {
            return Err(Error::Shape(format!(
                "cannot average {:?} with {:?}",
                p.config, first.config
            )));
        }
        sum.add_assign(p);
    }
    sum.scale(1.0 / list.len() as f64);
    Ok(sum)
}
