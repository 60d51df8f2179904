//! Distillation losses and the top-K soft-target store.

mod loss;
mod store;

pub use loss::{
    clamped_ln, combined_loss, kd_loss, nll_loss, position_weights, topk_extract, LossConfig,
    SoftTargets, LOG_FLOOR,
};
pub use store::{build_soft_target_store, SoftTargetStore, STORE_MAGIC, STORE_VERSION};
