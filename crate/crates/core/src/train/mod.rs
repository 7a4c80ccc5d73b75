//! Losses, optimizers and seeded multi-run training.

mod loss;
mod optim;
mod run;

pub use loss::{bce_from_logit, bce_loss, focusmil_loss, kl_rows_mean, KlScope, LossNodes};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use run::{
    batch_loss, carve_validation, epoch_log_csv, predict_bags, train_model, train_seed, write_epoch_log,
    EpochRow, RunRecord, TrainConfig, TrainError, EPOCH_LOG_HEADER,
};
