//! Task learning and masked-consistency uncertainty training.
//!
//! The frozen network `f_theta` is trained on labelled source data. A second
//! network `f_phi` then segments unlabelled target images with and without
//! patch masking; pixels where its masked prediction disagrees with
//! `f_theta` are treated as likely errors. The confidence threshold `gamma`
//! is chosen so that the share of confident pixels equals the share of
//! consistent ones, and only confident pixels are pulled toward the sharpened
//! `f_theta` prediction.

mod losses;
mod train;

pub use losses::{
    compute_gamma, confidence_mask, gamma_match, hard_consistency_mask, masked_consistency_loss,
    masked_consistency_loss_batch, sharpen, sharpen_map, supervised_loss, supervised_loss_batch, GammaResult,
    LossGrad, LOG_CLAMP,
};
pub use train::{
    run_uncertainty_training, train_task, uncertainty_objective, uncertainty_train_step, BatchSampler,
    ConsistencyView, Sgd, StepOutcome, TaskConfig, TaskLogRow, TaskRun, UncertLogRow, UncertTrainConfig,
    UncertaintyRun,
};
