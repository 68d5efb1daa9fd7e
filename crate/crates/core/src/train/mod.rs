//! The three training stages.

mod focal;
mod logfile;
mod stages;

pub use focal::{focal_loss, focal_loss_from_logits};
pub use logfile::{parse_log, same_losses, TrainLog, TrainLogRecord};
pub use stages::{reconstruction_error, train_stage1, train_stage2, train_stage3, StageReport, SupervisedSample};
