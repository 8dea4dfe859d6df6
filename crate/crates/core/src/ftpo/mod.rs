//! Final-token preference optimization: dataset capture and the loss.

pub mod data;
pub mod eval;
pub mod loss;

pub use data::{capture_sample, read_dataset, regularize_dataset, write_dataset, DatasetError, FtpoSample, SampleSource};
pub use eval::{batch_eval, BatchReport, LogitProvider, MockLogitProvider};
pub use loss::{grad_total, nontarget_mse, pref_loss, target_mse, total_loss, FtpoInstance, FtpoLossParams, LossComponents};
