//! Loss, metrics, optimizer, training loop and evaluation.

pub mod eval;
pub mod loss;
pub mod metrics;
pub mod optim;
mod trainer;

pub use eval::{
    evaluate, evaluate_segmenter, format_table, EvalReport, EvalRow, SampleOutcome, SampleRecord,
};
pub use loss::{seg_loss, SegLoss};
pub use metrics::{dice, iou};
pub use optim::{Adam, AdamConfig};
pub use trainer::{train, EpochRecord, TrainConfig, TrainHistory, IOU_LOSS_WEIGHT};
