//! The training stack: data batching, schedules, GAN pretraining,
//! adversarially-refined segmentation training, inference, and the
//! decision-threshold sweep.

pub mod data;
pub mod infer;
pub mod pretrain;
pub mod schedule;
pub mod seg;
pub mod sweep;

pub use data::{assemble_batch, epoch_batches, occlude, prepare_slices, split_subjects, SliceBatch};
pub use infer::{
    abnormality_maps, predict_labels, predict_probs, predict_with_threshold, threshold_labels,
    volume_to_tensor,
};
pub use pretrain::{pretrain_gan, random_mask, PretrainSummary};
pub use schedule::{lr_schedule, EarlyStopper, StopDecision};
pub use seg::{train_seg, TrainSummary};
pub use sweep::{
    detection_slices, score_slices_gated, score_slices_raw, threshold_sweep, SliceScore,
    SweepReport, SweepRow,
};
