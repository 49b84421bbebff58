//! Slice segmentation network, Dice loss, patch extraction and training.

mod model;
mod patch;
mod train;

pub use model::{predict_batched, ResDenseBlock, SegModel, SegModelConfig, SliceSegmenter};
pub use patch::{extract_training_patch, fill_slab, TrainingPatch};
pub use train::{
    dice_loss, evaluate_loss, split_validation, train_segmentation, train_step, DicePenaltyConfig, EarlyStopping,
    EpochRecord, History, SegTrainSpec, HISTORY_HEADER,
};
