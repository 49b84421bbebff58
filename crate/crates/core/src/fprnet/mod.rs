//! Candidate classification: dual pooling, the three 3D classifiers,
//! augmentation, training and ensembling.

mod augment;
mod model;
mod pool;
mod se;
mod train;

pub use augment::{
    central_block, extract_clf_patch, geometric_augment, random_mask_swap, rotate90, save_swap_manifest, translate, write_swap_manifest,
    ClfPatch, MaskSwapOutput, MaskSwapSpec, SwapRecord, SWAP_HEADER,
};
pub use model::{ClassifierConfig, ClfModel, Pooling, SeWiring, Variant};
pub use pool::{central_crop_start, central_pool_schedule, dual_pool, dual_pool_plan, dual_pool_tensor};
pub use se::SeGate;
pub use train::{
    accuracy, clf_train_step, cross_entropy_loss, ensemble_predict, train_classifier, ClfEpochRecord, ClfHistory, ClfTrainSpec,
    EnsembleWeights, CLF_HISTORY_HEADER,
};
