//! Trainable feature network and its fine-tuning on slow responses.

pub mod adam;
pub mod features;
pub mod finetune;
pub mod loss;
pub mod net;

pub use adam::{AdamConfig, AdamState};
pub use features::{aligned_features, extract_features};
pub use finetune::{
    apply_checkpoint,
    finetune, load_checkpoint, save_checkpoint, select_epoch, Checkpoint, CheckpointMeta, EpochSelection, FeatureNorm,
    FineTuneConfig, FineTuneOutcome, Projection, Story, Trainable,
};
pub use loss::{corr_loss, spatial_corr_loss, LossKind, LossOutput};
pub use net::{BaseWeights, FeatureNet, FeatureNetConfig, LayerLora, LoraPair};
