//! The registration verifier network, its training loop and checkpoints.

pub mod attention;
mod checkpoint;
mod config;
mod folds;
pub mod layers;
mod network;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use config::{ModelConfig, TrainConfig};
pub use folds::{loso_split, Fold};
pub use layers::Params;
pub use network::{
    bce_with_logits, concat_channels, fuse, sigmoid, split_channels, BlockCache, ConvBlock,
    ForwardCache, Head, HeadCache, HeadCacheRef, Mode, PredictionOutput, VerifierModel,
};
pub use optim::AdamW;
pub use train::{evaluate_loss, train, write_history_csv, EpochRecord, TrainOutcome};
