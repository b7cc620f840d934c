//! Two-model co-training with supervised, cross-supervised and
//! density-aware contrastive terms.

mod checkpoint;
mod config;
mod embed;
mod losses;
mod model;
mod trainer;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, TrainConfig};
pub use embed::{records_compactness, test_embeddings, EmbeddingRecord};
pub use losses::{
    argmax_rows, cross_supervised_loss, effective_weights, one_hot, pseudo_labels, supervised_loss, warmup_lambda,
};
pub use model::{ModelOutput, ModelSpec, SegModel};
pub use trainer::{BatchBundle, StepStats, Trainer};
