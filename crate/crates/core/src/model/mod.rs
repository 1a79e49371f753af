//! Frozen backbone, entity-aware adapters, the aggregator and their
//! composition.

mod adapter;
mod aggregator;
mod backbone;
pub mod checkpoint;
mod composed;
mod config;
mod layers;
mod mask;
#[cfg(test)]
pub(crate) mod oracle;

pub use adapter::{AdapterLayer, AdapterTrace, DomainModule, EntityAwareAdapter};
pub use aggregator::{aggregate_feature_extractor, aggregate_finetune, aggregate_pretrain, Aggregator};
pub use backbone::Backbone;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use composed::{compose_adapters, Features, PicsoModel};
pub use config::{AdapterSignature, ModelConfig};
pub use layers::{attention_on_tape, masked_attention, AttentionOutput, TransformerLayer};
pub use mask::{entity_mask, MaskMatrix};
