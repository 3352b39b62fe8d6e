//! Tiny transformer classifier, its component registry, snapshots and toy
//! masked-token pretraining.

mod component;
pub mod pretrain;
mod snapshot;
mod transformer;
pub mod vocab;

pub use component::{
    ComponentId, Kind, Scope, EMBED_POSITION, EMBED_TOKEN, HEAD_BIAS, HEAD_WEIGHT,
    LAYER_COMPONENTS,
};
pub use pretrain::{pretrain, PretrainConfig};
pub use snapshot::{Selector, Snapshot, SNAPSHOT_FORMAT, SNAPSHOT_VERSION};
pub use transformer::{Binder, Model, ModelConfig, Params};
