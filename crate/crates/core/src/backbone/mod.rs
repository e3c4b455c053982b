//! Toy frozen transformer, tokenizer, geometry accounting, and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod geometry;
pub mod model;
pub mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{BackboneConfig, ConfigError, MorConfig};
pub use geometry::{count_trainable_params, GeometrySpec, ModuleKind, ProjectionSpec};
pub use model::{
    inject_mor, AdapterTensor, Backbone, ForwardTrace, ModelError, MorModel, ParamKey,
};
pub use tokenizer::Tokenizer;
