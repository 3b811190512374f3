//! The space-time transformer with object-aware attention.

pub mod config;
pub mod layers;
pub mod network;
pub mod objects;
pub mod params;

pub use config::{default_oam_layers, Aggregation, ModelConfig};
pub use network::{block_backward, block_forward, oam_block, prepare, vanilla_block, ForwardCache, Model, ObjectHint, PreparedVideo};
pub use objects::{add_identity, groups_from_affinity, pool_object_tokens, ObjectTokenSet, PoolGroup};
pub use params::{load_checkpoint, save_checkpoint, Params};
