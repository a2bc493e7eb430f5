//! The FuXi-α network.

pub mod batch;
pub mod buckets;
pub mod forward;
pub mod params;
mod predict;

pub use batch::SequenceBatch;
pub use buckets::relative_time_bucket;
pub use forward::{ams_attention, ams_channels, block, embed_sequence, forward, hidden_states, mffn, single_stage, AmsChannels, AttnContext};
pub use params::{param_count, param_shapes, LayerParams, ModelParams};
pub use predict::{predict_next, score_last_positions};
