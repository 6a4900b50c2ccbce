//! The super-resolution network: global anchor prompting, coarse and fine
//! local prompting, cascade blocks, residual groups and the full model.

mod blocks;
mod config;
mod network;

pub use blocks::{AnchorPromptState, Cpb, Gapl, Lpl};
pub use config::{parse_kv, ModelConfig};
pub(crate) use config::parse;
pub use network::{tile_spans, RGB_MEAN, BlockTrace, PromptSr, ResidualGroup};
