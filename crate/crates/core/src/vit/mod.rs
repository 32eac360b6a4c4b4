//! Toy vision transformer: patch embedding, pre-norm encoder blocks,
//! mean pooling and a linear classifier head.

mod config;
pub mod forward;
mod params;
mod quantize;

pub use config::{BitWidths, ModelConfig};
pub use forward::{
    block_forward, embed_forward, extract_patches, forward_tail, head_forward, mlp_forward, msa_forward, ActObserver,
    BlockOutput, BlockSite, BoundBlock, BoundEmbed, BoundLinear, BoundModel, Site, TokenShape, Trace,
};
pub use params::{
    BlockActQuant, BlockParams, LayerNormParams, Linear, Mode, Param, ViTModel, BLOCK_LAYERS,
};
pub use quantize::{quantize_model, QuantizeOptions};
