//! Post-training quantization for small vision transformers with
//! mixed-granularity block reconstruction.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] provide the
//! numerics, [`quant`] the uniform affine quantizer, [`vit`] the model,
//! [`reconstruct`] the block-wise reconstruction engine, and [`harness`]
//! the data, training, checkpoint and ablation plumbing around it.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod quant;
pub mod reconstruct;
pub mod tensor;
pub mod vit;

pub use autodiff::{Gradients, RoundingMemo, Tape, Var};
pub use error::{Error, Result};
pub use quant::{Granularity, QuantParams, QuantizedTensor};
pub use reconstruct::{run_mgrq, LossBreakdown, ReconstructionConfig};
pub use tensor::Tensor;
pub use vit::{BitWidths, ModelConfig, ViTModel};
