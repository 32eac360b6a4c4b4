use crate::error::{Error, Result};
use crate::quant::calibrate_per_channel;
use crate::tensor::Tensor;
use crate::vit::forward::{ActObserver, BlockSite, Site};
use crate::vit::params::{BlockActQuant, Mode, ViTModel};
use crate::vit::BitWidths;

/// Output-channel axis of a `[in, out]` weight.
const WEIGHT_AXIS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizeOptions {
    pub bits: BitWidths,
    /// When false only weights are quantized.
    pub activations: bool,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        Self {
            bits: BitWidths::default(),
            activations: true,
        }
    }
}

/// Builds the calibration-only quantized model: per-channel min/max weight
/// quantizers, and per-tensor activation quantizers whose ranges are the
/// min/max seen by the full-precision model over all calibration batches.
/// The returned model shares `fp`'s latent weights.
pub fn quantize_model(fp: &ViTModel, calibration: &[Tensor], options: QuantizeOptions) -> Result<ViTModel> {
    options.bits.validate()?;
    if fp.is_quantized() {
        return Err(Error::contract("quantize_model expects a full-precision model"));
    }
    let bits = options.bits;
    let mut q = fp.clone();
    q.config.bits = bits;
    q.mode = Mode::FakeQuantized;

    q.embed.weight_quant = Some(calibrate_per_channel(q.embed.weight.tensor(), bits.embed_weight, WEIGHT_AXIS)?);
    if let Some(pos) = &q.pos {
        q.pos_quant = Some(calibrate_per_channel(pos.tensor(), bits.embed_weight, WEIGHT_AXIS)?);
    }
    for block in &mut q.blocks {
        for lin in block.linears_mut() {
            lin.weight_quant = Some(calibrate_per_channel(lin.weight.tensor(), bits.block_weight, WEIGHT_AXIS)?);
        }
    }
    q.head.weight_quant = Some(calibrate_per_channel(q.head.weight.tensor(), bits.head_weight, WEIGHT_AXIS)?);

    if options.activations {
        if calibration.is_empty() {
            return Err(Error::contract("activation calibration needs at least one batch"));
        }
        let mut observer = ActObserver::default();
        for batch in calibration {
            fp.observe(batch, &mut observer)?;
        }
        q.embed_in_quant = Some(observer.params(Site::EmbedIn, bits.embed_act)?);
        for (l, block) in q.blocks.iter_mut().enumerate() {
            let p = |s| observer.params(Site::Block(l, s), bits.block_act);
            block.act_quant = Some(BlockActQuant {
                qkv_in: p(BlockSite::QkvIn)?,
                attn_probs: p(BlockSite::AttnProbs)?,
                proj_in: p(BlockSite::ProjIn)?,
                fc1_in: p(BlockSite::Fc1In)?,
                fc2_in: p(BlockSite::Fc2In)?,
            });
        }
        q.head_in_quant = Some(observer.params(Site::HeadIn, bits.head_act)?);
    }
    q.validate()?;
    Ok(q)
}
