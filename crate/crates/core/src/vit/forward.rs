//! Forward pass on a [`Tape`].
//!
//! Parameters are first bound onto the tape (as trainable leaves or
//! constants), with weight fake-quantization applied once at bind time in
//! quantized mode. The block and head functions then consume the bound
//! handles, so one binding can feed several forward paths and gradients
//! accumulate into the same leaves.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{fake_quant_var, QuantParams, RangeObserver};
use crate::tensor::Tensor;
use crate::vit::params::{BlockParams, Linear, ViTModel};
use crate::vit::ModelConfig;

/// Batch and token counts of a `[batch·tokens, D]` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenShape {
    pub batch: usize,
    pub tokens: usize,
}

impl TokenShape {
    pub fn rows(&self) -> usize {
        self.batch * self.tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockSite {
    QkvIn,
    AttnProbs,
    ProjIn,
    Fc1In,
    Fc2In,
}

impl BlockSite {
    pub const ALL: [BlockSite; 5] = [
        BlockSite::QkvIn,
        BlockSite::AttnProbs,
        BlockSite::ProjIn,
        BlockSite::Fc1In,
        BlockSite::Fc2In,
    ];
}

/// An activation quantization site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    EmbedIn,
    Block(usize, BlockSite),
    HeadIn,
}

/// Min/max per activation site, accumulated across forward passes.
#[derive(Clone, Debug, Default)]
pub struct ActObserver {
    ranges: BTreeMap<Site, RangeObserver>,
}

impl ActObserver {
    pub fn range(&self, site: Site) -> Option<(f64, f64)> {
        self.ranges.get(&site).and_then(|r| r.range())
    }

    pub fn params(&self, site: Site, bits: u8) -> Result<QuantParams> {
        self.ranges
            .get(&site)
            .ok_or_else(|| Error::Contract(format!("no observations for {site:?}")))?
            .params(bits)
    }

    fn observe(&mut self, site: Site, values: &[f64]) {
        self.ranges.entry(site).or_default().observe(values);
    }
}

/// Applies the activation quantizer at `site`, if any, after letting the
/// observer see the raw values.
fn activation(
    tape: &mut Tape,
    x: Var,
    site: Site,
    quant: Option<&QuantParams>,
    observer: &mut Option<&mut ActObserver>,
) -> Result<Var> {
    if let Some(obs) = observer.as_deref_mut() {
        obs.observe(site, tape.value(x).data());
    }
    match quant {
        Some(qp) => fake_quant_var(tape, x, qp),
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct BoundLinear {
    /// Leaf holding the latent weight.
    pub weight: Var,
    pub bias: Option<Var>,
    /// Weight as used in the product (fake-quantized in quantized mode).
    pub effective: Var,
}

fn leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

fn bind_weight(
    tape: &mut Tape,
    value: &Tensor,
    quant: Option<&QuantParams>,
    quantized: bool,
    trainable: bool,
    name: &str,
) -> Result<(Var, Var)> {
    let w = leaf(tape, value, trainable);
    let effective = if quantized {
        let qp = quant.ok_or_else(|| Error::Contract(format!("{name}: missing weight quantizer")))?;
        fake_quant_var(tape, w, qp)?
    } else {
        w
    };
    Ok((w, effective))
}

impl BoundLinear {
    fn bind(tape: &mut Tape, lin: &Linear, quantized: bool, trainable: bool, name: &str) -> Result<Self> {
        let (weight, effective) = bind_weight(
            tape,
            lin.weight.tensor(),
            lin.weight_quant.as_ref(),
            quantized,
            trainable,
            name,
        )?;
        let bias = lin.bias.as_ref().map(|b| leaf(tape, b.tensor(), trainable));
        Ok(Self {
            weight,
            bias,
            effective,
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.effective)?;
        match self.bias {
            Some(b) => tape.add_tiled(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1: (Var, Var),
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub proj: BoundLinear,
    pub ln2: (Var, Var),
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

impl BoundBlock {
    pub fn bind(tape: &mut Tape, block: &BlockParams, quantized: bool, trainable: bool) -> Result<Self> {
        let ln1 = (
            leaf(tape, block.ln1.gamma.tensor(), trainable),
            leaf(tape, block.ln1.beta.tensor(), trainable),
        );
        let q = BoundLinear::bind(tape, &block.q, quantized, trainable, "q")?;
        let k = BoundLinear::bind(tape, &block.k, quantized, trainable, "k")?;
        let v = BoundLinear::bind(tape, &block.v, quantized, trainable, "v")?;
        let proj = BoundLinear::bind(tape, &block.proj, quantized, trainable, "proj")?;
        let ln2 = (
            leaf(tape, block.ln2.gamma.tensor(), trainable),
            leaf(tape, block.ln2.beta.tensor(), trainable),
        );
        let fc1 = BoundLinear::bind(tape, &block.fc1, quantized, trainable, "fc1")?;
        let fc2 = BoundLinear::bind(tape, &block.fc2, quantized, trainable, "fc2")?;
        Ok(Self {
            ln1,
            q,
            k,
            v,
            proj,
            ln2,
            fc1,
            fc2,
        })
    }

    /// Leaves in the order of [`BlockParams::params_mut`].
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.ln1.0, self.ln1.1];
        for lin in [&self.q, &self.k, &self.v, &self.proj] {
            out.push(lin.weight);
            out.extend(lin.bias);
        }
        out.push(self.ln2.0);
        out.push(self.ln2.1);
        for lin in [&self.fc1, &self.fc2] {
            out.push(lin.weight);
            out.extend(lin.bias);
        }
        out
    }
}

/// Output of one encoder block plus the outputs of its six linear layers
/// (q, k, v, proj, fc1, fc2).
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub output: Var,
    pub layer_outputs: [Var; 6],
}

/// Multi-head self-attention on already-normalized tokens `x`. Returns the
/// attention output and the q, k, v and projection layer outputs.
#[allow(clippy::too_many_arguments)]
pub fn msa_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    block: &BlockParams,
    bound: &BoundBlock,
    index: usize,
    x: Var,
    shape: TokenShape,
    quantized: bool,
    mut observer: Option<&mut ActObserver>,
) -> Result<(Var, [Var; 4])> {
    let aq = if quantized { block.act_quant.as_ref() } else { None };
    let site = |s| Site::Block(index, s);
    let h = activation(tape, x, site(BlockSite::QkvIn), aq.map(|a| &a.qkv_in), &mut observer)?;
    let q = bound.q.apply(tape, h)?;
    let k = bound.k.apply(tape, h)?;
    let v = bound.v.apply(tape, h)?;

    let (b, n, heads) = (shape.batch, shape.tokens, config.heads);
    let qh = tape.split_heads(q, b, n, heads)?;
    let kh = tape.split_heads(k, b, n, heads)?;
    let vh = tape.split_heads(v, b, n, heads)?;
    let scores = tape.batch_matmul(qh, kh, true)?;
    let scores = tape.scale(scores, 1.0 / (config.head_dim() as f64).sqrt());
    let probs = tape.softmax_lastdim(scores);
    let probs = activation(tape, probs, site(BlockSite::AttnProbs), aq.map(|a| &a.attn_probs), &mut observer)?;
    let ctx = tape.batch_matmul(probs, vh, false)?;
    let ctx = tape.merge_heads(ctx, b, heads)?;
    let ctx = activation(tape, ctx, site(BlockSite::ProjIn), aq.map(|a| &a.proj_in), &mut observer)?;
    let out = bound.proj.apply(tape, ctx)?;
    Ok((out, [q, k, v, out]))
}

/// `GELU(x·W₁ + b₁)·W₂ + b₂` on already-normalized tokens. Returns the
/// output and the two layer outputs (fc1 before the GELU, fc2).
pub fn mlp_forward(
    tape: &mut Tape,
    block: &BlockParams,
    bound: &BoundBlock,
    index: usize,
    x: Var,
    quantized: bool,
    mut observer: Option<&mut ActObserver>,
) -> Result<(Var, [Var; 2])> {
    let aq = if quantized { block.act_quant.as_ref() } else { None };
    let site = |s| Site::Block(index, s);
    let h = activation(tape, x, site(BlockSite::Fc1In), aq.map(|a| &a.fc1_in), &mut observer)?;
    let f1 = bound.fc1.apply(tape, h)?;
    let g = tape.gelu(f1);
    let g = activation(tape, g, site(BlockSite::Fc2In), aq.map(|a| &a.fc2_in), &mut observer)?;
    let f2 = bound.fc2.apply(tape, g)?;
    Ok((f2, [f1, f2]))
}

/// One pre-norm encoder block:
/// `Y = X + MSA(LN(X))`, `X' = Y + MLP(LN(Y))`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    block: &BlockParams,
    bound: &BoundBlock,
    index: usize,
    x: Var,
    shape: TokenShape,
    quantized: bool,
    mut observer: Option<&mut ActObserver>,
) -> Result<BlockOutput> {
    let expected = [shape.rows(), config.embed_dim];
    if tape.shape(x) != expected {
        return Err(Error::shape("block_forward", tape.shape(x), &expected));
    }
    let h = tape.layer_norm(x, bound.ln1.0, bound.ln1.1, config.ln_eps)?;
    let (attn, [q, k, v, proj]) = msa_forward(
        tape,
        config,
        block,
        bound,
        index,
        h,
        shape,
        quantized,
        observer.as_deref_mut(),
    )?;
    let y = tape.add(x, attn)?;
    let h2 = tape.layer_norm(y, bound.ln2.0, bound.ln2.1, config.ln_eps)?;
    let (mlp, [fc1, fc2]) = mlp_forward(tape, block, bound, index, h2, quantized, observer)?;
    let output = tape.add(y, mlp)?;
    Ok(BlockOutput {
        output,
        layer_outputs: [q, k, v, proj, fc1, fc2],
    })
}

#[derive(Clone, Debug)]
pub struct BoundEmbed {
    pub linear: BoundLinear,
    pub pos: Option<(Var, Var)>,
}

impl BoundEmbed {
    pub fn bind(tape: &mut Tape, model: &ViTModel, trainable: bool) -> Result<Self> {
        let quantized = model.is_quantized();
        let linear = BoundLinear::bind(tape, &model.embed, quantized, trainable, "embed")?;
        let pos = match &model.pos {
            Some(p) => Some(bind_weight(
                tape,
                p.tensor(),
                model.pos_quant.as_ref(),
                quantized,
                trainable,
                "pos",
            )?),
            None => None,
        };
        Ok(Self { linear, pos })
    }
}

/// Every parameter of a model bound onto one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embed: BoundEmbed,
    pub blocks: Vec<BoundBlock>,
    pub head: BoundLinear,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, model: &ViTModel, trainable: bool) -> Result<Self> {
        let quantized = model.is_quantized();
        let embed = BoundEmbed::bind(tape, model, trainable)?;
        let blocks = model
            .blocks
            .iter()
            .map(|b| BoundBlock::bind(tape, b, quantized, trainable))
            .collect::<Result<_>>()?;
        let head = BoundLinear::bind(tape, &model.head, quantized, trainable, "head")?;
        Ok(Self { embed, blocks, head })
    }

    /// Leaves in the order of [`ViTModel::params_mut`].
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.embed.linear.weight];
        out.extend(self.embed.linear.bias);
        out.extend(self.embed.pos.map(|(leaf, _)| leaf));
        for b in &self.blocks {
            out.extend(b.leaves());
        }
        out.push(self.head.weight);
        out.extend(self.head.bias);
        out
    }

    /// Logits of an image batch.
    pub fn logits(&self, tape: &mut Tape, model: &ViTModel, images: &Tensor) -> Result<Var> {
        let quantized = model.is_quantized();
        let (mut h, shape) = embed_forward(tape, model, &self.embed, images, None)?;
        for (l, (block, bound)) in model.blocks.iter().zip(&self.blocks).enumerate() {
            h = block_forward(tape, &model.config, block, bound, l, h, shape, quantized, None)?.output;
        }
        head_forward(tape, model, &self.head, h, shape, None)
    }
}

/// Splits `[B, C, H, W]` images into `[B·N, C·P·P]` flattened patches.
/// Patches are ordered row-major over the patch grid; each patch is
/// flattened channel-major, then row, then column.
pub fn extract_patches(images: &Tensor, config: &ModelConfig) -> Result<(Tensor, TokenShape)> {
    let [c, h, w] = config.image_shape();
    let batch = match images.shape() {
        [b, ic, ih, iw] if (*ic, *ih, *iw) == (c, h, w) => *b,
        other => {
            return Err(Error::Contract(format!(
                "image batch shape {other:?} does not match [B, {c}, {h}, {w}]"
            )))
        }
    };
    let p = config.patch_size;
    let grid = h / p;
    let tokens = grid * grid;
    let pd = config.patch_dim();
    let src = images.data();
    let mut out = vec![0.0; batch * tokens * pd];
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = (b * tokens + gy * grid + gx) * pd;
                for ch in 0..c {
                    for dy in 0..p {
                        let s = ((b * c + ch) * h + gy * p + dy) * w + gx * p;
                        let d = row + (ch * p + dy) * p;
                        out[d..d + p].copy_from_slice(&src[s..s + p]);
                    }
                }
            }
        }
    }
    let shape = TokenShape { batch, tokens };
    Ok((Tensor::new(vec![batch * tokens, pd], out)?, shape))
}

/// Patch projection plus positional embedding: `[B·N, D]` tokens.
pub fn embed_forward(
    tape: &mut Tape,
    model: &ViTModel,
    bound: &BoundEmbed,
    images: &Tensor,
    mut observer: Option<&mut ActObserver>,
) -> Result<(Var, TokenShape)> {
    let (patches, shape) = extract_patches(images, &model.config)?;
    let x = tape.constant(patches);
    let quant = if model.is_quantized() { model.embed_in_quant.as_ref() } else { None };
    let x = activation(tape, x, Site::EmbedIn, quant, &mut observer)?;
    let mut tokens = bound.linear.apply(tape, x)?;
    if let Some((_, pos)) = bound.pos {
        tokens = tape.add_tiled(tokens, pos)?;
    }
    Ok((tokens, shape))
}

/// Mean-pools tokens per image and applies the classifier head.
pub fn head_forward(
    tape: &mut Tape,
    model: &ViTModel,
    bound: &BoundLinear,
    x: Var,
    shape: TokenShape,
    mut observer: Option<&mut ActObserver>,
) -> Result<Var> {
    let pooled = tape.mean_pool(x, shape.batch)?;
    let quant = if model.is_quantized() { model.head_in_quant.as_ref() } else { None };
    let pooled = activation(tape, pooled, Site::HeadIn, quant, &mut observer)?;
    bound.apply(tape, pooled)
}

/// Runs blocks `start..` and the head on tokens `x`, with all parameters
/// bound as constants except those in `trainable_block` (already bound by
/// the caller and passed in as `bound_trainable`).
pub fn forward_tail(
    tape: &mut Tape,
    model: &ViTModel,
    x: Var,
    shape: TokenShape,
    start: usize,
    bound_trainable: Option<(usize, &BoundBlock)>,
) -> Result<Var> {
    let quantized = model.is_quantized();
    let mut h = x;
    for (l, block) in model.blocks.iter().enumerate().skip(start) {
        let owned;
        let bound = match bound_trainable {
            Some((tl, b)) if tl == l => b,
            _ => {
                owned = BoundBlock::bind(tape, block, quantized, false)?;
                &owned
            }
        };
        h = block_forward(tape, &model.config, block, bound, l, h, shape, quantized, None)?.output;
    }
    let head = BoundLinear::bind(tape, &model.head, quantized, false, "head")?;
    head_forward(tape, model, &head, h, shape, None)
}

/// Post-embedding tokens, every block output, and the logits of one batch.
#[derive(Clone, Debug)]
pub struct Trace {
    pub shape: TokenShape,
    /// Tokens entering block 0.
    pub embedded: Tensor,
    /// Output of each block, in order.
    pub blocks: Vec<Tensor>,
    pub logits: Tensor,
}

impl Trace {
    /// Input of block `l` (the embedding for `l == 0`).
    pub fn block_input(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.embedded
        } else {
            &self.blocks[l - 1]
        }
    }

    /// Tokens fed to the pooling head.
    pub fn final_tokens(&self) -> &Tensor {
        self.blocks.last().unwrap_or(&self.embedded)
    }
}

impl ViTModel {
    fn run(&self, images: &Tensor, mut observer: Option<&mut ActObserver>) -> Result<Trace> {
        let mut tape = Tape::new();
        let quantized = self.is_quantized();
        let embed = BoundEmbed::bind(&mut tape, self, false)?;
        let (mut h, shape) = embed_forward(&mut tape, self, &embed, images, observer.as_deref_mut())?;
        let embedded = tape.value(h).clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let bound = BoundBlock::bind(&mut tape, block, quantized, false)?;
            h = block_forward(
                &mut tape,
                &self.config,
                block,
                &bound,
                l,
                h,
                shape,
                quantized,
                observer.as_deref_mut(),
            )?
            .output;
            blocks.push(tape.value(h).clone());
        }
        let head = BoundLinear::bind(&mut tape, &self.head, quantized, false, "head")?;
        let logits = head_forward(&mut tape, self, &head, h, shape, observer)?;
        Ok(Trace {
            shape,
            embedded,
            blocks,
            logits: tape.value(logits).clone(),
        })
    }

    /// Logits `[B, classes]` for a `[B, C, H, W]` image batch.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.run(images, None)?.logits)
    }

    /// Full activation trace of one batch.
    pub fn trace(&self, images: &Tensor) -> Result<Trace> {
        self.run(images, None)
    }

    /// Forward pass that records activation ranges at every site.
    pub fn observe(&self, images: &Tensor, observer: &mut ActObserver) -> Result<Tensor> {
        Ok(self.run(images, Some(observer))?.logits)
    }

    /// Embeds a single `[C, H, W]` image into `[N, D]` tokens.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(shape)?;
        let mut tape = Tape::new();
        let embed = BoundEmbed::bind(&mut tape, self, false)?;
        let (tokens, _) = embed_forward(&mut tape, self, &embed, &batch, None)?;
        Ok(tape.value(tokens).clone())
    }

    /// Evaluates block `l` on `[B·N, D]` tokens, returning its output and
    /// the six linear-layer outputs.
    pub fn eval_block(&self, l: usize, x: &Tensor, shape: TokenShape) -> Result<(Tensor, Vec<Tensor>)> {
        let block = self
            .blocks
            .get(l)
            .ok_or_else(|| Error::Contract(format!("block index {l} out of range")))?;
        let mut tape = Tape::new();
        let quantized = self.is_quantized();
        let bound = BoundBlock::bind(&mut tape, block, quantized, false)?;
        let xv = tape.constant(x.clone());
        let out = block_forward(&mut tape, &self.config, block, &bound, l, xv, shape, quantized, None)?;
        let layers = out.layer_outputs.iter().map(|v| tape.value(*v).clone()).collect();
        Ok((tape.value(out.output).clone(), layers))
    }

    /// Pools `[B·N, D]` tokens and applies the head.
    pub fn eval_head(&self, x: &Tensor, shape: TokenShape) -> Result<Tensor> {
        let mut tape = Tape::new();
        let head = BoundLinear::bind(&mut tape, &self.head, self.is_quantized(), false, "head")?;
        let xv = tape.constant(x.clone());
        let logits = head_forward(&mut tape, self, &head, xv, shape, None)?;
        Ok(tape.value(logits).clone())
    }
}
