use std::io::Write;

use log::debug;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::reconstruct::adam::{adam_step, AdamConfig, AdamState};
use crate::reconstruct::loss::{auto_balance, fuse_losses, LossBreakdown};
use crate::tensor::Tensor;
use crate::vit::{block_forward, forward_tail, quantize_model, BoundBlock, QuantizeOptions, TokenShape, ViTModel};

/// Images per forward pass when precomputing targets.
const CHUNK: usize = 64;

/// Which loss terms drive the update. Disabled terms contribute nothing to
/// the gradient and are logged as zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub obwr: bool,
    pub ebgs: bool,
    pub ibls: bool,
}

impl Components {
    pub const ALL: Self = Self {
        obwr: true,
        ebgs: true,
        ibls: true,
    };
    pub const NONE: Self = Self {
        obwr: false,
        ebgs: false,
        ibls: false,
    };

    pub fn any(&self) -> bool {
        self.obwr || self.ebgs || self.ibls
    }
}

/// How α and β are chosen for each block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Balance {
    Fixed { alpha: f64, beta: f64 },
    /// [`auto_balance`] on the first iteration's losses, frozen afterwards.
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionConfig {
    /// Iterations per block.
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub calibration_size: usize,
    pub seed: u64,
    pub balance: Balance,
    pub adam: AdamConfig,
    pub components: Components,
    pub quantize: QuantizeOptions,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 1e-5,
            batch_size: 32,
            calibration_size: 256,
            seed: 0,
            balance: Balance::Auto,
            adam: AdamConfig::default(),
            components: Components::ALL,
            quantize: QuantizeOptions::default(),
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.calibration_size == 0 {
            return Err(Error::contract("iterations, batch size and calibration size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Balance::Fixed { alpha, beta } = self.balance {
            if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
                return Err(Error::contract("fixed alpha and beta must be finite and non-negative"));
            }
        }
        self.quantize.bits.validate()
    }
}

/// One row of the per-iteration loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub block: usize,
    pub iteration: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LogRow>,
}

impl LossLog {
    pub const HEADER: &'static str = "block,iteration,obwr,ebgs,ibls,alpha,beta,fused";

    pub fn block(&self, l: usize) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.block == l)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            let b = &r.loss;
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.block, r.iteration, b.obwr, b.ebgs, b.ibls, b.alpha, b.beta, b.fused
            )?;
        }
        Ok(())
    }
}

/// Splits `[n, ...]` into consecutive chunks of at most `size` rows.
fn chunks(t: &Tensor, size: usize) -> Result<Vec<Tensor>> {
    let n = t.shape().first().copied().unwrap_or(0);
    (0..n)
        .step_by(size)
        .map(|s| t.select_rows(&(s..(s + size).min(n)).collect::<Vec<_>>()))
        .collect()
}

fn image_count(images: &Tensor) -> Result<usize> {
    match images.shape() {
        [n, _, _, _] => Ok(*n),
        other => Err(Error::Contract(format!("expected a [n, C, H, W] image tensor, got {other:?}"))),
    }
}

/// Full-precision activations of the calibration set, computed once.
#[derive(Clone, Debug)]
pub struct FpTrace {
    pub tokens: usize,
    /// Input of each block, then the final block output: `[n·N, D]` each.
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
}

impl FpTrace {
    pub fn new(fp: &ViTModel, images: &Tensor) -> Result<Self> {
        image_count(images)?;
        let mut activations: Vec<Vec<Tensor>> = vec![Vec::new(); fp.blocks.len() + 1];
        let mut logits = Vec::new();
        for chunk in chunks(images, CHUNK)? {
            let t = fp.trace(&chunk)?;
            activations[0].push(t.embedded);
            for (l, b) in t.blocks.into_iter().enumerate() {
                activations[l + 1].push(b);
            }
            logits.push(t.logits);
        }
        Ok(Self {
            tokens: fp.config.tokens(),
            activations: activations
                .iter()
                .map(|parts| Tensor::concat_rows(parts))
                .collect::<Result<_>>()?,
            logits: Tensor::concat_rows(&logits)?,
        })
    }

    pub fn images(&self) -> usize {
        self.logits.shape()[0]
    }
}

/// Embedded calibration tokens of the quantized model.
fn q_embedded(q: &ViTModel, images: &Tensor) -> Result<Tensor> {
    let parts = chunks(images, CHUNK)?
        .iter()
        .map(|c| Ok(q.trace(c)?.embedded))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Applies block `l` of `model` to `[n·N, D]` tokens in chunks.
fn apply_block(model: &ViTModel, l: usize, x: &Tensor, tokens: usize, layers: bool) -> Result<(Tensor, Vec<Tensor>)> {
    let n = x.shape()[0] / tokens;
    let mut outs = Vec::new();
    let mut layer_parts: Vec<Vec<Tensor>> = vec![Vec::new(); 6];
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let rows: Vec<usize> = (start * tokens..end * tokens).collect();
        let shape = TokenShape {
            batch: end - start,
            tokens,
        };
        let (out, ls) = model.eval_block(l, &x.select_rows(&rows)?, shape)?;
        outs.push(out);
        if layers {
            for (part, t) in layer_parts.iter_mut().zip(ls) {
                part.push(t);
            }
        }
    }
    let layer_outputs = if layers {
        layer_parts.iter().map(|p| Tensor::concat_rows(p)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok((Tensor::concat_rows(&outs)?, layer_outputs))
}

/// Everything the loss of block `l` needs that does not depend on block
/// `l`'s parameters, for the whole calibration set.
#[derive(Clone, Debug)]
pub struct BlockCache {
    pub block: usize,
    pub tokens: usize,
    pub fp_in: Tensor,
    pub fp_out: Tensor,
    pub fp_layers: Vec<Tensor>,
    pub fp_logits: Tensor,
    /// Input of block `l` in the quantized model (earlier blocks frozen).
    pub q_in: Tensor,
}

/// One sampled batch of [`BlockCache`] rows.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    pub shape: TokenShape,
    pub fp_in: Tensor,
    pub fp_out: Tensor,
    pub fp_layers: Vec<Tensor>,
    pub fp_logits: Tensor,
    pub q_in: Tensor,
}

impl BlockCache {
    /// Computes the cache from scratch.
    pub fn new(fp: &ViTModel, q: &ViTModel, l: usize, images: &Tensor) -> Result<Self> {
        check_pair(fp, q, l)?;
        let trace = FpTrace::new(fp, images)?;
        let mut q_in = q_embedded(q, images)?;
        for j in 0..l {
            q_in = apply_block(q, j, &q_in, trace.tokens, false)?.0;
        }
        Self::from_trace(fp, l, &trace, q_in)
    }

    fn from_trace(fp: &ViTModel, l: usize, trace: &FpTrace, q_in: Tensor) -> Result<Self> {
        let fp_in = trace.activations[l].clone();
        let (_, fp_layers) = apply_block(fp, l, &fp_in, trace.tokens, true)?;
        Ok(Self {
            block: l,
            tokens: trace.tokens,
            fp_out: trace.activations[l + 1].clone(),
            fp_in,
            fp_layers,
            fp_logits: trace.logits.clone(),
            q_in,
        })
    }

    pub fn images(&self) -> usize {
        self.fp_logits.shape()[0]
    }

    pub fn batch(&self, images: &[usize]) -> Result<BatchTargets> {
        let rows: Vec<usize> = images
            .iter()
            .flat_map(|&i| i * self.tokens..(i + 1) * self.tokens)
            .collect();
        Ok(BatchTargets {
            shape: TokenShape {
                batch: images.len(),
                tokens: self.tokens,
            },
            fp_in: self.fp_in.select_rows(&rows)?,
            fp_out: self.fp_out.select_rows(&rows)?,
            fp_layers: self
                .fp_layers
                .iter()
                .map(|t| t.select_rows(&rows))
                .collect::<Result<_>>()?,
            fp_logits: self.fp_logits.select_rows(images)?,
            q_in: self.q_in.select_rows(&rows)?,
        })
    }
}

fn check_pair(fp: &ViTModel, q: &ViTModel, l: usize) -> Result<()> {
    if fp.is_quantized() || !q.is_quantized() {
        return Err(Error::contract("expected a full-precision and a fake-quantized model"));
    }
    if l >= q.blocks.len() || fp.blocks.len() != q.blocks.len() {
        return Err(Error::Contract(format!(
            "block index {l} out of range for {} blocks",
            q.blocks.len()
        )));
    }
    Ok(())
}

/// Block `l`'s loss terms on a tape, with the block bound as trainable.
#[derive(Clone, Debug)]
pub struct BlockObjective {
    pub bound: BoundBlock,
    pub obwr: Var,
    pub ibls: Var,
    pub ebgs: Option<Var>,
}

impl BlockObjective {
    /// Records OBWR and IBLS (one pass from the full-precision input) and,
    /// if `with_ebgs`, the logit loss of the quantized model run from its
    /// own block-`l` input.
    pub fn build(tape: &mut Tape, q: &ViTModel, l: usize, batch: &BatchTargets, with_ebgs: bool) -> Result<Self> {
        let block = q
            .blocks
            .get(l)
            .ok_or_else(|| Error::Contract(format!("block index {l} out of range")))?;
        let bound = BoundBlock::bind(tape, block, q.is_quantized(), true)?;

        let x = tape.constant(batch.fp_in.clone());
        let out = block_forward(tape, &q.config, block, &bound, l, x, batch.shape, q.is_quantized(), None)?;
        let target = tape.constant(batch.fp_out.clone());
        let obwr = tape.mse(out.output, target)?;
        let mut layer_terms = Vec::with_capacity(6);
        for (v, t) in out.layer_outputs.iter().zip(&batch.fp_layers) {
            let t = tape.constant(t.clone());
            layer_terms.push((tape.mse(*v, t)?, 1.0 / 6.0));
        }
        let ibls = tape.weighted_sum(&layer_terms)?;

        let ebgs = if with_ebgs {
            let xq = tape.constant(batch.q_in.clone());
            let logits = forward_tail(tape, q, xq, batch.shape, l, Some((l, &bound)))?;
            let target = tape.constant(batch.fp_logits.clone());
            Some(tape.mse(logits, target)?)
        } else {
            None
        };
        Ok(Self { bound, obwr, ibls, ebgs })
    }

    /// Fused loss node and its breakdown. Disabled components are zeroed.
    pub fn fuse(&self, tape: &mut Tape, components: Components, alpha: f64, beta: f64) -> Result<(Var, LossBreakdown)> {
        let obwr = if components.obwr { tape.scalar(self.obwr)? } else { 0.0 };
        let ibls = if components.ibls { tape.scalar(self.ibls)? } else { 0.0 };
        let ebgs = match (components.ebgs, self.ebgs) {
            (true, Some(v)) => tape.scalar(v)?,
            (true, None) => return Err(Error::contract("EBGS enabled but not recorded")),
            (false, _) => 0.0,
        };
        let breakdown = fuse_losses(obwr, ebgs, ibls, alpha, beta)?;
        let mut terms = Vec::new();
        if components.obwr {
            terms.push((self.obwr, 1.0));
        }
        if let (true, Some(v)) = (components.ebgs, self.ebgs) {
            terms.push((v, alpha));
        }
        if components.ibls {
            terms.push((self.ibls, beta));
        }
        if terms.is_empty() {
            return Err(Error::contract("no loss component enabled"));
        }
        Ok((tape.weighted_sum(&terms)?, breakdown))
    }
}

fn block_seed(seed: u64, l: usize) -> u64 {
    seed ^ (l as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `config.iterations` Adam steps on block `l` of `q`. Only block `l`'s
/// parameters are written.
pub fn reconstruct_cached(
    q: &mut ViTModel,
    l: usize,
    cache: &BlockCache,
    config: &ReconstructionConfig,
    log: &mut LossLog,
) -> Result<()> {
    config.validate()?;
    let components = config.components;
    if !components.any() {
        return Ok(());
    }
    let n = cache.images();
    if config.batch_size > n {
        return Err(Error::Contract(format!(
            "batch size {} exceeds the {n} calibration images",
            config.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(block_seed(config.seed, l));
    let mut adam = AdamState::for_params(&q.blocks[l].params_mut(), config.adam);
    let mut weights = match config.balance {
        Balance::Fixed { alpha, beta } => Some((alpha, beta)),
        Balance::Auto => None,
    };
    for iteration in 0..config.iterations {
        let picks = index::sample(&mut rng, n, config.batch_size).into_vec();
        let batch = cache.batch(&picks)?;
        let mut tape = Tape::new();
        let with_ebgs = components.ebgs || weights.is_none();
        let objective = BlockObjective::build(&mut tape, q, l, &batch, with_ebgs)?;
        let (alpha, beta) = match weights {
            Some(w) => w,
            None => {
                let e = objective.ebgs.map(|v| tape.scalar(v)).transpose()?.unwrap_or(0.0);
                let w = auto_balance(tape.scalar(objective.obwr)?, e, tape.scalar(objective.ibls)?);
                debug!("block {l}: alpha {:.4e} beta {:.4e}", w.0, w.1);
                *weights.insert(w)
            }
        };
        let (loss, breakdown) = objective.fuse(&mut tape, components, alpha, beta)?;
        log.rows.push(LogRow {
            block: l,
            iteration,
            loss: breakdown,
        });
        let grads = tape.backward(loss)?;
        let grads: Vec<&Tensor> = objective
            .bound
            .leaves()
            .iter()
            .map(|v| grads.wrt(*v).ok_or_else(|| Error::contract("missing gradient for block leaf")))
            .collect::<Result<_>>()?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in block {l} at iteration {iteration}")));
        }
        adam_step(&mut q.blocks[l].params_mut(), &grads, &mut adam, config.lr)?;
    }
    Ok(())
}

/// Reconstructs block `l` of `q` against `fp` on the calibration images
/// `[n, C, H, W]`, returning the per-iteration losses.
pub fn reconstruct_block(
    l: usize,
    fp: &ViTModel,
    q: &mut ViTModel,
    calibration: &Tensor,
    config: &ReconstructionConfig,
) -> Result<LossLog> {
    let cache = BlockCache::new(fp, q, l, calibration)?;
    let mut log = LossLog::default();
    reconstruct_cached(q, l, &cache, config, &mut log)?;
    Ok(log)
}

/// Losses of block `l` on the first `batch_size` calibration images without
/// updating anything.
pub fn measure_block(
    l: usize,
    fp: &ViTModel,
    q: &ViTModel,
    calibration: &Tensor,
    config: &ReconstructionConfig,
) -> Result<LossBreakdown> {
    let cache = BlockCache::new(fp, q, l, calibration)?;
    let picks: Vec<usize> = (0..config.batch_size.min(cache.images())).collect();
    let batch = cache.batch(&picks)?;
    let mut tape = Tape::new();
    let objective = BlockObjective::build(&mut tape, q, l, &batch, true)?;
    let e = objective.ebgs.map(|v| tape.scalar(v)).transpose()?.unwrap_or(0.0);
    let (o, i) = (tape.scalar(objective.obwr)?, tape.scalar(objective.ibls)?);
    let (alpha, beta) = match config.balance {
        Balance::Fixed { alpha, beta } => (alpha, beta),
        Balance::Auto => auto_balance(o, e, i),
    };
    fuse_losses(o, e, i, alpha, beta)
}

#[derive(Clone, Debug)]
pub struct MgrqOutput {
    pub model: ViTModel,
    pub log: LossLog,
}

/// Calibrates a quantized copy of `fp` and reconstructs its blocks in order.
/// With no loss component enabled this is the calibration-only model.
pub fn run_mgrq(fp: &ViTModel, calibration: &Tensor, config: &ReconstructionConfig) -> Result<MgrqOutput> {
    config.validate()?;
    if image_count(calibration)? == 0 {
        return Err(Error::contract("calibration set is empty"));
    }
    let batches = chunks(calibration, CHUNK)?;
    let mut q = quantize_model(fp, &batches, config.quantize)?;
    let mut log = LossLog::default();
    if !config.components.any() {
        return Ok(MgrqOutput { model: q, log });
    }
    let trace = FpTrace::new(fp, calibration)?;
    let mut q_in = q_embedded(&q, calibration)?;
    for l in 0..q.blocks.len() {
        let cache = BlockCache::from_trace(fp, l, &trace, q_in)?;
        reconstruct_cached(&mut q, l, &cache, config, &mut log)?;
        if let Some(last) = log.block(l).last() {
            debug!("block {l}: final fused loss {:.4e}", last.loss.fused);
        }
        q_in = apply_block(&q, l, &cache.q_in, trace.tokens, false)?.0;
    }
    Ok(MgrqOutput { model: q, log })
}
