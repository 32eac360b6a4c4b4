use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{TokenShape, ViTModel};

/// Lower clamp for auto-balanced loss weights.
pub const BALANCE_MIN: f64 = 1e-4;
pub const BALANCE_MAX: f64 = 1e4;
/// Denominator guard in [`auto_balance`].
pub const BALANCE_FLOOR: f64 = 1e-12;

/// The three loss components of one iteration, their weights, and the fused
/// total `obwr + alpha·ebgs + beta·ibls`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub obwr: f64,
    pub ebgs: f64,
    pub ibls: f64,
    pub alpha: f64,
    pub beta: f64,
    pub fused: f64,
}

pub fn fuse_losses(obwr: f64, ebgs: f64, ibls: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    for (name, v) in [("obwr", obwr), ("ebgs", ebgs), ("ibls", ibls), ("alpha", alpha), ("beta", beta)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} is not finite ({v})")));
        }
        if v < 0.0 {
            return Err(Error::contract(format!("{name} must be non-negative, got {v}")));
        }
    }
    Ok(LossBreakdown {
        obwr,
        ebgs,
        ibls,
        alpha,
        beta,
        fused: obwr + alpha * ebgs + beta * ibls,
    })
}

/// Block-wise weights that bring the global and local losses to the scale
/// of the block loss at the first iteration.
pub fn auto_balance(obwr0: f64, ebgs0: f64, ibls0: f64) -> (f64, f64) {
    let ratio = |den: f64| (obwr0 / den.max(BALANCE_FLOOR)).clamp(BALANCE_MIN, BALANCE_MAX);
    (ratio(ebgs0), ratio(ibls0))
}

/// Mean squared difference of two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.numel() as f64)
}

/// Mean of the per-layer MSEs.
pub fn ibls_loss(fp_layers: &[Tensor], q_layers: &[Tensor]) -> Result<f64> {
    if fp_layers.is_empty() || fp_layers.len() != q_layers.len() {
        return Err(Error::Contract(format!(
            "ibls_loss needs two equally long non-empty lists, got {} and {}",
            fp_layers.len(),
            q_layers.len()
        )));
    }
    let mut total = 0.0;
    for (f, q) in fp_layers.iter().zip(q_layers) {
        total += mse(f, q)?;
    }
    Ok(total / fp_layers.len() as f64)
}

pub(crate) fn token_shape(model: &ViTModel, rows: usize) -> Result<TokenShape> {
    let tokens = model.config.tokens();
    if rows == 0 || rows % tokens != 0 {
        return Err(Error::Contract(format!(
            "{rows} token rows is not a whole number of {tokens}-token images"
        )));
    }
    Ok(TokenShape {
        batch: rows / tokens,
        tokens,
    })
}

/// MSE between block `l` of `fp` and of `q`, both fed the full-precision
/// input `m_prev_fp` (`[B·N, D]`).
pub fn obwr_loss(fp: &ViTModel, q: &ViTModel, l: usize, m_prev_fp: &Tensor) -> Result<f64> {
    for m in [fp, q] {
        if l >= m.blocks.len() {
            return Err(Error::Contract(format!(
                "block index {l} out of range for {} blocks",
                m.blocks.len()
            )));
        }
    }
    let shape = token_shape(fp, m_prev_fp.shape().first().copied().unwrap_or(0))?;
    let (f, _) = fp.eval_block(l, m_prev_fp, shape)?;
    let (g, _) = q.eval_block(l, m_prev_fp, shape)?;
    mse(&f, &g)
}

/// MSE between the logits of `fp` and `q` on the same image batch.
pub fn ebgs_loss(fp: &ViTModel, q: &ViTModel, images: &Tensor) -> Result<f64> {
    mse(&fp.forward(images)?, &q.forward(images)?)
}

/// Intra-block loss of block `l` with both models fed `m_prev_fp`.
pub fn block_ibls_loss(fp: &ViTModel, q: &ViTModel, l: usize, m_prev_fp: &Tensor) -> Result<f64> {
    let shape = token_shape(fp, m_prev_fp.shape().first().copied().unwrap_or(0))?;
    let (_, f) = fp.eval_block(l, m_prev_fp, shape)?;
    let (_, g) = q.eval_block(l, m_prev_fp, shape)?;
    ibls_loss(&f, &g)
}
