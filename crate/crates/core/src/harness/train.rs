use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::reconstruct::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::vit::{BoundModel, ModelConfig, ViTModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays along a half cosine to a tenth of it.
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 12,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

fn schedule(peak: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Trains a full-precision model with cross-entropy and Adam.
pub fn train_toy_fp(dataset: &Dataset, config: &TrainConfig) -> Result<ViTModel> {
    let mc = &config.model;
    if dataset.image_shape() != mc.image_shape() || dataset.classes != mc.classes {
        return Err(Error::Contract(format!(
            "dataset {:?} with {} classes does not fit model input {:?} with {} classes",
            dataset.image_shape(),
            dataset.classes,
            mc.image_shape(),
            mc.classes
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ViTModel::init(mc, &mut rng)?;
    if config.epochs == 0 {
        return Ok(model);
    }
    if dataset.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let mut adam = AdamState::for_params(&model.params_mut(), AdamConfig::default());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images = dataset.tensor(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.label(i)).collect();
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &model, true)?;
            let logits = bound.logits(&mut tape, &model, &images)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}, step {step} (seed {})",
                    config.seed
                )));
            }
            epoch_loss += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let grads: Vec<&Tensor> = bound
                .leaves()
                .iter()
                .map(|v| grads.wrt(*v).ok_or_else(|| Error::contract("missing gradient for model leaf")))
                .collect::<Result<_>>()?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {step} (seed {})",
                    config.seed
                )));
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam, schedule(config.lr, step, total))?;
            step += 1;
        }
        info!("epoch {epoch}: mean loss {:.4}", epoch_loss / dataset.len() as f64);
    }
    Ok(model)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes for every record, in order.
pub fn predict(model: &ViTModel, dataset: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(64) {
        let logits = model.forward(&dataset.tensor(chunk)?)?;
        out.extend(logits.data().chunks(logits.last_dim()).map(argmax));
    }
    Ok(out)
}

/// Fraction of records whose arg-max logit equals the label. Ties between
/// logits go to the lowest class index.
pub fn evaluate_top1(model: &ViTModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let correct = predict(model, dataset)?
        .iter()
        .enumerate()
        .filter(|(i, p)| dataset.label(*i) == **p)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
