use super::{loss_and_grads, standard_normal, VaeModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::neural::Adam;
use crate::phdist::PhTelemetry;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip, off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean negative ELBO per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub telemetry: PhTelemetry,
}

/// Minibatch Adam on the negative ELBO. Batches are reshuffled every epoch;
/// the last batch may be short.
pub fn train<R: Rng + ?Sized>(model: &mut VaeModel, data: &Tensor, cfg: &TrainConfig, rng: &mut R) -> Result<TrainReport> {
    if data.rows() == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("training needs data and a positive batch size".into()));
    }
    let names = model.param_names();
    let mut adam = Adam::new(cfg.learning_rate).with_clip(cfg.clip_norm);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.select_rows(batch);
            let noise = standard_normal(batch.len(), model.latent_dim(), rng);
            let eval = loss_and_grads(model, &x, &noise)?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFinite { op: "elbo" });
            }
            weighted += eval.loss * batch.len() as f64;
            report.telemetry.merge(&eval.telemetry);
            let mut params = model.params_mut();
            adam.step(&mut params, &eval.grads, &names)?;
        }
        report.epoch_losses.push(weighted / data.rows() as f64);
    }
    report.steps = adam.steps();
    Ok(report)
}
