use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_gradient, LossGradient};
use super::optim::{clip_global_norm, Adam, AdamSettings};
use crate::filters::{GaussianBelief, InitialBelief};
use crate::gated::{GateMask, GateParams};
use crate::numerics::Mat;
use crate::ssm::{NominalModel, SplitDataset, TrajectoryItem};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub adam: AdamSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 100,
            tau: 1e-4,
            grad_clip_norm: 10.0,
            seed: 0,
            early_stop_patience: 20,
            adam: AdamSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.batch_size > train_len {
            return bad(format!(
                "batch_size must be between 1 and the training-set size {train_len}, got {}",
                self.batch_size
            ));
        }
        if !(self.tau >= 0.0) {
            return bad(format!("tau must be non-negative, got {}", self.tau));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch; absent for epoch 0, which scores
    /// the initial parameters.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub mask: GateMask,
    pub n_parameters: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: GateParams,
    pub report: TrainReport,
}

/// Validation loss and RMSE.
fn validate_split(
    params: &GateParams,
    model: &NominalModel,
    items: &[TrajectoryItem],
    inits: &[GaussianBelief],
    mask: GateMask,
    tau: f64,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut data = 0.0;
    for (item, init) in items.iter().zip(inits) {
        let mut tape = crate::numerics::Tape::new();
        let pv = params.register(&mut tape);
        let (l, d) =
            super::loss::loss_on_tape(&mut tape, &pv, params, model, item, init, mask, tau)?;
        loss += tape.scalar(l);
        data += tape.scalar(d) * item.horizon() as f64;
    }
    let steps: usize = items.iter().map(TrajectoryItem::horizon).sum();
    Ok((loss / items.len() as f64, (data / steps as f64).sqrt()))
}

pub fn train(
    config: &TrainConfig,
    model: &NominalModel,
    data: &SplitDataset,
    mask: GateMask,
    init: &InitialBelief,
    params: GateParams,
) -> Result<TrainOutcome> {
    train_with(config, model, data, mask, init, params, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    model: &NominalModel,
    data: &SplitDataset,
    mask: GateMask,
    init: &InitialBelief,
    mut params: GateParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let (train_items, val_items) = (&data.train, &data.val);
    if val_items.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    config.validate(train_items.len())?;
    let train_inits = train_items
        .iter()
        .map(|i| init.for_item(i))
        .collect::<Result<Vec<_>>>()?;
    let val_inits = val_items
        .iter()
        .map(|i| init.for_item(i))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut adam = Adam::new(config.adam, &shapes);

    let (val_loss, val_rmse) =
        validate_split(&params, model, val_items, &val_inits, mask, config.tau)?;
    let first = EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss,
        val_rmse,
    };
    on_epoch(&first);
    let mut records = vec![first];
    let mut best = (0usize, val_loss, params.clone());
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad: Vec<Mat> = shapes.iter().map(|(r, c)| Mat::zeros(*r, *c)).collect();
            let mut batch_loss = 0.0;
            for &j in batch {
                let LossGradient { loss, gradient, .. } = loss_and_gradient(
                    &params,
                    model,
                    &train_items[j],
                    &train_inits[j],
                    mask,
                    config.tau,
                )?;
                batch_loss += loss;
                for (acc, g) in grad.iter_mut().zip(&gradient) {
                    acc.add_assign(g);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            grad.iter_mut().for_each(|g| *g = g.scale(inv));
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            clip_global_norm(&mut grad, config.grad_clip_norm);
            adam.step(&mut params.tensors_mut(), &grad, config.learning_rate);
            loss_sum += batch_loss;
            n_batches += 1;
        }
        let (val_loss, val_rmse) =
            validate_split(&params, model, val_items, &val_inits, mask, config.tau)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: n_batches,
                loss: val_loss,
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: Some(loss_sum / n_batches as f64),
            val_loss,
            val_rmse,
        };
        on_epoch(&rec);
        records.push(rec);
        if val_loss < best.1 {
            best = (epoch, val_loss, params.clone());
        } else if config.early_stop_patience > 0 && epoch - best.0 >= config.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_loss, best_params) = best;
    Ok(TrainOutcome {
        params: best_params,
        report: TrainReport {
            config: config.clone(),
            mask,
            n_parameters: params.count(),
            n_train: train_items.len(),
            n_val: val_items.len(),
            epochs: records,
            best_epoch,
            best_val_loss,
            stopped_early,
        },
    })
}
