//! Optimization: MSE on the one-hour temperature change, AdamW with
//! decoupled weight decay, plateau learning-rate decay, early stopping on
//! validation loss, and deterministic data-parallel gradients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::features::WindowSample;
use crate::model::{ModelConfig, ModelParams, PhysicsTransformer};
use crate::seed::derive_seed;

/// Samples per gradient shard. Shards are reduced in order, so results do
/// not depend on the thread count.
const SHARD_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003125,
            weight_decay: 0.01,
            batch_size: 256,
            max_epochs: 400,
            plateau_patience: 3,
            plateau_factor: 0.25,
            early_stop_patience: 10,
            seed: 0,
            grad_clip: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr must be > 0 and weight_decay >= 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be >= 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("plateau_factor must lie in (0, 1)"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("patiences must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::config(
                "betas must lie in [0, 1) and eps must be > 0",
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be > 0"));
            }
        }
        Ok(())
    }
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Dimension {
            op: "mse_loss",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sse / pred.len() as f64)
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Vec<f64>> = params.into_iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }

    /// One update. All gradients are checked before any parameter moves.
    pub fn step(
        &self,
        params: &mut [&mut Tensor],
        grads: &[Vec<f64>],
        names: &[String],
        state: &mut OptimizerState,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.first.len() {
            return Err(Error::contract(format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            if p.numel() != g.len() || state.first[i].len() != g.len() {
                return Err(Error::Dimension {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault(format!(
                    "non-finite gradient for {name}"
                )));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut state.first[i], &mut state.second[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w = *w * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a strict improvement of the best validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's validation loss and returns the lr for the next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying `history` through a fresh scheduler.
pub fn plateau_lr(history: &[f64], lr: f64, factor: f64, patience: usize) -> f64 {
    let mut s = PlateauScheduler::new(lr, factor, patience);
    history.iter().fold(lr, |_, &v| s.observe(v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: PhysicsTransformer,
    pub log: Vec<EpochLog>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_train_loss: f64,
}

pub fn evaluate_loss(model: &PhysicsTransformer, samples: &[WindowSample]) -> Result<f64> {
    let pred = model.predict_deltas(samples)?;
    let target: Vec<f64> = samples.iter().map(|s| s.target_delta).collect();
    mse_loss(&pred, &target)
}

/// Batch MSE and its gradient, one per parameter tensor in canonical order.
pub fn batch_gradient(
    model: &PhysicsTransformer,
    batch: &[&WindowSample],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = batch.len() as f64;
    let shards: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_chunks(SHARD_SIZE)
        .enumerate()
        .map(|(k, shard)| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let mut rng = dropout_seed
                .map(|s| ChaCha8Rng::seed_from_u64(derive_seed(s, &format!("shard{k}"))));
            let pred = model.forward_graph(&mut g, &bound, shard, rng.as_mut())?;
            let target = g.constant(Tensor::new(
                vec![shard.len(), 1],
                shard.iter().map(|s| s.target_delta).collect(),
            )?);
            let diff = g.sub(pred, target)?;
            let sq = g.mul(diff, diff)?;
            let sse = g.sum(sq);
            let loss = g.scale(sse, 1.0 / n)?;
            g.backward(loss)?;
            let grads = bound
                .params
                .entries()
                .into_iter()
                .map(|&v| {
                    g.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
                })
                .collect();
            Ok((g.value(loss).item()?, grads))
        })
        .collect::<Result<_>>()?;
    let mut iter = shards.into_iter();
    let (mut loss, mut total) = iter.next().ok_or_else(|| Error::contract("empty batch"))?;
    for (l, grads) in iter {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, total))
}

/// Scales `grads` in place to a global L2 norm of at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Trains from a seeded initialization. Returns the best-validation
/// parameters and the per-epoch log.
pub fn train(
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = ModelParams::init(model_config, derive_seed(config.seed, "init"))?;
    let model = PhysicsTransformer::new(model_config.clone(), params)?;
    train_from(model, train_set, val_set, config)
}

pub fn train_from(
    mut model: PhysicsTransformer,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract(format!(
            "training needs nonempty splits, got {} train and {} validation windows",
            train_set.len(),
            val_set.len()
        )));
    }
    let names = model.params.names();
    let mut state = OptimizerState::new(model.params.entries());
    let mut opt = AdamW::from_config(config);
    let mut scheduler =
        PlateauScheduler::new(config.lr, config.plateau_factor, config.plateau_patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let dropout_root = derive_seed(config.seed, "dropout");

    let initial_train_loss = evaluate_loss(&model, train_set)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best = (0usize, f64::INFINITY, model.params.clone());
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let dropout_seed = (model.config.dropout > 0.0)
                .then(|| derive_seed(dropout_root, &format!("{epoch}/{step}")));
            let (loss, mut grads) = batch_gradient(&model, &batch, dropout_seed)?;
            if !loss.is_finite() {
                return Err(Error::NumericFault(format!(
                    "training loss diverged at epoch {epoch}, step {step}"
                )));
            }
            weighted += loss * batch.len() as f64;
            if let Some(max) = config.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            let mut params = model.params.entries_mut();
            opt.step(&mut params, &grads, &names, &mut state)?;
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = evaluate_loss(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NumericFault(format!(
                "validation loss is {val_loss} at epoch {epoch} (train loss {train_loss}, lr {})",
                opt.lr
            )));
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: opt.lr,
        });
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {:.3e}",
            opt.lr
        );
        if val_loss < best.1 {
            best = (epoch, val_loss, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        opt.lr = scheduler.observe(val_loss);
        if since_best >= config.early_stop_patience {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (best_epoch, best_val_loss, params) = best;
    model.params = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_loss,
        initial_train_loss,
    })
}

pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<()> {
    std::fs::write(path, training_log_csv(log)?)?;
    Ok(())
}

/// Renders the log as CSV text, for hashing or display.
pub fn training_log_csv(log: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut out = String::from_utf8(bytes).expect("csv output is UTF-8");
    if log.is_empty() {
        out.push_str("epoch,train_loss,val_loss,lr\n");
    }
    Ok(out)
}
