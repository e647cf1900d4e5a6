use log::{debug, info};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::score_all;
use super::{Model, ModelError};
use crate::data::{augment, shuffled_batches, Dataset};
use crate::metrics;
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Random horizontal flip and per-channel color jitter on every training patch.
    pub augment: bool,
    /// Draw which stored patches feed the branches per sample instead of the first `k`.
    pub random_patches: bool,
    /// Threshold at which validation ACER is measured for checkpoint selection.
    pub selection_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.01,
            seed: 0,
            augment: true,
            random_patches: true,
            selection_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch, as seen by the optimizer.
    pub train_loss: f32,
    pub val_acer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Clean (unaugmented) mean loss over the training set before the first update.
    pub initial_loss: f32,
    /// Clean mean loss over the training set after the last epoch.
    pub final_loss: f32,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were kept (lowest validation ACER, earliest on ties).
    pub best_epoch: usize,
    pub best_val_acer: f64,
}

fn clean_loss(model: &Model, data: &Dataset, batch_size: usize) -> Result<f32, ModelError> {
    let k = model.config().branches;
    let mut total = 0.0f64;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let slots: Vec<Vec<usize>> = chunk.iter().map(|_| (0..k).collect()).collect();
        let inputs = data.branch_inputs(chunk, &slots)?;
        let targets: Vec<usize> = chunk.iter().map(|&i| data.samples[i].label.index()).collect();
        total += model.loss(&inputs, &targets)? as f64 * chunk.len() as f64;
    }
    Ok((total / data.len() as f64) as f32)
}

/// Minibatch SGD over shuffled epochs; keeps the weights with the best validation ACER.
pub fn train(model: &mut Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, ModelError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::Data("training and validation sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Data("batch size must be positive".into()));
    }
    let k = model.config().branches;
    for ds in [train_set, val_set] {
        if ds.patch_size != model.config().patch_size {
            return Err(ModelError::PatchSize {
                expected: model.config().patch_size,
                actual: ds.patch_size,
            });
        }
        if let Some(bad) = ds.samples.iter().find(|s| s.patches.len() < k) {
            return Err(ModelError::Arity {
                expected: k,
                actual: bad.patches.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_loss = clean_loss(model, train_set, cfg.batch_size)?;
    info!("initial train loss {initial_loss:.5}");

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    model.params_mut().zero_grad();

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0f64;
        for batch in shuffled_batches(train_set.len(), cfg.batch_size, &mut rng) {
            let slots: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| {
                    let stored = train_set.samples[i].patches.len();
                    if cfg.random_patches {
                        index::sample(&mut rng, stored, k).into_vec()
                    } else {
                        (0..k).collect()
                    }
                })
                .collect();
            let mut inputs = train_set.branch_inputs(&batch, &slots)?;
            if cfg.augment {
                for input in &mut inputs {
                    augment::augment_batch(input, &mut rng);
                }
            }
            let targets: Vec<usize> = batch.iter().map(|&i| train_set.samples[i].label.index()).collect();
            let loss = model.accumulate_gradients(&inputs, &targets)?;
            if !loss.is_finite() {
                return Err(ModelError::Divergence { epoch, loss });
            }
            model.params_mut().sgd_step(cfg.learning_rate);
            model.params_mut().zero_grad();
            loss_sum += loss as f64 * batch.len() as f64;
        }
        let train_loss = (loss_sum / train_set.len() as f64) as f32;

        let pairs = score_all(model, val_set)?;
        let val_acer = metrics::report(&pairs, cfg.selection_threshold)?.acer;
        debug!("epoch {epoch}: train loss {train_loss:.5}, val ACER {val_acer:.4}");
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_acer,
        });
        if best.as_ref().is_none_or(|(_, acer, _)| val_acer < *acer) {
            best = Some((epoch, val_acer, model.params().clone()));
        }
    }

    let final_loss = clean_loss(model, train_set, cfg.batch_size)?;
    let (best_epoch, best_val_acer) = match best {
        Some((epoch, acer, params)) => {
            model.params_mut().load_values(&params)?;
            (epoch, acer)
        }
        None => (0, f64::NAN),
    };
    info!("final train loss {final_loss:.5}; kept epoch {best_epoch} (val ACER {best_val_acer:.4})");
    Ok(TrainReport {
        initial_loss,
        final_loss,
        epochs,
        best_epoch,
        best_val_acer,
    })
}
