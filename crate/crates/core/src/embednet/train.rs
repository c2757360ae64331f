//! Mini-batch training with best-validation-epoch selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::imagecore::{augment, AugmentParams, ImageGrid, InstanceSet, LabelMap, Mask};
use crate::synthgen::make_training_labels;

use super::optim::adamw_step_model;
use super::{head_dims, total_loss, total_loss_and_grad, AdamWState, LossConfig, ModelParams, OptimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentParams,
    pub seed: u64,
}

/// An image with its (possibly overlapping) ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageGrid,
    pub instances: InstanceSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Deterministic 80/20 split of `0..n` after a seeded shuffle. Both parts are
/// non-empty when `n >= 2`.
pub fn split_train_val(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = n / 5;
    if n >= 2 {
        n_val = n_val.max(1);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Head-resolution targets: semantic mask and single-instance labels.
pub(crate) fn head_targets(image: &ImageGrid, instances: &InstanceSet, label_seed: u64) -> Result<(Mask, LabelMap)> {
    let (hh, hw) = head_dims(image.height(), image.width());
    let labels = make_training_labels(instances, label_seed).downsample_nearest(hh, hw)?;
    Ok((labels.foreground(), labels))
}

fn check_finite(loss: f64, what: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss diverged ({loss}) {}", what())))
    }
}

/// Train from `ModelParams::init(seed)` for `cfg.optim.epochs` epochs.
pub fn train(train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(ModelParams::init(derive_seed(cfg.seed, 0)), train_set, val_set, cfg)
}

pub fn train_from(initial: ModelParams, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.loss.validate()?;
    cfg.optim.validate()?;
    cfg.augment.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "training needs at least one training and one validation sample (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    for s in train_set.iter().chain(val_set) {
        if s.image.dims() != s.instances.dims() {
            return Err(Error::invalid("sample image and instance dims differ"));
        }
    }

    // Validation targets are fixed for the whole run.
    let val_targets: Vec<(Mask, LabelMap)> = val_set
        .iter()
        .enumerate()
        .map(|(i, s)| head_targets(&s.image, &s.instances, derive_seed(cfg.seed ^ 0x5641_4C00, i as u64)))
        .collect::<Result<_>>()?;

    let mut params = initial;
    let mut state = AdamWState::new(params.num_params());
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut log = Vec::with_capacity(cfg.optim.epochs);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.optim.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.optim.batch_size).enumerate() {
            let results: Vec<Result<(f64, ModelParams)>> = batch
                .par_iter()
                .map(|&i| {
                    let sample_seed = derive_seed(cfg.seed, ((epoch as u64) << 32) | i as u64);
                    let (img, inst) = augment(&train_set[i].image, &train_set[i].instances, &cfg.augment, sample_seed)?;
                    let (seg, labels) = head_targets(&img, &inst, sample_seed ^ 0x4C41_4245)?;
                    let (loss, grad) = total_loss_and_grad(&params, &img, &seg, &labels, &cfg.loss)?;
                    Ok((loss.total, grad))
                })
                .collect();
            // Summed in batch order so the result does not depend on scheduling.
            let mut grad = ModelParams::zeros();
            for r in results {
                let (loss, g) = r?;
                check_finite(loss, || format!("at epoch {epoch}, step {step}"))?;
                epoch_loss += loss;
                grad.add_assign(&g);
            }
            grad.scale(1.0 / batch.len() as f64);
            adamw_step_model(&mut params, &grad, &mut state, &cfg.optim)?;
            if !params.is_finite() {
                return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}, step {step}")));
            }
        }
        let train_loss = epoch_loss / train_set.len() as f64;

        let val_losses: Vec<Result<f64>> = val_set
            .par_iter()
            .zip(&val_targets)
            .map(|(s, (seg, labels))| Ok(total_loss(&params, &s.image, seg, labels, &cfg.loss)?.total))
            .collect();
        let mut val_loss = 0.0;
        for l in val_losses {
            val_loss += l?;
        }
        val_loss /= val_set.len() as f64;
        check_finite(val_loss, || format!("on validation after epoch {epoch}"))?;

        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }

    Ok(match best {
        Some((_, epoch, p)) => TrainOutcome {
            params: p,
            log,
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            params,
            log,
            best_epoch: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_train_val(10, 4);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_train_val(10, 4), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_train_val(2, 0).1.len(), 1);
    }

    #[test]
    fn empty_sets_are_a_config_error() {
        let r = train(&[], &[], &TrainConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
