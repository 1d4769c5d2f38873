use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_dropout, MlpModel, Mode, RmsProp, RmsPropParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
    /// Keep at most this many negatives per positive (drawn under the seed).
    /// Off by default.
    pub negative_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 100,
            dropout_rate: 0.2,
            rmsprop_rho: 0.9,
            rmsprop_epsilon: 1e-8,
            seed: 0,
            negative_ratio: None,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || !(self.rmsprop_epsilon > 0.0) {
            return bad(format!(
                "rmsprop rho must lie in [0, 1) and epsilon be positive, got {} / {}",
                self.rmsprop_rho, self.rmsprop_epsilon
            ));
        }
        if let Some(r) = self.negative_ratio {
            if !(r > 0.0) {
                return bad(format!("negative_ratio must be positive, got {r}"));
            }
        }
        check_dropout(self.dropout_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean train-mode loss over each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
    /// Optimizer steps taken.
    pub steps: usize,
    /// [`MlpModel::param_checksum`] of the final parameters.
    pub checksum: String,
    pub seed: u64,
}

/// Trains every layer on `(x, labels)` with seeded shuffling, mini-batches
/// and dropout.
pub fn train<T: Scalar>(
    model: &mut MlpModel<T>,
    x: ArrayView2<'_, T>,
    labels: &[bool],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    model.set_trainable(true);
    run(model, x, labels, cfg)
}

/// Retrains only the output layer; hidden layers are frozen and stay
/// bit-identical.
pub fn fine_tune<T: Scalar>(
    model: &mut MlpModel<T>,
    x: ArrayView2<'_, T>,
    labels: &[bool],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    model.freeze_all_but_last();
    run(model, x, labels, cfg)
}

fn run<T: Scalar>(
    model: &mut MlpModel<T>,
    x: ArrayView2<'_, T>,
    labels: &[bool],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: x.nrows(),
            right: labels.len(),
        });
    }
    if x.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: x.ncols(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }

    let mut rng = seed::rng(cfg.seed);
    let mut pool: Vec<usize> = (0..labels.len()).collect();
    if let Some(ratio) = cfg.negative_ratio {
        let keep = ((positives as f64 * ratio).ceil() as usize).max(1);
        if keep < negatives {
            let mut neg: Vec<usize> = pool.iter().copied().filter(|&i| !labels[i]).collect();
            neg.shuffle(&mut rng);
            neg.truncate(keep);
            pool = pool.into_iter().filter(|&i| labels[i]).chain(neg).collect();
            pool.sort_unstable();
        }
    }

    model.dropout_rate = cfg.dropout_rate;
    let mut opt = RmsProp::new(
        model,
        RmsPropParams {
            learning_rate: T::of(cfg.learning_rate),
            rho: T::of(cfg.rmsprop_rho),
            epsilon: T::of(cfg.rmsprop_epsilon),
        },
    );

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        pool.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in pool.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), idx);
            batch_labels.clear();
            batch_labels.extend(idx.iter().map(|&i| labels[i]));
            let (loss, grads) = model.backward(xb.view(), &batch_labels, Mode::Train(&mut rng))?;
            opt.step(model, &grads)?;
            total += loss.as_f64() * idx.len() as f64;
        }
        let mean = total / pool.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Pipeline("training diverged to non-finite values".into()));
        }
        epoch_losses.push(mean);
    }

    Ok(TrainReport {
        epoch_losses,
        steps: opt.steps,
        checksum: model.param_checksum(),
        seed: cfg.seed,
    })
}
