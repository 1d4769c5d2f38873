//! Feed-forward binary classifier trained from scratch.
//!
//! The standard architecture is `dense(128)+ReLU -> dropout -> dense(128)+ReLU
//! -> dropout -> dense(1)+sigmoid`, trained with binary cross-entropy and
//! RMSprop. Dropout is inverted: surviving activations are scaled by
//! `1/(1-p)` at train time so inference needs no rescaling.

mod io;
mod optim;
mod train;

pub use io::{load_model, save_model, FORMAT_VERSION};
pub use optim::{rmsprop_update, RmsProp, RmsPropParams};
pub use train::{fine_tune, train, TrainConfig, TrainReport};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, RngCore};
use sha2::{Digest, Sha256};

use crate::corpus::Category;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

pub const HIDDEN_UNITS: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.2;
/// Probability clamp applied before taking logs in the loss.
pub const LOSS_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    /// `out_dim x in_dim`.
    pub weights: Array2<T>,
    pub biases: Array1<T>,
    pub trainable: bool,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            biases: Array1::zeros(out_dim),
            trainable: true,
        }
    }

    /// Uniform in `±sqrt(6/fan_in)`, zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite init range");
        Self {
            weights: Array2::from_shape_simple_fn((out_dim, in_dim), || T::of(dist.sample(rng))),
            biases: Array1::zeros(out_dim),
            trainable: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Metadata carried alongside the parameters in model files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelMeta {
    pub category: Option<Category>,
    /// Name of the embedding table the model reads.
    pub embedding: String,
    pub word_dim: usize,
    pub projection_seed: u64,
    /// Decision threshold, once calibrated or assigned.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    /// Hidden layers followed by the single-unit output layer.
    pub layers: Vec<DenseLayer<T>>,
    pub dropout_rate: f64,
    pub meta: ModelMeta,
}

/// Forward-pass mode. Training draws dropout masks from the given stream.
pub enum Mode<'a> {
    Infer,
    Train(&'a mut dyn RngCore),
}

/// Per-layer `(weights, biases)` gradients, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Array2<T>, Array1<T>)>,
}

struct Trace<T> {
    /// Input to each layer (after dropout for hidden outputs).
    inputs: Vec<Array2<T>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<T>>,
    /// Scaled dropout masks per hidden layer, when dropout was applied.
    masks: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> MlpModel<T> {
    /// `input_dim -> hidden... -> 1` with seeded He-uniform weights.
    pub fn new(input_dim: usize, hidden: &[usize], dropout_rate: f64, init_seed: u64) -> Result<Self> {
        let mut rng = seed::rng(init_seed);
        Self::build(input_dim, hidden, dropout_rate, |i, o| DenseLayer::he_uniform(i, o, &mut rng))
    }

    /// The two-hidden-layer, 128-unit architecture with 0.2 dropout.
    pub fn standard(input_dim: usize, init_seed: u64) -> Result<Self> {
        Self::new(input_dim, &[HIDDEN_UNITS, HIDDEN_UNITS], DEFAULT_DROPOUT, init_seed)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], dropout_rate: f64) -> Result<Self> {
        Self::build(input_dim, hidden, dropout_rate, DenseLayer::zeros)
    }

    fn build(
        input_dim: usize,
        hidden: &[usize],
        dropout_rate: f64,
        mut layer: impl FnMut(usize, usize) -> DenseLayer<T>,
    ) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes must be positive: input {input_dim}, hidden {hidden:?}"
            )));
        }
        check_dropout(dropout_rate)?;
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(Self {
            layers: dims.windows(2).map(|w| layer(w[0], w[1])).collect(),
            dropout_rate,
            meta: ModelMeta::default(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// `[input, hidden..., 1]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for l in &mut self.layers {
            l.trainable = trainable;
        }
    }

    /// Marks every layer but the output layer as frozen.
    pub fn freeze_all_but_last(&mut self) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.trainable = i == last;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// SHA-256 over the parameters' `f64` bit patterns, hex encoded.
    pub fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.biases) {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Output-unit pre-activation for one input.
    pub fn logit(&self, x: ArrayView1<'_, T>, mode: Mode<'_>) -> Result<T> {
        let batch = x.insert_axis(Axis(0));
        let (logits, _) = self.forward_batch(batch, mode)?;
        Ok(logits[0])
    }

    /// Probability in `(0, 1)` for one input.
    pub fn forward(&self, x: ArrayView1<'_, T>, mode: Mode<'_>) -> Result<T> {
        self.logit(x, mode).map(probability)
    }

    /// Inference-mode probabilities for a batch of row vectors.
    pub fn predict(&self, x: ArrayView2<'_, T>) -> Result<Array1<T>> {
        let (logits, _) = self.forward_batch(x, Mode::Infer)?;
        Ok(logits.mapv(probability))
    }

    fn forward_batch(&self, x: ArrayView2<'_, T>, mut mode: Mode<'_>) -> Result<(Array1<T>, Trace<T>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let hidden = self.layers.len() - 1;
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(hidden),
            masks: Vec::with_capacity(hidden),
        };
        let mut a = x.to_owned();
        for layer in &self.layers[..hidden] {
            let z = a.dot(&layer.weights.t()) + &layer.biases;
            let mut h = z.mapv(|v| v.max(T::zero()));
            let mask = match &mut mode {
                Mode::Train(rng) if self.dropout_rate > 0.0 => {
                    let m = dropout_mask::<T>(h.dim(), self.dropout_rate, &mut **rng);
                    h *= &m;
                    Some(m)
                }
                _ => None,
            };
            trace.inputs.push(a);
            trace.pre.push(z);
            trace.masks.push(mask);
            a = h;
        }
        let out = &self.layers[hidden];
        let logits = a.dot(&out.weights.row(0)) + out.biases[0];
        trace.inputs.push(a);
        Ok((logits, trace))
    }

    /// Mean binary cross-entropy over the batch and its gradient with respect
    /// to every parameter. Frozen layers get all-zero blocks.
    pub fn backward(&self, x: ArrayView2<'_, T>, targets: &[bool], mode: Mode<'_>) -> Result<(T, Gradients<T>)> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("batch"));
        }
        if x.nrows() != targets.len() {
            return Err(Error::LengthMismatch {
                left: x.nrows(),
                right: targets.len(),
            });
        }
        let (logits, trace) = self.forward_batch(x, mode)?;
        let probs = logits.mapv(probability);
        let loss = bce_loss(probs.as_slice().expect("contiguous"), targets)?;

        let n = T::from_usize(targets.len()).expect("batch size fits scalar");
        // d(mean BCE)/d(logit) for a sigmoid output.
        let mut delta: Array2<T> = Array2::from_shape_fn((targets.len(), 1), |(i, _)| {
            (probs[i] - if targets[i] { T::one() } else { T::zero() }) / n
        });

        let mut grads: Vec<(Array2<T>, Array1<T>)> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[l];
            if layer.trainable {
                grads.push((delta.t().dot(input), delta.sum_axis(Axis(0))));
            } else {
                grads.push((Array2::zeros(layer.weights.dim()), Array1::zeros(layer.out_dim())));
            }
            if l == 0 {
                break;
            }
            let mut d_input = delta.dot(&layer.weights);
            if let Some(mask) = &trace.masks[l - 1] {
                d_input *= mask;
            }
            Zip::from(&mut d_input)
                .and(&trace.pre[l - 1])
                .for_each(|d, &z| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                });
            delta = d_input;
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

fn dropout_mask<T: Scalar>(dim: (usize, usize), rate: f64, rng: &mut dyn RngCore) -> Array2<T> {
    let keep = 1.0 - rate;
    let scale = T::of(1.0 / keep);
    Array2::from_shape_simple_fn(dim, || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            T::zero()
        }
    })
}

/// Logistic sigmoid, computed without overflow and kept strictly inside `(0, 1)`.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn probability<T: Scalar>(z: T) -> T {
    let p = sigmoid(z);
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon();
    p.max(lo).min(hi)
}

/// Mean binary cross-entropy. Probabilities are clamped to `[ε, 1-ε]` with
/// `ε = max(1e-12, machine epsilon)` before taking logs.
pub fn bce_loss<T: Scalar>(preds: &[T], targets: &[bool]) -> Result<T> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    let eps = T::of(LOSS_EPSILON).max(T::epsilon());
    let one = T::one();
    let total: T = preds
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(one - eps);
            if y {
                p.ln()
            } else {
                (one - p).ln()
            }
        })
        .sum();
    Ok(-total / T::from_usize(preds.len()).expect("length fits scalar"))
}
