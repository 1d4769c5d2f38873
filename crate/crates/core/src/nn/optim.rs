use ndarray::{Array1, Array2, ArrayBase, DataMut, Dimension, Zip};

use super::{Gradients, MlpModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropParams<T> {
    pub learning_rate: T,
    pub rho: T,
    pub epsilon: T,
}

/// One RMSprop update, in place:
/// `cache <- rho*cache + (1-rho)*g^2; param <- param - lr*g/(sqrt(cache)+eps)`.
pub fn rmsprop_update<T, S1, S2, D>(
    param: &mut ArrayBase<S1, D>,
    cache: &mut ArrayBase<S2, D>,
    grad: &ArrayBase<impl ndarray::Data<Elem = T>, D>,
    hp: &RmsPropParams<T>,
) where
    T: Scalar,
    S1: DataMut<Elem = T>,
    S2: DataMut<Elem = T>,
    D: Dimension,
{
    let decay = T::one() - hp.rho;
    Zip::from(param).and(cache).and(grad).for_each(|p, c, &g| {
        *c = hp.rho * *c + decay * g * g;
        *p -= hp.learning_rate * g / (c.sqrt() + hp.epsilon);
    });
}

/// RMSprop state for one model: a squared-gradient cache per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp<T> {
    pub params: RmsPropParams<T>,
    pub cache: Vec<(Array2<T>, Array1<T>)>,
    pub steps: usize,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(model: &MlpModel<T>, params: RmsPropParams<T>) -> Self {
        Self {
            params,
            cache: model
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.out_dim())))
                .collect(),
            steps: 0,
        }
    }

    /// Applies one update to every trainable layer. Frozen layers and their
    /// cache entries are left untouched.
    pub fn step(&mut self, model: &mut MlpModel<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.layers.len() != model.layers.len() || self.cache.len() != model.layers.len() {
            return Err(Error::LengthMismatch {
                left: model.layers.len(),
                right: grads.layers.len(),
            });
        }
        for ((layer, (gw, gb)), (cw, cb)) in model.layers.iter_mut().zip(&grads.layers).zip(&mut self.cache) {
            if gw.dim() != layer.weights.dim() || gb.len() != layer.biases.len() {
                return Err(Error::DimensionMismatch {
                    expected: layer.weights.len() + layer.biases.len(),
                    got: gw.len() + gb.len(),
                });
            }
            if !layer.trainable {
                continue;
            }
            rmsprop_update(&mut layer.weights, cw, gw, &self.params);
            rmsprop_update(&mut layer.biases, cb, gb, &self.params);
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn hp() -> RmsPropParams<f64> {
        RmsPropParams {
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_cache() {
        let mut p = array![1.0, -2.0];
        let mut c = array![0.5, 0.25];
        rmsprop_update(&mut p, &mut c, &array![0.0, 0.0], &hp());
        assert_eq!(p, array![1.0, -2.0]);
        assert_eq!(c, array![0.45, 0.225]);
    }

    #[test]
    fn first_step_closed_form() {
        for g in [3.0, -0.02, 250.0] {
            let mut p = array![0.0];
            let mut c = array![0.0];
            rmsprop_update(&mut p, &mut c, &array![g], &hp());
            let expected = -1e-3 * g / ((0.1f64 * g * g).sqrt() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
            // |g| >> eps: step is lr*sign(g)/sqrt(1-rho).
            let approx = -1e-3 * g.signum() / 0.1f64.sqrt();
            assert!((p[0] - approx).abs() < 1e-8);
        }
    }

    #[test]
    fn reduces_scalar_quadratic() {
        // f(w) = (w - 3)^2
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let mut w = array![0.0];
        let mut c = array![0.0];
        let hp = RmsPropParams {
            learning_rate: 0.1,
            ..hp()
        };
        let before = loss(w[0]);
        for _ in 0..2 {
            let g = array![2.0 * (w[0] - 3.0)];
            rmsprop_update(&mut w, &mut c, &g, &hp);
        }
        assert!(loss(w[0]) < before);
    }
}
