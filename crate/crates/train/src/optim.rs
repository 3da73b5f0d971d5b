//! RMSProp and the step-decay learning-rate schedule.

use rhg_core::{Real, Tensor};

use crate::config::TrainConfig;
use crate::{Error, Result};

/// `base_lr * decay_factor^floor(step / decay_every)`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let k = step / cfg.decay_every;
    cfg.base_lr * cfg.decay_factor.powi(k.min(i32::MAX as u64) as i32)
}

/// One RMSProp accumulator per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub acc: Vec<Tensor<T>>,
    pub rho: f64,
    pub eps: f64,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, rho: f64, eps: f64) -> Self {
        Self {
            acc: shapes.into_iter().map(Tensor::zeros).collect(),
            rho,
            eps,
            step: 0,
        }
    }

    /// Updates every parameter in place and advances the step counter.
    pub fn apply(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.acc.len() || grads.len() != self.acc.len() {
            return Err(Error::Data(format!(
                "optimizer holds {} accumulators, got {} params and {} grads",
                self.acc.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), a) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            rmsprop_step(p, g, a, self.rho, self.eps, lr)?;
        }
        self.step += 1;
        Ok(())
    }
}

/// `acc <- rho*acc + (1-rho)*g^2; param <- param - lr*g / (sqrt(acc) + eps)`.
pub fn rmsprop_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    acc: &mut Tensor<T>,
    rho: f64,
    eps: f64,
    lr: f64,
) -> Result<()> {
    param.expect_same_shape(grad, "rmsprop_step")?;
    param.expect_same_shape(acc, "rmsprop_step")?;
    let (rho, one_minus, eps, lr) = (
        T::from_f64_lossy(rho),
        T::from_f64_lossy(1.0 - rho),
        T::from_f64_lossy(eps),
        T::from_f64_lossy(lr),
    );
    for ((p, &g), a) in param.data_mut().iter_mut().zip(grad.data()).zip(acc.data_mut()) {
        *a = rho * *a + one_minus * g * g;
        *p = *p - lr * g / (a.sqrt() + eps);
    }
    Ok(())
}
