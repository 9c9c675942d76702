use crate::error::{shape_err, Error, Result};
use crate::tensor::{real, Real};

use super::{Model, ModelGrads};

/// `v <- momentum * v + g`, then `p <- p - lr * v`.
pub fn momentum_step<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return shape_err(format!(
            "momentum step over {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over the trainable kernels of a [`Model`].
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    /// Step size per layer, in declaration order.
    lr: Vec<T>,
    momentum: T,
    velocity: ModelGrads<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &Model<T>, lr: f64, momentum: f64) -> Result<Self> {
        Self::with_layer_rates(model, vec![lr; model.layers().len()], momentum)
    }

    pub fn with_layer_rates(model: &Model<T>, lr: Vec<f64>, momentum: f64) -> Result<Self> {
        if lr.len() != model.layers().len() {
            return shape_err(format!("{} learning rates for {} layers", lr.len(), model.layers().len()));
        }
        if let Some(bad) = lr.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {bad}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr: lr.into_iter().map(real).collect(),
            momentum: real(momentum),
            velocity: ModelGrads::zeros_like(model),
        })
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &ModelGrads<T>) -> Result<()> {
        if grads.layers.len() != model.layers().len() {
            return shape_err("gradient layer count mismatch");
        }
        for (((layer, (gw, gb)), (vw, vb)), &lr) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.velocity.layers.iter_mut())
            .zip(&self.lr)
        {
            let k = layer.kernel_mut();
            momentum_step(k.weights_mut().data_mut(), gw.data(), vw.data_mut(), lr, self.momentum)?;
            momentum_step(k.bias_mut(), gb, vb, lr, self.momentum)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = [1.0f64, 2.0];
        let mut v = [0.0; 2];
        momentum_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, [0.95, 2.1]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = [0.0f64];
        let mut v = [0.0];
        momentum_step(&mut p, &[1.0], &mut v, 1.0, 0.5).unwrap();
        momentum_step(&mut p, &[1.0], &mut v, 1.0, 0.5).unwrap();
        assert_eq!(v, [1.5]);
        assert_eq!(p, [-2.5]);
    }

    #[test]
    fn length_mismatch() {
        assert!(momentum_step(&mut [0.0f32; 2], &[0.0; 3], &mut [0.0; 2], 0.1, 0.9).is_err());
    }
}
