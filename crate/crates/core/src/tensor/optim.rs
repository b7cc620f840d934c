use crate::error::{DaclError, Result};

use super::Tensor;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Updates `params` in place and clears their gradients.
    ///
    /// Parameters must be passed in the same order on every call; momentum
    /// buffers are matched by position.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(DaclError::Contract(format!("parameter {i} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.velocity.len() != params.len() {
            return Err(DaclError::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.take_grad().expect("checked above");
            if grad.len() != v.len() {
                return Err(DaclError::shape("sgd_step", "parameter changed size"));
            }
            for ((w, vi), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = self.momentum * *vi + g + self.weight_decay * *w;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}
