//! Stochastic gradient descent with momentum and a single step decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// First epoch (0-based) that runs at the decayed rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            momentum: 0.9,
            decay_epoch: 300,
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay factor must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.learning_rate
        } else {
            self.learning_rate * self.decay_factor
        }
    }
}

/// Optimizer state: the schedule plus one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.config.lr_at(epoch)
    }

    /// `v <- momentum * v + g; w <- w - lr(epoch) * v` for every parameter
    /// with a gradient. Parameters without one are left untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        epoch: usize,
    ) -> Result<()> {
        let lr = T::from_f64_lossy(self.lr_at(epoch));
        let mu = T::from_f64_lossy(self.config.momentum);
        for (i, p) in params.into_iter().enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![T::zero(); p.len()]);
            }
            let v = &mut self.velocity[i];
            if v.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![v.len()],
                });
            }
            let Some(g) = p.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for ((w, vel), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = mu * *vel + gv;
                *w = *w - lr * *vel;
            }
        }
        Ok(())
    }
}
