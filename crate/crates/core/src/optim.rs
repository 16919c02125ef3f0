//! SGD with Nesterov momentum and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::{Float, Tensor};

/// One Nesterov update of a single tensor:
///
/// ```text
/// g̃ = grad + wd·param
/// v ← μ·v + g̃
/// param ← param − lr·(g̃ + μ·v)
/// ```
pub fn sgd_nesterov_step<T: Float>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Shape(format!(
            "{name}: parameter {:?}, gradient {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
    }
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p = *p - lr * (g + mu * *v);
    }
    Ok(())
}

/// Velocity buffers for a whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(net: &Network<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Update every parameter; weight decay applies to `*.weight` tensors only.
    pub fn step(&mut self, net: &mut Network<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let names = net.names().to_vec();
        for (((name, p), g), v) in names.iter().zip(net.params_mut()).zip(grads).zip(&mut self.velocity) {
            let wd = if name.ends_with(".weight") { self.weight_decay } else { 0.0 };
            sgd_nesterov_step(name, p, g, v, lr, self.momentum, wd)?;
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `initial · decay^(# milestones ≤ epoch)`.
///
/// Epochs are 0-based, so with milestones `[60, 120, 160]` epochs 0..=59 run
/// at the initial rate and epoch 60 is the first decayed one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub initial: f64,
    pub decay: f64,
    pub milestones: Vec<usize>,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            initial: 0.1,
            decay: 0.2,
            milestones: vec![60, 120, 160],
        }
    }
}

impl StepSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial * self.decay.powi(drops as i32)
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) || !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones {:?} are not strictly increasing", self.milestones)));
        }
        if self.milestones.last().is_some_and(|&m| m >= epochs) {
            return Err(Error::Config(format!(
                "milestones {:?} must be below the epoch count {epochs}",
                self.milestones
            )));
        }
        Ok(())
    }
}
