use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

pub trait Optimizer {
    /// Applies one update with learning rate `lr`. `params[i]` is updated with
    /// `grads[i]`.
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()>;
}

fn check_shapes(params: &[&mut Tensor], grads: &[&Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "optimizer",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Adam with optional AMSGrad and L2 weight decay (PyTorch semantics).
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    max_second_moment: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 0.0, true)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64, amsgrad: bool) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            amsgrad,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            max_second_moment: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        check_shapes(params, grads)?;
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
            self.max_second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: vec![self.first_moment.len()],
                rhs: vec![params.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = lr / bias1;

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let vmax = &mut self.max_second_moment[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let second = if self.amsgrad {
                    vmax[j] = vmax[j].max(v[j]);
                    vmax[j]
                } else {
                    v[j]
                };
                let denom = second.sqrt() / bias2_sqrt + self.eps;
                *w -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum (PyTorch semantics: the first step seeds the
/// buffer with the raw gradient).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            buffers: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        check_shapes(params, grads)?;
        let fresh = self.buffers.is_empty();
        if fresh {
            self.buffers = grads.iter().map(|g| g.data().to_vec()).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let buf = &mut self.buffers[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if !fresh {
                    buf[j] = self.momentum * buf[j] + gj;
                }
                *w -= lr * buf[j];
            }
        }
        Ok(())
    }
}

/// Cosine annealing to zero with period `2·t_max`:
/// `lr(e) = base · (1 + cos(π·e / t_max)) / 2`.
///
/// Past `t_max` the rate rises again, matching the closed form PyTorch's
/// `CosineAnnealingLR` follows when stepped beyond `T_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineLrSchedule {
    pub base_lr: f64,
    pub t_max: usize,
}

impl CosineLrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.t_max == 0 {
            return self.base_lr;
        }
        let phase = std::f64::consts::PI * epoch as f64 / self.t_max as f64;
        self.base_lr * (1.0 + phase.cos()) / 2.0
    }
}
