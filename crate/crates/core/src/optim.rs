//! SGD with classic momentum and Adam.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Momentum SGD state: `v <- m v + g`, `p <- p - lr v`. Weight decay, when
/// enabled for a parameter, is folded into `g` as `wd * p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    buffers: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.buffers
    }

    /// Updates parameter slot `index`. Slots are created on first use and
    /// their length is fixed afterwards.
    pub fn update(&mut self, index: usize, param: &mut [T], grad: &[T], decay: bool) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: vec![param.len()],
                got: vec![grad.len()],
            });
        }
        if self.buffers.len() <= index {
            self.buffers.resize(index + 1, Vec::new());
        }
        let buf = &mut self.buffers[index];
        if buf.is_empty() {
            *buf = vec![T::zero(); param.len()];
        } else if buf.len() != param.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: vec![buf.len()],
                got: vec![param.len()],
            });
        }
        let wd = if decay { self.weight_decay } else { T::zero() };
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
            let g = g + wd * *p;
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

/// Adam with bias correction. Call [`Adam::begin_step`] once per
/// optimization step before updating the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, index: usize, param: &mut [T], grad: &[T]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: vec![param.len()],
                got: vec![grad.len()],
            });
        }
        if self.m.len() <= index {
            self.m.resize(index + 1, Vec::new());
            self.v.resize(index + 1, Vec::new());
        }
        if self.m[index].is_empty() {
            self.m[index] = vec![T::zero(); param.len()];
            self.v[index] = vec![T::zero(); param.len()];
        }
        let t = self.t.max(1);
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (m, v) = (&mut self.m[index], &mut self.v[index]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Step schedule: the base rate divided by 10 at 50% and again at 75% of
/// the total epochs.
pub fn step_schedule(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    let mut lr = base_lr;
    if epoch * 2 >= total_epochs {
        lr /= 10.0;
    }
    if epoch * 4 >= total_epochs * 3 {
        lr /= 10.0;
    }
    lr
}
