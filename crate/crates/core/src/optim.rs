//! First-order optimizers over lists of parameter tensors.
//!
//! Parameters are passed positionally on every step; the caller must keep
//! the order stable for the lifetime of an optimizer.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Changes the step size; moment estimates are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        check_lengths(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain stochastic gradient descent with a multiplicative decay hook.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        check_lengths(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= self.lr * gi;
                }
            }
        }
        Ok(())
    }
}

fn check_lengths(params: &[&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err(
            "optimizer",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(shape_err("optimizer", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, -1.0]);
        let g = Tensor::vector(vec![3.0, -0.5]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut p = Tensor::vector(vec![4.0]);
        let mut opt = Sgd::new(0.25);
        for _ in 0..100 {
            let g = p.map(|x| 2.0 * x);
            opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        assert!(p.data()[0].abs() < 1e-12);
    }
}
