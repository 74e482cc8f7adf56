//! Adaptive-moment parameter updates.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&Tensor]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. Every parameter must come with a gradient
    /// of matching shape.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "optimizer_step",
                format!(
                    "registered {} parameters, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().ok_or_else(|| {
                Error::invalid("optimizer_step", format!("missing gradient for parameter {}", i))
            })?;
            if g.shape() != params[i].shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param {:?} vs grad {:?}", params[i].shape(), g.shape()),
                ));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.as_ref().unwrap();
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::full(&[4], 1.5);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], &[Some(Tensor::zeros(&[4]))]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = w^2 from w = 1 at lr 0.05 reaches |w| < 1e-3 within 500 steps.
        let mut w = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &[&w]);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * w.item().unwrap());
            adam.step(&mut [&mut w], &[Some(g)]).unwrap();
        }
        assert!(w.item().unwrap().abs() < 1e-3, "w = {}", w.item().unwrap());
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut a = Tensor::full(&[3], 0.7);
        let mut b = Tensor::full(&[3], 0.7);
        let mut adam = Adam::new(AdamConfig::default(), &[&a, &b]);
        for step in 0..10 {
            let g = Tensor::full(&[3], 0.3 - step as f64 * 0.01);
            adam.step(&mut [&mut a, &mut b], &[Some(g.clone()), Some(g)])
                .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        assert!(adam.step(&mut [&mut p], &[None]).is_err());
        assert!(adam
            .step(&mut [&mut p], &[Some(Tensor::zeros(&[2]))])
            .is_err());
    }
}
