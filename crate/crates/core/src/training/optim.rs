//! Adaptive-moment inner optimizer and the Lookahead wrapper.

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub trait Optimizer {
    /// Applies one update to `params` in place.
    fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix], lr: f64) -> Result<()>;
}

fn check_shapes(params: &[&mut DenseMatrix], grads: &[DenseMatrix]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("optimizer tensor count", (params.len(), 1), (grads.len(), 1)));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer step", p.shape(), g.shape()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix], lr: f64) -> Result<()> {
        check_shapes(params, grads)?;
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| DenseMatrix::zeros(g.rows(), g.cols())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() {
            return Err(Error::shape("adam state", (self.first.len(), 1), (grads.len(), 1)));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Keeps slow weights; every `k` inner steps moves them toward the fast
/// weights by `alpha` and resets the fast weights onto them.
#[derive(Debug, Clone)]
pub struct Lookahead<O> {
    pub inner: O,
    k: usize,
    alpha: f64,
    slow: Vec<DenseMatrix>,
    counter: usize,
}

impl<O: Optimizer> Lookahead<O> {
    pub fn new(inner: O, k: usize, alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::arg("lookahead k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::arg(format!("lookahead alpha {alpha} outside [0, 1]")));
        }
        Ok(Self {
            inner,
            k,
            alpha,
            slow: Vec::new(),
            counter: 0,
        })
    }

    pub fn slow_weights(&self) -> &[DenseMatrix] {
        &self.slow
    }
}

impl<O: Optimizer> Optimizer for Lookahead<O> {
    fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix], lr: f64) -> Result<()> {
        if self.slow.is_empty() {
            self.slow = params.iter().map(|p| (**p).clone()).collect();
        }
        self.inner.step(params, grads, lr)?;
        self.counter += 1;
        if self.counter.is_multiple_of(self.k) {
            for (slow, fast) in self.slow.iter_mut().zip(params.iter_mut()) {
                for (s, f) in slow.data_mut().iter_mut().zip(fast.data_mut()) {
                    *s += self.alpha * (*f - *s);
                    *f = *s;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> DenseMatrix {
        DenseMatrix::filled(1, 1, x)
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = DenseMatrix::row_vector(vec![1.0, 1.0, 1.0]);
        let g = DenseMatrix::row_vector(vec![3.0, -0.5, 0.0]);
        adam.step(&mut [&mut p], &[g], 0.01).unwrap();
        assert!((p.get(0, 0) - 0.99).abs() < 1e-9);
        assert!((p.get(0, 1) - 1.01).abs() < 1e-9);
        assert_eq!(p.get(0, 2), 1.0);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let (lr, g, b1, b2, eps) = (0.1, 0.3, 0.9, 0.999, 1e-8);
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = scalar(2.0);
        adam.step(&mut [&mut p], &[scalar(g)], lr).unwrap();
        adam.step(&mut [&mut p], &[scalar(g)], lr).unwrap();

        let mut x = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.get(0, 0) - x).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = scalar(0.0);
        assert!(adam.step(&mut [&mut p], &[DenseMatrix::zeros(2, 1)], 0.1).is_err());
    }

    #[test]
    fn lookahead_quadratic_by_hand() {
        // loss = ½ x², gradient = x, plain SGD inner optimizer
        struct Sgd;
        impl Optimizer for Sgd {
            fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix], lr: f64) -> Result<()> {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
                        *a -= lr * b;
                    }
                }
                Ok(())
            }
        }
        let mut la = Lookahead::new(Sgd, 2, 0.5).unwrap();
        let mut x = scalar(1.0);
        for _ in 0..4 {
            let g = x.clone();
            la.step(&mut [&mut x], &[g], 0.1).unwrap();
        }
        // fast: 1 → 0.9 → 0.81; slow = 1 + 0.5(0.81 - 1) = 0.905
        // fast: 0.905 → 0.8145 → 0.73305; slow = 0.905 + 0.5(0.73305 - 0.905) = 0.819025
        assert!((x.get(0, 0) - 0.819_025).abs() < 1e-12);
        assert!((la.slow_weights()[0].get(0, 0) - 0.819_025).abs() < 1e-12);
    }

    #[test]
    fn lookahead_validates() {
        assert!(Lookahead::new(Adam::new(AdamConfig::default()), 0, 0.5).is_err());
        assert!(Lookahead::new(Adam::new(AdamConfig::default()), 5, 1.5).is_err());
    }
}
