use std::collections::BTreeMap;

use super::params::{is_kernel, Gradients, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_betas(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {learning_rate}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every parameter present in `grads`. Kernels get the
    /// effective gradient `g + 2·l2·w`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, l2: f64) -> Result<()> {
        if l2 < 0.0 {
            return Err(Error::invalid(format!("l2 must be non-negative, got {l2}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.len() != g.len() {
                return Err(Error::shape(
                    "adam",
                    format!("`{name}`: parameter has {} elements, gradient {}", p.len(), g.len()),
                ));
            }
            let decay = if is_kernel(name) { 2.0 * l2 } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let ge = gi + decay * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * ge;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * ge * ge;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(name: &str, w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(w));
        p
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut params = single("a.w", 0.7);
        let mut grads = Gradients::new();
        grads.insert("a.w".into(), Tensor::scalar(0.0));
        let mut adam = Adam::new(1e-3).unwrap();
        adam.step(&mut params, &grads, 0.0).unwrap();
        assert_eq!(params.get("a.w").unwrap().item(), 0.7);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let g = -0.37;
        let mut params = single("a.w", 1.25);
        let mut grads = Gradients::new();
        grads.insert("a.w".into(), Tensor::scalar(g));
        let mut adam = Adam::with_betas(lr, b1, b2, eps).unwrap();
        adam.step(&mut params, &grads, 0.0).unwrap();
        // m̂ = g, v̂ = g² after one step
        let m = (1.0 - b1) * g / (1.0 - b1);
        let v = (1.0 - b2) * g * g / (1.0 - b2);
        let expected = 1.25 - lr * m / (v.sqrt() + eps);
        assert!((params.get("a.w").unwrap().item() - expected).abs() < 1e-12);
        assert!((1.25 - expected - lr * g.signum() * g.abs() / (g.abs() + eps)).abs() < 1e-15);
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::vector(vec![0.1, 0.1]));
        params.insert("b.w", Tensor::vector(vec![0.1, 0.1]));
        let mut grads = Gradients::new();
        grads.insert("a.w".into(), Tensor::vector(vec![0.3, -0.2]));
        grads.insert("b.w".into(), Tensor::vector(vec![0.3, -0.2]));
        let mut adam = Adam::new(0.01).unwrap();
        for _ in 0..3 {
            adam.step(&mut params, &grads, 1e-5).unwrap();
        }
        assert_eq!(params.get("a.w").unwrap(), params.get("b.w").unwrap());
    }

    #[test]
    fn l2_touches_kernels_only() {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::scalar(2.0));
        params.insert("a.b", Tensor::scalar(2.0));
        let mut grads = Gradients::new();
        grads.insert("a.w".into(), Tensor::scalar(0.0));
        grads.insert("a.b".into(), Tensor::scalar(0.0));
        let mut adam = Adam::new(0.1).unwrap();
        adam.step(&mut params, &grads, 0.5).unwrap();
        assert!(params.get("a.w").unwrap().item() < 2.0);
        assert_eq!(params.get("a.b").unwrap().item(), 2.0);
    }
}
