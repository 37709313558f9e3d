//! Adam optimizer with L2 regularization folded into the gradients.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{GradBuf, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic L2 coupling: `weight_decay · θ` is added to every gradient
    /// (all tensors, biases included) before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter first/second moment state, index-aligned with the
/// [`Params`] store it was created from.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &Params) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .iter()
            .map(|(_, value)| ArrayD::zeros(value.raw_dim()))
            .collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter tensor. `grads` must come from the
    /// same [`Params`] (index-aligned), holding the raw loss gradients.
    pub fn step(&mut self, params: &mut Params, grads: &GradBuf, lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient buffer mismatch");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in 0..params.len() {
            let theta = params.value_mut(id);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(grads.get(id))
                .for_each(|p, m, v, &g_raw| {
                    let g = g_raw + self.cfg.weight_decay * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn scalar_params(x: f64, y: f64) -> Params {
        let mut ps = Params::default();
        ps.insert("x", ArrayD::from_elem(vec![1], x));
        ps.insert("y", ArrayD::from_elem(vec![1], y));
        ps
    }

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    fn grad_for(ps: &Params, id: usize, g: f64) -> GradBuf {
        let mut grads = ps.zero_grads();
        grads.add(id, &ArrayD::from_elem(vec![1], g));
        grads
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With zeroed moments, bias correction makes m̂ = g and v̂ = g², so
        // the very first update is lr·g/(|g| + eps) regardless of |g|.
        let mut ps = scalar_params(2.0, 0.0);
        let mut opt = Adam::new(no_decay(), &ps);
        let g = -0.37;
        let lr = 0.01;
        let grads = grad_for(&ps, 0, g);
        opt.step(&mut ps, &grads, lr);
        let expected = 2.0 - lr * g / (g.abs() + 1e-8);
        assert_eq!(ps.value(0)[[0]], expected);
        // Untouched tensor: zero grad, zero decay, zero moments => no drift.
        assert_eq!(ps.value(1)[[0]], 0.0);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut ps = scalar_params(-4.0, 0.0);
        let mut opt = Adam::new(no_decay(), &ps);
        for _ in 0..3000 {
            let x = ps.value(0)[[0]];
            let grads = grad_for(&ps, 0, x - 3.0);
            opt.step(&mut ps, &grads, 0.01);
        }
        assert!((ps.value(0)[[0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn weight_decay_pulls_parameters_toward_zero() {
        let mut ps = scalar_params(5.0, -5.0);
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &ps);
        for _ in 0..50 {
            let grads = ps.zero_grads();
            opt.step(&mut ps, &grads, 0.01);
        }
        assert!(ps.value(0)[[0]] > 0.0 && ps.value(0)[[0]] < 5.0);
        assert!(ps.value(1)[[0]] < 0.0 && ps.value(1)[[0]] > -5.0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut ps = scalar_params(1.5, -0.25);
            let mut opt = Adam::new(AdamConfig::default(), &ps);
            for k in 0..20 {
                let grads = grad_for(&ps, 0, (k as f64 * 0.7).sin());
                opt.step(&mut ps, &grads, 6e-5);
            }
            (ps.value(0)[[0]].to_bits(), ps.value(1)[[0]].to_bits())
        };
        assert_eq!(run(), run());
    }
}
