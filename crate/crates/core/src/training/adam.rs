//! Adam with decoupled weight decay.

use crate::scnet::arch::OptimizerState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        Self {
            config,
            state: OptimizerState {
                step: 0,
                first_moment: vec![0.0; param_count],
                second_moment: vec![0.0; param_count],
            },
        }
    }

    /// Resumes from saved moments.
    pub fn with_state(config: AdamConfig, state: OptimizerState) -> Self {
        Self { config, state }
    }

    /// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.state.first_moment.len());
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = &mut self.state.first_moment;
        let v = &mut self.state.second_moment;
        for i in 0..params.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            params[i] -= lr * (update + weight_decay * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_stepped_quadratic() {
        // loss (p − 3)², gradient 2(p − 3)
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, 1);
        let mut p = [0.5];
        let (mut hp, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let lr = 0.1;
        for t in 1..=5 {
            let g = 2.0 * (p[0] - 3.0);
            adam.step(&mut p, &[g], lr);

            let g = 2.0 * (hp - 3.0);
            m = 0.9 * m + (1.0 - 0.9) * g;
            v = 0.999 * v + (1.0 - 0.999) * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            hp -= lr * (mhat / (vhat.sqrt() + 1e-8) + 1e-6 * hp);
            assert_eq!(p[0], hp, "step {t}");
        }
        // first step of Adam moves by ≈ lr regardless of gradient scale
        assert!(p[0] > 0.5 + 4.0 * lr);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let mut p = [1.0, -2.0, 0.25];
        adam.step(&mut p, &[0.3, 1.0, -4.0], 0.0);
        assert_eq!(p, [1.0, -2.0, 0.25]);
    }
}
