//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::arch::{ParamInfo, ParamSet};
use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

impl AdamState {
    pub fn new(layout: &[ParamInfo]) -> Self {
        AdamState { step: 0, m: ParamSet::zeros(layout), v: ParamSet::zeros(layout) }
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.m.tensors).zip(&mut self.v.tensors) {
            for i in 0..p.data.len() {
                let gi = g.data[i].as_f64();
                let mi = cfg.beta1 * m.data[i] as f64 + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let update = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
                p.data[i] = T::of(p.data[i].as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n: usize) -> Vec<ParamInfo> {
        vec![ParamInfo { name: "p".into(), dims: vec![n], fan_in: 1 }]
    }

    fn set(vals: &[f64]) -> ParamSet<f64> {
        let mut s = ParamSet::zeros(&layout(vals.len()));
        s.tensors[0].data.copy_from_slice(vals);
        s
    }

    #[test]
    fn first_step_unit_gradient() {
        let mut p = set(&[0.0, 5.0, -2.0]);
        let mut st = AdamState::new(&layout(3));
        st.step(&mut p, &set(&[1.0, 1.0, 1.0]), &AdamConfig::default());
        let d = -1e-3 / (1.0 + 1e-8);
        for (got, start) in p.tensors[0].data.iter().zip([0.0, 5.0, -2.0]) {
            assert!((got - start - d).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = set(&[1.5, -0.25]);
        let mut st = AdamState::new(&layout(2));
        st.step(&mut p, &set(&[0.0, 0.0]), &AdamConfig::default());
        assert_eq!(p.tensors[0].data, vec![1.5, -0.25]);
    }

    #[test]
    fn quadratic_matches_hand_trace() {
        // f(x) = x^2, g = 2x, starting at x = 1 with lr 0.1
        let cfg = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            trace.push(x);
        }
        let mut p = set(&[1.0]);
        let mut st = AdamState::new(&layout(1));
        for want in trace {
            let g = set(&[2.0 * p.tensors[0].data[0]]);
            st.step(&mut p, &g, &cfg);
            assert!((p.tensors[0].data[0] - want).abs() < 1e-6, "{} vs {want}", p.tensors[0].data[0]);
        }
        assert_eq!(st.step, 3);
    }
}
