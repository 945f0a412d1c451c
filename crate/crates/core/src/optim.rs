//! Bias-corrected Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes.into_iter().map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c))).unzip();
        Self { step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update applied in place. `params` and `grads` are matched by
/// position and must follow the order the state was created with.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "state built for a different parameter list");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        let p = p.as_mut_slice();
        for (k, &gk) in g.as_slice().iter().enumerate() {
            let mk = &mut m.as_mut_slice()[k];
            let vk = &mut v.as_mut_slice()[k];
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = *mk / bc1;
            let v_hat = *vk / bc2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().flat_map(|g| g.as_slice()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Matrix::filled(2, 3, 0.5);
        let mut state = AdamState::new([(2, 3)]);
        adam_step(&mut [&mut p], &[Matrix::filled(2, 3, 1.0)], &mut state, &AdamConfig::default());
        for &v in p.as_slice() {
            assert!((v - (0.5 - 0.001)).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let orig = p.clone();
        let mut state = AdamState::new([(1, 2)]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Matrix::zeros(1, 2)], &mut state, &AdamConfig::default());
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = |w|^2, simulated directly.
        let mut w = Matrix::filled(1, 4, 1.0);
        let mut state = AdamState::new([(1, 4)]);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        for _ in 0..100 {
            let g = w.map(|v| 2.0 * v);
            adam_step(&mut [&mut w], &[g], &mut state, &cfg);
        }
        let f: f64 = w.as_slice().iter().map(|v| v * v).sum();
        assert!(f < 1e-2, "f = {f}");
    }

    #[test]
    fn clipping() {
        let mut g = vec![Matrix::from_rows(&[[3.0, 4.0]])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![Matrix::from_rows(&[[0.3, 0.4]])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], Matrix::from_rows(&[[0.3, 0.4]]));
    }
}
