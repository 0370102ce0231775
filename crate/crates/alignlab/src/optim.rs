//! SGD and Adam steps over flat weight vectors, with optional
//! gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn sgd(eta: f64) -> Self {
        OptimizerConfig {
            kind: OptKind::Sgd,
            eta,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            clip_norm: None,
        }
    }

    pub fn adam(eta: f64) -> Self {
        OptimizerConfig {
            kind: OptKind::Adam,
            ..OptimizerConfig::sgd(eta)
        }
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = Some(clip_norm);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("beta1/beta2 must be in [0,1)".into()));
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::InvalidConfig("eps_adam must be > 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("clip_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::sgd(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Scale `g` down to `clip_norm` if it exceeds it; never scales up.
pub fn clip_gradient(g: &[f64], clip_norm: Option<f64>) -> Vec<f64> {
    match clip_norm {
        None => g.to_vec(),
        Some(c) => {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                g.iter().map(|v| v * s).collect()
            } else {
                g.to_vec()
            }
        }
    }
}

/// One SGD step: w - eta * clip(g).
pub fn sgd_step(w: &[f64], g: &[f64], cfg: &OptimizerConfig) -> Result<Vec<f64>> {
    if w.len() != g.len() {
        return Err(Error::DimMismatch {
            expected: w.len(),
            got: g.len(),
        });
    }
    let g = clip_gradient(g, cfg.clip_norm);
    Ok(w.iter().zip(&g).map(|(w, g)| w - cfg.eta * g).collect())
}

/// One Adam step with bias correction; denominator is sqrt(v_hat) + eps.
pub fn adam_step(
    w: &[f64],
    g: &[f64],
    state: &AdamState,
    cfg: &OptimizerConfig,
) -> Result<(Vec<f64>, AdamState)> {
    if w.len() != g.len() || state.m.len() != w.len() || state.v.len() != w.len() {
        return Err(Error::DimMismatch {
            expected: w.len(),
            got: g.len(),
        });
    }
    let g = clip_gradient(g, cfg.clip_norm);
    let t = state.t + 1;
    let mut m = Vec::with_capacity(w.len());
    let mut v = Vec::with_capacity(w.len());
    let mut out = Vec::with_capacity(w.len());
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..w.len() {
        let mi = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        let vi = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        out.push(w[i] - cfg.eta * m_hat / (v_hat.sqrt() + cfg.eps_adam));
        m.push(mi);
        v.push(vi);
    }
    Ok((out, AdamState { m, v, t }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sgd_zero_gradient_noop() {
        let w = vec![1.0, -2.0, 3.0];
        let out = sgd_step(&w, &[0.0; 3], &OptimizerConfig::sgd(0.5)).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn sgd_single_step_arithmetic() {
        let out = sgd_step(&[0.0, 0.0], &[1.0, 0.0], &OptimizerConfig::sgd(0.5)).unwrap();
        assert_eq!(out, vec![-0.5, 0.0]);
    }

    #[test]
    fn sgd_clipped_step_has_eta_norm() {
        let g = vec![6.0, 8.0]; // norm 10
        let cfg = OptimizerConfig::sgd(0.3).with_clip(1.0);
        let w = vec![0.5, -0.5];
        let out = sgd_step(&w, &g, &cfg).unwrap();
        let moved: f64 = out
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(moved, cfg.eta, epsilon = 1e-12);
    }

    #[test]
    fn sgd_length_mismatch() {
        assert!(sgd_step(&[0.0; 3], &[0.0; 2], &OptimizerConfig::sgd(0.1)).is_err());
    }

    #[test]
    fn adam_zero_gradient_noop() {
        let w = vec![1.0, 2.0];
        let state = AdamState::new(2);
        let (out, next) = adam_step(&w, &[0.0; 2], &state, &OptimizerConfig::adam(0.1)).unwrap();
        assert_eq!(out, w);
        assert_eq!(next.m, vec![0.0; 2]);
        assert_eq!(next.v, vec![0.0; 2]);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn adam_first_momentum_from_fresh_state() {
        let cfg = OptimizerConfig::adam(0.1);
        let g = vec![0.5, -1.5];
        let (_, next) = adam_step(&[0.0; 2], &g, &AdamState::new(2), &cfg).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(next.m[i], (1.0 - cfg.beta1) * g[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_two_steps_match_scalar_oracle() {
        let cfg = OptimizerConfig::adam(0.01);
        let g = vec![0.7];
        let mut w = vec![0.2];
        let mut state = AdamState::new(1);
        for _ in 0..2 {
            let (nw, ns) = adam_step(&w, &g, &state, &cfg).unwrap();
            w = nw;
            state = ns;
        }
        // Step-by-step scalar recursion.
        let (b1, b2, eps, eta, gg) = (cfg.beta1, cfg.beta2, cfg.eps_adam, cfg.eta, 0.7f64);
        let (mut m, mut v, mut ww) = (0.0f64, 0.0f64, 0.2f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * gg;
            v = b2 * v + (1.0 - b2) * gg * gg;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            ww -= eta * m_hat / (v_hat.sqrt() + eps);
        }
        assert_abs_diff_eq!(w[0], ww, epsilon = 1e-12);
        assert_abs_diff_eq!(state.m[0], m, epsilon = 1e-12);
        assert_abs_diff_eq!(state.v[0], v, epsilon = 1e-12);
    }

    #[test]
    fn adam_zero_betas_literal_contract() {
        let mut cfg = OptimizerConfig::adam(0.1);
        cfg.beta1 = 0.0;
        cfg.beta2 = 0.0;
        let g = vec![0.3, -0.4];
        let (_, next) = adam_step(&[0.0; 2], &g, &AdamState::new(2), &cfg).unwrap();
        assert_eq!(next.m, g);
        assert_eq!(next.v, g.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn clipping_never_increases_norm(
            g in proptest::collection::vec(-10.0..10.0f64, 1..8),
            clip in 0.1..5.0f64,
        ) {
            let clipped = clip_gradient(&g, Some(clip));
            let n0 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1 = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n1 <= n0.min(clip) + 1e-12);
        }

        #[test]
        fn sgd_linearity_in_gradient(
            w in proptest::collection::vec(-1.0..1.0f64, 4),
            g1 in proptest::collection::vec(-1.0..1.0f64, 4),
            g2 in proptest::collection::vec(-1.0..1.0f64, 4),
        ) {
            let cfg = OptimizerConfig::sgd(0.05);
            let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
            let direct = sgd_step(&w, &sum, &cfg).unwrap();
            for i in 0..4 {
                prop_assert!((direct[i] - (w[i] - cfg.eta * sum[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn steps_are_bitwise_deterministic(
            w in proptest::collection::vec(-1.0..1.0f64, 3),
            g in proptest::collection::vec(-1.0..1.0f64, 3),
        ) {
            let cfg = OptimizerConfig::adam(0.01).with_clip(0.5);
            let s = AdamState::new(3);
            let a = adam_step(&w, &g, &s, &cfg).unwrap();
            let b = adam_step(&w, &g, &s, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
