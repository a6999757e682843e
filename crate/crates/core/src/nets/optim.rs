use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::check_len;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps_opt: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::InvalidParameter(format!("Adam betas must lie in [0, 1), got ({beta1}, {beta2})")));
        }
        if !(lr >= 0.0 && eps_opt > 0.0) {
            return Err(Error::InvalidParameter("Adam needs lr >= 0 and eps > 0".into()));
        }
        Ok(Self { lr, beta1, beta2, eps_opt, step: 0, first: Vec::new(), second: Vec::new() })
    }

    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8).expect("default Adam settings are valid")
    }
}

fn check_shapes(params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    check_len(params.len(), grads.len())?;
    for (p, g) in params.iter().zip(grads) {
        check_len(p.len(), g.len())?;
    }
    Ok(())
}

pub fn adam_step(state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    check_shapes(params, grads)?;
    if state.first.is_empty() {
        state.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.second = state.first.clone();
    }
    check_len(state.first.len(), grads.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
        check_len(m.len(), g.len())?;
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps_opt);
        }
    }
    Ok(())
}

/// `p <- p - lr * g`.
pub fn sgd_step(lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.iter_mut().zip(g.iter()).for_each(|(pi, gi)| *pi -= lr * gi);
    }
    Ok(())
}
