//! Adam optimizer with bias correction.

use std::collections::HashMap;

use super::{ParamStore, Real};
use crate::{Error, Result};

/// Per-parameter optimizer state.
pub struct AdamState<S: Real> {
    pub step: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

/// Adam over a named parameter store. States are created lazily on the first
/// step for each parameter and keyed by name, so the update sequence does not
/// depend on map iteration order.
pub struct Adam<S: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: HashMap<String, AdamState<S>>,
}

impl<S: Real> Adam<S> {
    /// Defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, states: HashMap::new() }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<S>> {
        self.states.get(name)
    }

    /// One update over every parameter in the store, in registration order.
    pub fn step(&mut self, params: &ParamStore<S>) -> Result<()> {
        for (name, t) in params.iter() {
            let grad = t.grad().ok_or_else(|| {
                Error::Numeric(format!("adam step: parameter {name} has no gradient"))
            })?;
            let st = self.states.entry(name.to_string()).or_insert_with(|| AdamState {
                step: 0,
                m: vec![S::zero(); grad.len()],
                v: vec![S::zero(); grad.len()],
                lr: S::from_f64(self.lr),
                beta1: S::from_f64(self.beta1),
                beta2: S::from_f64(self.beta2),
                eps: S::from_f64(self.eps),
            });
            st.step += 1;
            let (b1, b2) = (st.beta1, st.beta2);
            let bc1 = S::one() - b1.powi(st.step as i32);
            let bc2 = S::one() - b2.powi(st.step as i32);
            let (lr, eps) = (st.lr, st.eps);
            let (m, v) = (&mut st.m, &mut st.v);
            t.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (S::one() - b1) * g;
                    v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    data[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}
