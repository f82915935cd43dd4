//! Adaptive moment estimation with decoupled weight decay.

use std::collections::HashMap;

use crate::params::{ParamGrads, Parameters};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter state is keyed by name, so the optimizer can be reused
/// across phases even when the set of trainable tensors changes.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

/// Only matrices decay; biases, norms, gates and log-scales do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name == "positional"
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter that has a gradient entry.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &ParamGrads) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let moments = &mut self.moments;
        params.visit_params_mut(&mut |name, values| {
            let Some(g) = grads.get(name) else { return };
            debug_assert_eq!(g.len(), values.len(), "{name}");
            let st = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; values.len()],
                v: vec![0.0; values.len()],
            });
            if st.m.len() != values.len() {
                *st = Moments {
                    m: vec![0.0; values.len()],
                    v: vec![0.0; values.len()],
                };
            }
            let decay = if decays(name) { c.learning_rate * c.weight_decay } else { 0.0 };
            for i in 0..values.len() {
                let gi = g[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                values[i] -= decay * values[i] + c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        });
    }

    /// Forget the moments of parameters matching `pred`.
    pub fn reset_where(&mut self, pred: impl Fn(&str) -> bool) {
        self.moments.retain(|k, _| !pred(k));
    }
}
