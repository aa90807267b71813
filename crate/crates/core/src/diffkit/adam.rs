use serde::{Deserialize, Serialize};

use super::ParamBlock;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    config: AdamConfig,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, n_params: usize) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0,1)"));
        }
        Ok(Adam {
            config,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            t: 0,
        })
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamBlock<F>, grads: &ParamBlock<F>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "Adam state",
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.values().iter().position(|g| !g.is_finite()) {
            let at = grads
                .layout()
                .locate(i)
                .map(|(n, k)| format!("{n}[{k}]"))
                .unwrap_or_else(|| i.to_string());
            return Err(Error::NonFinite(format!("gradient at {at}")));
        }
        self.t += 1;
        let (b1, b2) = (F::of(self.config.beta1), F::of(self.config.beta2));
        let lr = F::of(self.config.lr);
        let eps = F::of(self.config.eps);
        let c1 = F::one() - b1.powi(self.t);
        let c2 = F::one() - b2.powi(self.t);
        for (((p, &g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after Adam step".into()));
        }
        Ok(())
    }
}
