//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            batch_size: 36,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.learning_rate > 0.0) || !betas_ok || self.batch_size == 0 || !(self.epsilon > 0.0)
        {
            return Err(Error::Domain(format!(
                "invalid optimiser settings {self:?}"
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Domain("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers mirroring a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamWState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update:
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
    /// m̂ = m/(1−β₁ᵗ)            v̂ = v/(1−β₂ᵗ)
    /// θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)
    /// ```
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Vec<f64>],
        hyper: &OptimHyper,
    ) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters (state tracks {})",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.value.len() != g.len() || self.m[i].len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} values, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((theta, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
                *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= hyper.learning_rate
                    * (m_hat / (v_hat.sqrt() + hyper.epsilon) + hyper.weight_decay * *theta);
            }
        }
        Ok(())
    }
}
