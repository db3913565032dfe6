use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched (no decay, no moment update).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<usize> {
        let mut updated = 0;
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_tensor();
            let st = match self.state.get_mut(name) {
                Some(s) => s,
                None => self.state.entry(name.to_string()).or_insert(Moments {
                    m: w.zeros_like()?,
                    v: w.zeros_like()?,
                    steps: 0,
                }),
            };
            st.steps += 1;
            // detached so the moments never keep a step's graph alive
            st.m = ((&st.m * self.beta1)? + (g * (1.0 - self.beta1))?)?.detach();
            st.v = ((&st.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let c1 = 1.0 - self.beta1.powi(st.steps as i32);
            let c2 = 1.0 - self.beta2.powi(st.steps as i32);
            let m_hat = (&st.m / c1)?;
            let v_hat = (&st.v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = ((w * (1.0 - lr * self.weight_decay))? - (update * lr)?)?;
            var.set(&next.detach())?;
            updated += 1;
        }
        Ok(updated)
    }
}
