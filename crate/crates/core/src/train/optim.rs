use std::collections::BTreeMap;

use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay. Moments and step counts are kept per
/// parameter and survive while a parameter is inactive.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter that currently requires grad and holds one.
    pub fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.requires_grad(id)).collect();
        for id in ids {
            let Some(grad) = store.grad(id).map(|g| g.data().to_vec()) else {
                continue;
            };
            let n = grad.len();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let value = store.value_mut(id).data_mut();
            for j in 0..n {
                let g = grad[j];
                st.m[j] = self.beta1 * st.m[j] + (1.0 - self.beta1) * g;
                st.v[j] = self.beta2 * st.v[j] + (1.0 - self.beta2) * g * g;
                let mhat = st.m[j] / bc1;
                let vhat = st.v[j] / bc2;
                value[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * value[j]);
            }
        }
    }
}
