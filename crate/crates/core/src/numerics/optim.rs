use serde::{Deserialize, Serialize};

use crate::numerics::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// Applies the gradients stored in a [`ParamStore`] and clears them.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::AdamW => Optimizer::AdamW {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.05,
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Sgd { lr } | Optimizer::AdamW { lr, .. } => *lr = new_lr,
        }
    }

    /// One update of every trainable parameter that carries a gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        match self {
            Optimizer::Sgd { lr } => {
                for id in ids {
                    if !store.is_trainable(id) {
                        continue;
                    }
                    let t = store.get_mut(id);
                    let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
                    t.data_mut().iter_mut().zip(&g).for_each(|(w, gv)| *w -= *lr * gv);
                }
            }
            Optimizer::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
                step,
                m,
                v,
            } => {
                if m.is_empty() {
                    *m = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
                    *v = m.clone();
                }
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                for (slot, id) in ids.into_iter().enumerate() {
                    if !store.is_trainable(id) {
                        continue;
                    }
                    let t = store.get_mut(id);
                    let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
                    let (ms, vs) = (&mut m[slot], &mut v[slot]);
                    for (i, w) in t.data_mut().iter_mut().enumerate() {
                        ms[i] = *beta1 * ms[i] + (1.0 - *beta1) * g[i];
                        vs[i] = *beta2 * vs[i] + (1.0 - *beta2) * g[i] * g[i];
                        let mhat = ms[i] / bc1;
                        let vhat = vs[i] / bc2;
                        *w -= *lr * (mhat / (vhat.sqrt() + *eps) + *weight_decay * *w);
                    }
                }
            }
        }
        store.clear_grads();
    }
}
