use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

/// First-order optimizer with L2 weight decay folded into the gradient.
///
/// State is kept per parameter, so one instance can drive any subset of a
/// store; separate instances never share moments.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    slots: HashMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            slots: HashMap::new(),
        }
    }

    /// Updates every parameter in `ids` that holds a gradient, then clears
    /// those gradients. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        for &id in ids {
            let value = &mut store.get_mut(id).value;
            let Some(grad) = value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let slot = self.slots.entry(id).or_insert_with(|| Slot {
                first: vec![0.0; grad.len()],
                second: vec![0.0; grad.len()],
                steps: 0,
            });
            slot.steps += 1;
            let wd = self.weight_decay;
            let w = value.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for ((wi, &gi), m) in w.iter_mut().zip(&grad).zip(&mut slot.first) {
                        let g = gi + wd * *wi;
                        *m = momentum * *m + g;
                        *wi -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(slot.steps);
                    let c2 = 1.0 - beta2.powi(slot.steps);
                    for (((wi, &gi), m), v) in w.iter_mut().zip(&grad).zip(&mut slot.first).zip(&mut slot.second) {
                        let g = gi + wd * *wi;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *wi -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            value.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamGroup, Tensor};

    fn store_with(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Main, Tensor::vector(vec![value]));
        store.get_mut(id).value.accumulate_grad(&[grad]).unwrap();
        (store, id)
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let (mut store, id) = store_with(1.0, 2.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.5), 0.0);
        opt.step(&mut store, &[id], 0.1).unwrap();
        assert_eq!(store.value(id).data(), &[1.0 - 0.1 * 2.0]);
        store.get_mut(id).value.accumulate_grad(&[2.0]).unwrap();
        opt.step(&mut store, &[id], 0.1).unwrap();
        assert!((store.value(id).data()[0] - (0.8 - 0.1 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut store, id) = store_with(1.0, 5.0);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
        opt.step(&mut store, &[id], 0.01).unwrap();
        assert!((store.value(id).data()[0] - 0.99).abs() < 1e-8);
        assert!(store.value(id).grad().is_none());
    }

    #[test]
    fn zero_lr_and_missing_grads_leave_weights() {
        let (mut store, id) = store_with(1.0, 5.0);
        let other = store.add("b", ParamGroup::Main, Tensor::vector(vec![3.0]));
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1);
        opt.step(&mut store, &[id, other], 0.0).unwrap();
        assert_eq!(store.value(id).data(), &[1.0]);
        assert_eq!(store.value(other).data(), &[3.0]);
    }
}
