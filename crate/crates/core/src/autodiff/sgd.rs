use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Gradients;
use crate::tensor::{BufferId, Element, TensorView};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + g + weight_decay * w`, `w -= lr * v`.
pub struct Sgd<T: Element> {
    cfg: SgdConfig,
    velocity: HashMap<BufferId, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: HashMap::new(),
        }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    pub fn step(&mut self, params: &[TensorView<T>], grads: &Gradients<T>) {
        let (lr, mu, wd) = (
            T::lit(self.cfg.lr),
            T::lit(self.cfg.momentum),
            T::lit(self.cfg.weight_decay),
        );
        for p in params {
            let g = grads.wrt(p);
            let v = self
                .velocity
                .entry(p.buffer().id())
                .or_insert_with(|| vec![T::zero(); p.numel()]);
            p.update(|i, w| {
                v[i] = mu * v[i] + g[i] + wd * w;
                w - lr * v[i]
            });
        }
    }
}
