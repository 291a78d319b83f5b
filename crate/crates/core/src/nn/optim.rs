use serde::{Deserialize, Serialize};

use super::layers::Slot;
use super::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

pub const SGD_MOMENTUM: f32 = 0.9;
pub const ADAM_BETAS: (f32, f32) = (0.9, 0.999);
pub const ADAM_EPS: f32 = 1e-8;

/// First-order optimizer over a network's parameters in visit order.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self { kind, lr, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, net: &mut Network) {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let (kind, lr) = (self.kind, self.lr);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut i = 0;
        net.visit(&mut |_, slot| {
            let Slot::Param(p) = slot else { return };
            if m_all.len() <= i {
                m_all.push(vec![0.0; p.value.len()]);
                v_all.push(if kind == OptimizerKind::Adam { vec![0.0; p.value.len()] } else { Vec::new() });
            }
            let m = &mut m_all[i];
            let values = p.value.as_slice_mut().expect("contiguous parameter");
            let grads = p.grad.as_slice_mut().expect("contiguous gradient");
            match kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, g), mv) in values.iter_mut().zip(grads.iter()).zip(m.iter_mut()) {
                        *mv = SGD_MOMENTUM * *mv + g;
                        *w -= lr * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut v_all[i];
                    for (((w, g), mv), vv) in values.iter_mut().zip(grads.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = b1 * *mv + (1.0 - b1) * g;
                        *vv = b2 * *vv + (1.0 - b2) * g * g;
                        *w -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
            grads.fill(0.0);
            i += 1;
        });
    }
}
