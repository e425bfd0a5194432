use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Per-network optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam { m: MlpGrads, v: MlpGrads, t: u64 },
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &Mlp) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: MlpGrads::zeros_like(net),
                v: MlpGrads::zeros_like(net),
                t: 0,
            },
        }
    }

    /// Clips `grads` to `max_norm` (when positive) and applies one descent step.
    pub fn step(&mut self, net: &mut Mlp, grads: &mut MlpGrads, lr: f64, max_norm: f64) {
        if max_norm > 0.0 {
            grads.clip_norm(max_norm);
        }
        match self {
            Optimizer::Sgd => net.apply_step(grads, lr),
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t as i32);
                let c2 = 1.0 - BETA2.powi(*t as i32);
                let update = |p: &mut f64, g: f64, mm: &mut f64, vv: &mut f64| {
                    *mm = BETA1 * *mm + (1.0 - BETA1) * g;
                    *vv = BETA2 * *vv + (1.0 - BETA2) * g * g;
                    *p -= lr * (*mm / c1) / ((*vv / c2).sqrt() + EPS);
                };
                for (i, layer) in net.layers.iter_mut().enumerate() {
                    let (gw, mw, vw) = (&grads.weights[i], &mut m.weights[i], &mut v.weights[i]);
                    for (k, p) in layer.weight.iter_mut().enumerate() {
                        update(p, gw[k], &mut mw[k], &mut vw[k]);
                    }
                    let (gb, mb, vb) = (&grads.biases[i], &mut m.biases[i], &mut v.biases[i]);
                    for (k, p) in layer.bias.iter_mut().enumerate() {
                        update(p, gb[k], &mut mb[k], &mut vb[k]);
                    }
                }
            }
        }
    }
}
