use super::OptimizerKind;
use crate::model::Model;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;

/// Per-parameter optimizer state for one model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        let second = match kind {
            OptimizerKind::Adam => zeros.clone(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            kind,
            first: zeros,
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr`. Frozen models are left untouched
    /// and do not advance the step counter.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        if model.is_frozen() {
            return;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (first, second) = (&mut self.first, &mut self.second);
        match self.kind {
            OptimizerKind::Adam => {
                let bc1 = 1.0 - BETA1.powi(t);
                let bc2 = 1.0 - BETA2.powi(t);
                model.update_params(grads, |i, p, g| {
                    let (m, v) = (&mut first[i], &mut second[i]);
                    for j in 0..p.len() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                });
            }
            OptimizerKind::Sgd => {
                model.update_params(grads, |i, p, g| {
                    let buf = &mut first[i];
                    for j in 0..p.len() {
                        buf[j] = SGD_MOMENTUM * buf[j] + g[j];
                        p[j] -= lr * buf[j];
                    }
                });
            }
        }
    }
}
