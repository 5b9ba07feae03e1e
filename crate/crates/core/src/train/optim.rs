use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter optimizer state. Weight decay is decoupled: `w ← w − lr·λ·w`
/// after the gradient update.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    weight_decay: f64,
    /// Momentum buffer (SGD) or first moment (Adam).
    first: BTreeMap<String, Vec<f64>>,
    /// Second moment (Adam only).
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if weight_decay.is_nan() || weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay must be ≥ 0, got {weight_decay}")));
        }
        Ok(Optimizer { kind, learning_rate, weight_decay, first: BTreeMap::new(), second: BTreeMap::new() })
    }

    /// Applies one update; `step` counts from 1 and drives Adam's bias
    /// correction. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        if step == 0 {
            return Err(Error::invalid("optimizer steps count from 1"));
        }
        let lr = self.learning_rate;
        let decay = lr * self.weight_decay;
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.dims() != w.dims() {
                return Err(Error::mismatch("optimizer gradient", w.dims(), g.dims()));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for ((wi, &gi), mi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi as f64;
                        let wv = *wi as f64;
                        *wi = (wv - lr * *mi - decay * wv) as f32;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; w.len()]);
                    let c1 = 1.0 - beta1.powi(step as i32);
                    let c2 = 1.0 - beta2.powi(step as i32);
                    for (((wi, &gi), mi), vi) in
                        w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let gi = gi as f64;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        let wv = *wi as f64;
                        *wi = (wv - lr * update - decay * wv) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
