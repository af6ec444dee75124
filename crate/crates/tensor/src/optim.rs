//! First-order optimizers updating a [`ParamStore`] in place.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::{Float, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// SGD with momentum or Adam, both with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self { kind, lr, weight_decay, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, lr, weight_decay)
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, lr, weight_decay)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let lr = T::lit(self.lr);
        let wd = T::lit(self.weight_decay);
        for (name, grad) in grads {
            if !params.is_trainable(name) {
                continue;
            }
            let p = params
                .get_mut(name)
                .ok_or_else(|| TensorError::Index(format!("no parameter named {name}")))?;
            if p.shape() != grad.shape() {
                return Err(TensorError::Shape(format!(
                    "gradient {:?} for parameter {name} of shape {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            let shape = p.shape().to_vec();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::lit(momentum);
                    let fresh = !self.first.contains_key(name);
                    let buf = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
                        let d = g + wd * *w;
                        *v = if momentum == 0.0 || fresh { d } else { mu * *v + d };
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let bc1 = T::lit(1.0 - beta1.powi(self.step as i32));
                    let bc2 = T::lit(1.0 - beta2.powi(self.step as i32));
                    let e = T::lit(eps);
                    let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
                    for (((w, &g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let d = g + wd * *w;
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers keyed `first/<param>` and `second/<param>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self.first.iter().map(|(k, v)| (format!("first/{k}"), v.clone())).collect();
        out.extend(self.second.iter().map(|(k, v)| (format!("second/{k}"), v.clone())));
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix("first/") {
                self.first.insert(name.to_string(), t);
            } else if let Some(name) = key.strip_prefix("second/") {
                self.second.insert(name.to_string(), t);
            } else {
                return Err(TensorError::Container(format!("unexpected optimizer entry {key}")));
            }
        }
        Ok(())
    }
}
