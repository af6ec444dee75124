//! Plain supervised fitting shared by auxiliary models.

use fairtrain_tensor::functional::cross_entropy;
use fairtrain_tensor::{Binding, Graph, Optimizer, Tensor};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Network};
use crate::config::{OptimizerName, TrainConfig};
use crate::data::{BatchPlan, DatasetBundle, Sampler};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSettings {
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl From<&TrainConfig> for OptimSettings {
    fn from(t: &TrainConfig) -> Self {
        Self {
            optimizer: t.optimizer,
            lr: t.lr,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            batch_size: t.batch_size,
        }
    }
}

impl OptimSettings {
    pub fn build(&self) -> Optimizer<f32> {
        match self.optimizer {
            OptimizerName::Sgd => Optimizer::sgd(self.lr, self.momentum, self.weight_decay),
            OptimizerName::Adam => Optimizer::adam(self.lr, self.weight_decay),
        }
    }
}

/// One cross-entropy step on `(x, labels)`; returns the mean loss.
pub fn ce_step(net: &mut Network<f32>, opt: &mut Optimizer<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let mut bind = Binding::new(&net.params);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, &mut bind, xv, Mode::Train)?;
    let ce = cross_entropy(&mut g, out.logits, labels)?;
    let loss = g.mean(ce);
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Training("non-finite loss while fitting auxiliary model".into()));
    }
    let grads = g.backward(loss)?;
    let pg = bind.grads(&g, &grads);
    drop(bind);
    opt.step(&mut net.params, &pg)?;
    net.update_running_stats(&out.bn_stats);
    Ok(value)
}

/// Trains `net` on the train split with per-position `labels`.
pub fn fit_classifier(
    net: &mut Network<f32>,
    bundle: &DatasetBundle,
    labels: &[usize],
    epochs: usize,
    settings: &OptimSettings,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let train = bundle.train();
    if labels.len() != train.len() {
        return Err(Error::Training(format!("{} labels for {} samples", labels.len(), train.len())));
    }
    let mut opt = settings.build();
    for _ in 0..epochs {
        let order = Sampler::Shuffle.epoch_order(train.len(), rng)?;
        for positions in BatchPlan::new(order, settings.batch_size).batches() {
            let batch = bundle.batch("train", positions)?;
            let y: Vec<usize> = positions.iter().map(|&p| labels[p]).collect();
            ce_step(net, &mut opt, &batch.x, &y)?;
        }
    }
    Ok(())
}

/// Eval-mode predictions over a whole split.
pub fn predict_split(net: &Network<f32>, bundle: &DatasetBundle, split: &str) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = bundle.split(split)?.len();
    let d = net.feature_dim();
    let k = net.heads() * net.num_classes();
    let mut feats = Vec::with_capacity(n * d);
    let mut logits = Vec::with_capacity(n * k);
    let positions: Vec<usize> = (0..n).collect();
    for chunk in positions.chunks(512) {
        let batch = bundle.batch(split, chunk)?;
        let (f, l) = net.infer(&batch.x)?;
        feats.extend_from_slice(f.data());
        logits.extend_from_slice(l.data());
    }
    Ok((Tensor::new(&[n, d], feats)?, Tensor::new(&[n, k], logits)?))
}
