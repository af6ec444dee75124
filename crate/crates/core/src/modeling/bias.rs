use fairtrain_tensor::Tensor;
use rand_chacha::ChaCha8Rng;

use super::train::{fit_classifier, predict_split, OptimSettings};
use super::{build_model, Network};
use crate::config::ModelName;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};

/// Frozen auxiliary model whose features encode a bias attribute.
#[derive(Debug, Clone)]
pub struct BiasCapturingModel {
    pub net: Network<f32>,
    /// `None` for the vanilla (target-trained) variant.
    pub attribute: Option<usize>,
}

impl BiasCapturingModel {
    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    /// Eval-mode bias features `b`, shape `(n, D_b)`.
    pub fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let b = self.net.extract_features(x)?;
        if !b.all_finite() {
            return Err(Error::Model("bias-capturing model emitted non-finite features".into()));
        }
        Ok(b)
    }

    /// Bias features for every sample of a split, in position order.
    pub fn split_features(&self, bundle: &DatasetBundle, split: &str) -> Result<Tensor<f32>> {
        let (b, _) = predict_split(&self.net, bundle, split)?;
        if !b.all_finite() {
            return Err(Error::Model("bias-capturing model emitted non-finite features".into()));
        }
        Ok(b)
    }
}

/// ERM on the values of bias attribute `k`; the result is frozen.
pub fn train_bias_capturing_model(
    bundle: &DatasetBundle,
    k: usize,
    epochs: usize,
    arch: ModelName,
    settings: &OptimSettings,
    init_rng: &mut ChaCha8Rng,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<BiasCapturingModel> {
    let m = bundle.layout.num_attributes();
    if k >= m {
        return Err(Error::Model(format!("attribute index {k} out of range ({m} attributes)")));
    }
    let train = bundle.train();
    let labels: Vec<usize> = (0..train.len()).map(|i| train.bias_row(i)[k]).collect();
    let first = labels.first().copied();
    if labels.iter().all(|&a| Some(a) == first) {
        return Err(Error::Model(format!("attribute has one value (bias_{k})")));
    }
    let card = bundle.layout.cardinalities[k];
    let (c, _, _) = bundle.image_shape();
    let mut net = build_model(arch, card, 1, c, init_rng)?;
    fit_classifier(&mut net, bundle, &labels, epochs, settings, shuffle_rng)?;
    Ok(BiasCapturingModel { net, attribute: Some(k) })
}

/// The vanilla ERM model used as the bias-capturing model when bias labels are unavailable.
pub fn train_vanilla_model(
    bundle: &DatasetBundle,
    epochs: usize,
    arch: ModelName,
    settings: &OptimSettings,
    init_rng: &mut ChaCha8Rng,
    shuffle_rng: &mut ChaCha8Rng,
) -> Result<BiasCapturingModel> {
    let train = bundle.train();
    let (c, _, _) = bundle.image_shape();
    let mut net = build_model(arch, bundle.num_classes(), 1, c, init_rng)?;
    fit_classifier(&mut net, bundle, &train.targets, epochs, settings, shuffle_rng)?;
    Ok(BiasCapturingModel { net, attribute: None })
}
