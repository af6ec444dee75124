//! Method hyperparameters: defaults per (method, dataset) and range checks.

use std::collections::BTreeMap;

use crate::config::{DatasetName, ExperimentConfig, MethodName};
use crate::error::{Error, Result};

/// Epochs used to fit bias-capturing and auxiliary models unless overridden.
pub const DEFAULT_BIAS_EPOCHS: f64 = 2.0;

pub fn param_defaults(method: MethodName, dataset: DatasetName) -> BTreeMap<&'static str, f64> {
    use DatasetName as D;
    let pairs: Vec<(&'static str, f64)> = match method {
        MethodName::Erm | MethodName::Di => vec![],
        MethodName::GroupDro => vec![("eta", 0.01)],
        MethodName::End => vec![("lambda_dis", 1.0), ("lambda_ent", 1.0)],
        MethodName::Bb => vec![("epsilon", 1.0)],
        MethodName::Badd => vec![("bias_epochs", DEFAULT_BIAS_EPOCHS)],
        MethodName::Lff => vec![("q", 0.7), ("ema", 0.7)],
        MethodName::Sd => vec![("lambda", 0.1)],
        MethodName::Jtt => vec![("lambda_up", 100.0), ("id_epochs", 1.0)],
        MethodName::SoftCon => vec![
            ("tau", 0.07),
            ("ce_weight", 0.01),
            ("bias_epochs", DEFAULT_BIAS_EPOCHS),
        ],
        MethodName::Debian => vec![],
        MethodName::Flac => {
            let lambda = match dataset {
                D::BiasedCelebA => 30000.0,
                D::Waterbirds | D::UrbanCars => 10000.0,
                D::ImageNet9 => 100.0,
                _ => 1000.0,
            };
            let vanilla = if dataset.has_bias_labels() { 0.0 } else { 1.0 };
            vec![
                ("lambda", lambda),
                ("tau_z", 0.5),
                ("tau_b", 0.5),
                ("vanilla_bias_model", vanilla),
                ("bias_epochs", DEFAULT_BIAS_EPOCHS),
            ]
        }
        MethodName::Mavias => {
            let (l1, l2) = match dataset {
                D::BiasedCelebA => (0.01, 0.5),
                D::Waterbirds => (0.05, 0.6),
                D::UrbanCars => (0.01, 0.4),
                D::ImageNet9 => (0.001, 0.7),
                _ => (0.01, 0.5),
            };
            vec![("lambda1", l1), ("lambda2", l2)]
        }
    };
    pairs.into_iter().collect()
}

/// Methods that consume bias labels at training time.
pub fn needs_bias_labels(method: MethodName) -> bool {
    matches!(
        method,
        MethodName::GroupDro | MethodName::Di | MethodName::End | MethodName::Bb | MethodName::Badd | MethodName::SoftCon
    )
}

pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let method = cfg.method.name;
    if needs_bias_labels(method) && !cfg.dataset.name.has_bias_labels() {
        return Err(Error::config(
            "method.name",
            format!("{method} requires bias labels, which {} does not provide", cfg.dataset.name),
        ));
    }
    let key = |k: &str| format!("method.params.{k}");
    for (k, &v) in &cfg.method.params {
        if !v.is_finite() {
            return Err(Error::config(key(k), "must be finite"));
        }
        let ok = match k.as_str() {
            "eta" | "lambda_dis" | "lambda_ent" | "lambda" | "lambda1" | "lambda2" | "ce_weight" => v >= 0.0,
            "epsilon" | "tau" | "tau_z" | "tau_b" => v > 0.0,
            "q" | "ema" => v > 0.0 && v <= 1.0,
            "lambda_up" => v >= 1.0,
            "vanilla_bias_model" => v == 0.0 || v == 1.0,
            "bias_epochs" | "id_epochs" => v >= 1.0 && v.fract() == 0.0,
            _ => true,
        };
        if !ok {
            return Err(Error::config(key(k), format!("value {v} out of range")));
        }
    }
    if method == MethodName::Jtt && cfg.train.epochs > 0 {
        let id = cfg.method.params.get("id_epochs").copied().unwrap_or(1.0);
        if id as usize >= cfg.train.epochs {
            return Err(Error::config(
                key("id_epochs"),
                format!("identification epochs ({id}) must be fewer than train.epochs ({})", cfg.train.epochs),
            ));
        }
    }
    if method == MethodName::Flac
        && cfg.method.params.get("vanilla_bias_model") == Some(&0.0)
        && !cfg.dataset.name.has_bias_labels()
    {
        return Err(Error::config(
            key("vanilla_bias_model"),
            format!("{} has no bias labels; set vanilla_bias_model: 1", cfg.dataset.name),
        ));
    }
    Ok(())
}
