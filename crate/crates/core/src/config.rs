//! Experiment configuration: a hierarchical YAML document layered as
//! built-in defaults < file < `FAIRTRAIN_OUTPUT_DIR` < `dotted.key=value`
//! overrides, then resolved (dataset presets, method parameter defaults)
//! and validated.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mitigation::params::param_defaults;

pub const OUTPUT_DIR_ENV: &str = "FAIRTRAIN_OUTPUT_DIR";

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $s)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some($name::$variant),)+ _ => None }
            }

            pub fn names() -> Vec<&'static str> {
                vec![$($s),+]
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

named_enum!(DatasetName {
    BiasedMnist => "biased_mnist",
    FbBiasedMnist => "fb_biased_mnist",
    BiasedUtkface => "biased_utkface",
    BiasedCelebA => "biased_celeba",
    Waterbirds => "waterbirds",
    UrbanCars => "urbancars",
    ImageNet9 => "imagenet9",
});

named_enum!(MethodName {
    Erm => "erm",
    GroupDro => "groupdro",
    Di => "di",
    End => "end",
    Bb => "bb",
    Badd => "badd",
    Lff => "lff",
    Sd => "sd",
    Jtt => "jtt",
    SoftCon => "softcon",
    Debian => "debian",
    Flac => "flac",
    Mavias => "mavias",
});

named_enum!(ModelName {
    SimpleConvNet => "simple_convnet",
    ResNet18 => "resnet18",
    ResNet50 => "resnet50",
    VitB16 => "vit_b16",
});

named_enum!(OptimizerName {
    Sgd => "sgd",
    Adam => "adam",
});

named_enum!(
    /// Source of the grayscale digits the MNIST-family generators colorize.
    BaseDigits {
        Auto => "auto",
        Mnist => "mnist",
        Synthetic => "synthetic",
    }
);

impl DatasetName {
    pub fn is_generated(self) -> bool {
        matches!(self, DatasetName::BiasedMnist | DatasetName::FbBiasedMnist)
    }

    /// Whether the dataset ships bias annotations (ImageNet-9's biases are unknown).
    pub fn has_bias_labels(self) -> bool {
        self != DatasetName::ImageNet9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub root: PathBuf,
    /// Co-occurrence levels; empty selects the dataset preset.
    pub bias_levels: Vec<f64>,
    /// Attribute CSV, relative to `root`.
    pub metadata: String,
    pub base_digits: BaseDigits,
    /// Cap on base training digits (0 = all).
    pub train_size: usize,
    /// Cap on base test digits (0 = all).
    pub test_size: usize,
    pub jitter: u8,
    /// Resize edge for loaded images (0 = dataset default).
    pub image_size: usize,
    /// Center-crop edge after resize (0 = no crop).
    pub crop_size: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: MethodName,
    pub params: BTreeMap<String, f64>,
    /// Precomputed bias-embedding file (CSV or array container).
    pub embeddings: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: ModelName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Keep `ckpt_epoch<k>` every this many epochs (0 = never).
    pub ckpt_interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: Vec<String>,
    /// Metric driving best-checkpoint selection; `auto` picks per dataset.
    pub primary_metric: String,
    pub selection_split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub method: MethodConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                name: DatasetName::BiasedMnist,
                root: PathBuf::from("data"),
                bias_levels: Vec::new(),
                metadata: "metadata.csv".into(),
                base_digits: BaseDigits::Auto,
                train_size: 0,
                test_size: 0,
                jitter: 0,
                image_size: 0,
                crop_size: 0,
                mean: Vec::new(),
                std: Vec::new(),
                cache: true,
            },
            method: MethodConfig { name: MethodName::Erm, params: BTreeMap::new(), embeddings: String::new() },
            model: ModelConfig { name: ModelName::SimpleConvNet },
            train: TrainConfig {
                epochs: 10,
                batch_size: 64,
                optimizer: OptimizerName::Adam,
                lr: 1e-3,
                weight_decay: 0.0,
                momentum: 0.9,
                lr_milestones: Vec::new(),
                lr_gamma: 0.1,
                ckpt_interval: 0,
            },
            seed: 0,
            output_dir: PathBuf::from("output"),
            eval: EvalConfig {
                splits: vec!["val".into(), "test".into()],
                primary_metric: "auto".into(),
                selection_split: "val".into(),
            },
        }
    }
}

fn defaults_tree() -> Value {
    serde_yaml::to_value(ExperimentConfig::default()).expect("default config serializes")
}

/// Keys whose children are free-form and checked later.
fn is_open_map(path: &str) -> bool {
    path == "method.params"
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Sequence(_) => "list",
        Value::Mapping(_) => "map",
        Value::Tagged(_) => "tagged",
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Checks `user` against the schema tree and merges it into `base`.
fn merge_checked(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Mapping(b), Value::Mapping(u)) => {
            for (k, v) in u {
                let key = k
                    .as_str()
                    .ok_or_else(|| Error::config(path, "non-string key"))?
                    .to_string();
                let full = join(path, &key);
                if is_open_map(path) {
                    if !matches!(v, Value::Number(_)) {
                        return Err(Error::config(full, format!("expected number, got {}", kind(v))));
                    }
                    b.insert(Value::String(key), v.clone());
                    continue;
                }
                match b.get_mut(Value::String(key.clone())) {
                    Some(slot) => merge_checked(slot, v, &full)?,
                    None => return Err(Error::config(full, "unknown key")),
                }
            }
            Ok(())
        }
        (Value::Mapping(_), other) if !is_open_map(path) => {
            Err(Error::config(path, format!("expected map, got {}", kind(other))))
        }
        (slot, v) => {
            let ok = kind(slot) == kind(v)
                || (is_open_map(path) && matches!(v, Value::Mapping(_)))
                || matches!(v, Value::Null);
            if !ok {
                return Err(Error::config(
                    path,
                    format!("type mismatch: expected {}, got {}", kind(slot), kind(v)),
                ));
            }
            if matches!(v, Value::Null) {
                return Err(Error::config(path, "value must not be null"));
            }
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Applies one `dotted.key=value` override.
fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like dotted.key=value"))?;
    let key = key.trim();
    let value: Value = serde_yaml::from_str(raw.trim())
        .map_err(|e| Error::config(key, format!("unparseable override value `{raw}`: {e}")))?;
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut nested = Mapping::new();
    nested.insert(Value::String(leaf.to_string()), value);
    let mut user = Value::Mapping(nested);
    for p in parts.iter().rev() {
        let mut m = Mapping::new();
        m.insert(Value::String(p.to_string()), user);
        user = Value::Mapping(m);
    }
    merge_checked(tree, &user, "")
}

/// Loads, layers, resolves and validates a configuration file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_config_str(&text, overrides)
}

/// As [`load_config`] for in-memory text.
pub fn load_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let user: Value = serde_yaml::from_str(text)
        .map_err(|e| Error::config("<file>", format!("unparseable config text: {e}")))?;
    let mut tree = defaults_tree();
    match &user {
        Value::Null => {}
        Value::Mapping(_) => merge_checked(&mut tree, &user, "")?,
        other => return Err(Error::config("<file>", format!("top level must be a map, got {}", kind(other)))),
    }
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            apply_override(&mut tree, &format!("output_dir={dir}"))?;
        }
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    check_enum_fields(&tree)?;
    let cfg: ExperimentConfig =
        serde_yaml::from_value(tree).map_err(|e| Error::config(error_path(&e), e.to_string()))?;
    cfg.resolved()
}

/// Reports unknown enum values with their key path.
fn check_enum_fields(tree: &Value) -> Result<()> {
    let fields: [(&str, &str, Vec<&str>); 5] = [
        ("dataset", "name", DatasetName::names()),
        ("dataset", "base_digits", BaseDigits::names()),
        ("method", "name", MethodName::names()),
        ("model", "name", ModelName::names()),
        ("train", "optimizer", OptimizerName::names()),
    ];
    for (section, key, names) in fields {
        if let Some(v) = tree.get(section).and_then(|s| s.get(key)).and_then(Value::as_str) {
            if !names.contains(&v) {
                return Err(Error::UnknownName {
                    category: format!("{section}.{key}"),
                    name: v.to_string(),
                    available: names.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
    }
    Ok(())
}

fn error_path(e: &serde_yaml::Error) -> String {
    let msg = e.to_string();
    match msg.split_once(": ") {
        Some((p, _)) if !p.contains(' ') => p.to_string(),
        _ => "<config>".into(),
    }
}

impl ExperimentConfig {
    /// Fills dataset presets and method parameter defaults, then validates.
    pub fn resolved(mut self) -> Result<Self> {
        let ds = self.dataset.name;
        if self.dataset.bias_levels.is_empty() {
            self.dataset.bias_levels = match ds {
                DatasetName::BiasedMnist => vec![0.99],
                DatasetName::FbBiasedMnist => vec![0.99, 0.99],
                _ => Vec::new(),
            };
        }
        if self.dataset.image_size == 0 {
            self.dataset.image_size = if ds.is_generated() { 28 } else { 224 };
        }
        if self.dataset.mean.is_empty() && self.dataset.std.is_empty() {
            if ds.is_generated() {
                self.dataset.mean = vec![0.0; 3];
                self.dataset.std = vec![1.0; 3];
            } else {
                self.dataset.mean = vec![0.485, 0.456, 0.406];
                self.dataset.std = vec![0.229, 0.224, 0.225];
            }
        }
        if self.eval.primary_metric == "auto" {
            self.eval.primary_metric = if ds.has_bias_labels() { "wga" } else { "acc" }.into();
        }
        let defaults = param_defaults(self.method.name, ds);
        for key in self.method.params.keys() {
            if !defaults.contains_key(key.as_str()) {
                let known: Vec<&str> = defaults.keys().copied().collect();
                return Err(Error::config(
                    format!("method.params.{key}"),
                    format!("unknown parameter for method {}; known: [{}]", self.method.name, known.join(", ")),
                ));
            }
        }
        for (k, v) in defaults {
            self.method.params.entry(k.to_string()).or_insert(v);
        }
        self.validate()?;
        Ok(self)
    }

    /// Checks every invariant; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a positive finite number"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if !(t.lr_gamma > 0.0 && t.lr_gamma <= 1.0) {
            return Err(Error::config("train.lr_gamma", "must be in (0, 1]"));
        }
        for (i, &m) in t.lr_milestones.iter().enumerate() {
            if i > 0 && m <= t.lr_milestones[i - 1] {
                return Err(Error::config("train.lr_milestones", "must be strictly increasing"));
            }
            if t.epochs > 0 && m >= t.epochs {
                return Err(Error::config(
                    "train.lr_milestones",
                    format!("milestone {m} must be < epochs ({})", t.epochs),
                ));
            }
        }
        for &rho in &self.dataset.bias_levels {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::config("dataset.bias_levels", format!("level {rho} outside (0, 1]")));
            }
        }
        let expected_levels = match self.dataset.name {
            DatasetName::BiasedMnist => Some(1),
            DatasetName::FbBiasedMnist => Some(2),
            _ => None,
        };
        if let Some(n) = expected_levels {
            if self.dataset.bias_levels.len() != n {
                return Err(Error::config(
                    "dataset.bias_levels",
                    format!("{} needs {n} level(s), got {}", self.dataset.name, self.dataset.bias_levels.len()),
                ));
            }
        }
        if self.dataset.mean.len() != 3 || self.dataset.std.len() != 3 {
            return Err(Error::config("dataset.mean", "mean and std need 3 channel values"));
        }
        if self.dataset.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("dataset.std", "must be positive"));
        }
        if self.dataset.crop_size > self.dataset.image_size {
            return Err(Error::config("dataset.crop_size", "must not exceed image_size"));
        }
        if self.eval.splits.is_empty() {
            return Err(Error::config("eval.splits", "at least one split required"));
        }
        if self.eval.splits.iter().any(|s| s == "train" || s.is_empty()) {
            return Err(Error::config("eval.splits", "evaluation splits must be named and not `train`"));
        }
        if !self.eval.splits.contains(&self.eval.selection_split) {
            return Err(Error::config("eval.selection_split", "must be one of eval.splits"));
        }
        if crate::evaluation::metric_class(&self.eval.primary_metric).is_none() {
            return Err(Error::config(
                "eval.primary_metric",
                format!("unknown metric `{}`", self.eval.primary_metric),
            ));
        }
        crate::mitigation::params::validate(self)?;
        Ok(())
    }

    pub fn param(&self, key: &str) -> f64 {
        *self
            .method
            .params
            .get(key)
            .unwrap_or_else(|| panic!("method parameter `{key}` missing after resolution"))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Hash of every setting that affects results (everything but `output_dir`).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<output_dir>/<dataset>/<method>/seed<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir
            .join(self.dataset.name.as_str())
            .join(self.method.name.as_str())
            .join(format!("seed{}", self.seed))
    }
}
