//! Colour-biased MNIST generators and their on-disk cache.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use fairtrain_tensor::Container;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::digits::{base_digits, DigitSet, PIXELS, SIDE};
use super::{build_bundle, BundleMeta, DatasetBundle, Normalization, SampleSet};
use crate::config::{DatasetConfig, DatasetName};
use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 10] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [128, 0, 255],
    [0, 128, 128],
    [128, 128, 0],
];

pub const FOREGROUND_THRESHOLD: u8 = 25;

pub const BIASED_MNIST_PRESETS: [f64; 4] = [0.99, 0.995, 0.997, 0.999];
pub const FB_BIASED_MNIST_PRESETS: [f64; 3] = [0.90, 0.95, 0.99];

pub fn foreground_palette() -> [[u8; 3]; 10] {
    PALETTE.map(|c| c.map(|v| v / 2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Background,
    Foreground,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Biased colour draw (train and the val slice carved from it).
    Train,
    /// Colour drawn uniformly, independent of the digit.
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec {
    pub attribute: String,
    pub rho: f64,
    pub palette: [[u8; 3]; 10],
    pub placement: Placement,
}

impl BiasSpec {
    pub fn background(rho: f64) -> Self {
        Self { attribute: "background_color".into(), rho, palette: PALETTE, placement: Placement::Background }
    }

    pub fn foreground(rho: f64) -> Self {
        Self {
            attribute: "foreground_color".into(),
            rho,
            palette: foreground_palette(),
            placement: Placement::Foreground,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Data(format!("{}: rho {} outside (0, 1]", self.attribute, self.rho)));
        }
        Ok(())
    }

    /// Checks `rho` against a preset list (exact match).
    pub fn check_preset(&self, presets: &[f64]) -> Result<()> {
        self.check()?;
        if !presets.contains(&self.rho) {
            return Err(Error::Data(format!("{}: rho {} is not a preset {presets:?}", self.attribute, self.rho)));
        }
        Ok(())
    }
}

fn draw_color<R: Rng + ?Sized>(rng: &mut R, label: usize, rho: f64, kind: SplitKind) -> usize {
    match kind {
        SplitKind::Train => {
            if rng.random::<f64>() < rho {
                label
            } else {
                (label + 1 + rng.random_range(0..9)) % 10
            }
        }
        SplitKind::Test => rng.random_range(0..10),
    }
}

fn jittered<R: Rng + ?Sized>(rng: &mut R, color: [u8; 3], jitter: u8) -> [u8; 3] {
    if jitter == 0 {
        return color;
    }
    let j = jitter as i32;
    color.map(|v| (v as i32 + rng.random_range(-j..=j)).clamp(0, 255) as u8)
}

/// Colourizes `base` under the given bias specs; sample `i` gets index `first_index + i`.
pub fn colorize(
    base: &DigitSet,
    specs: &[BiasSpec],
    rng: &mut ChaCha8Rng,
    kind: SplitKind,
    first_index: usize,
    jitter: u8,
) -> Result<SampleSet> {
    if base.is_empty() {
        return Err(Error::Data("missing base data: empty digit set".into()));
    }
    for s in specs {
        s.check()?;
    }
    let mut out = SampleSet::new(SIDE, SIDE, 3, specs.len());
    out.images.reserve(base.len() * PIXELS * 3);
    let mut biases = vec![0usize; specs.len()];
    let mut img = vec![0u8; PIXELS * 3];
    for i in 0..base.len() {
        let label = base.labels[i] as usize;
        let mut fg: Option<[u8; 3]> = None;
        let mut bg: Option<[u8; 3]> = None;
        for (k, spec) in specs.iter().enumerate() {
            let c = draw_color(rng, label, spec.rho, kind);
            biases[k] = c;
            let rgb = jittered(rng, spec.palette[c], jitter);
            match spec.placement {
                Placement::Foreground => fg = Some(rgb),
                Placement::Background => bg = Some(rgb),
            }
        }
        for (px, &v) in base.image(i).iter().enumerate() {
            let rgb = if v > FOREGROUND_THRESHOLD { fg.unwrap_or([v; 3]) } else { bg.unwrap_or([v; 3]) };
            img[px * 3..px * 3 + 3].copy_from_slice(&rgb);
        }
        out.push(&img, label, &biases, first_index + i)?;
    }
    Ok(out)
}

pub fn generate_biased_mnist(
    base: &DigitSet,
    rho: f64,
    rng: &mut ChaCha8Rng,
    kind: SplitKind,
    first_index: usize,
) -> Result<SampleSet> {
    colorize(base, &[BiasSpec::background(rho)], rng, kind, first_index, 0)
}

/// Bias vector is `(foreground colour, background colour)`.
pub fn generate_fb_biased_mnist(
    base: &DigitSet,
    rho_fg: f64,
    rho_bg: f64,
    rng: &mut ChaCha8Rng,
    kind: SplitKind,
    first_index: usize,
) -> Result<SampleSet> {
    colorize(base, &[BiasSpec::foreground(rho_fg), BiasSpec::background(rho_bg)], rng, kind, first_index, 0)
}

/// Splits a generated training set: the last 10% (by position) becomes val.
pub fn carve_validation(train: SampleSet) -> (SampleSet, SampleSet) {
    let n = train.len();
    let n_val = n / 10;
    let cut = n - n_val;
    let t: Vec<usize> = (0..cut).collect();
    let v: Vec<usize> = (cut..n).collect();
    (train.subset(&t), train.subset(&v))
}

#[derive(Debug, Serialize)]
struct GenerationKey<'a> {
    name: &'a str,
    levels: &'a [f64],
    seed: u64,
    source: &'a str,
    train: usize,
    test: usize,
    jitter: u8,
}

fn level_tag(levels: &[f64]) -> String {
    levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
}

pub fn cache_dir(root: &Path, name: DatasetName, levels: &[f64], seed: u64) -> PathBuf {
    root.join("generated").join(format!("{}_{}_{}", name.as_str(), level_tag(levels), seed))
}

fn specs_for(name: DatasetName, levels: &[f64]) -> Result<Vec<BiasSpec>> {
    match (name, levels) {
        (DatasetName::BiasedMnist, [rho]) => Ok(vec![BiasSpec::background(*rho)]),
        (DatasetName::FbBiasedMnist, [fg, bg]) => Ok(vec![BiasSpec::foreground(*fg), BiasSpec::background(*bg)]),
        _ => Err(Error::Data(format!("{name}: unexpected bias levels {levels:?}"))),
    }
}

/// Generated train/val/test splits for a colour-biased MNIST dataset, using the cache when enabled.
pub fn generated_splits(
    cfg: &DatasetConfig,
    seed: u64,
    data_rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, SampleSet>> {
    let specs = specs_for(cfg.name, &cfg.bias_levels)?;
    let base = base_digits(&cfg.root, cfg.base_digits, cfg.train_size, cfg.test_size)?;
    let key = GenerationKey {
        name: cfg.name.as_str(),
        levels: &cfg.bias_levels,
        seed,
        source: base.source,
        train: base.train.len(),
        test: base.test.len(),
        jitter: cfg.jitter,
    };
    let fingerprint = serde_json::to_string(&key).expect("key serializes");
    let dir = cache_dir(&cfg.root, cfg.name, &cfg.bias_levels, seed);
    if cfg.cache {
        if let Some(splits) = read_cache(&dir, &fingerprint, specs.len())? {
            return Ok(splits);
        }
    }
    let train_full = colorize(&base.train, &specs, data_rng, SplitKind::Train, 0, cfg.jitter)?;
    let test = colorize(&base.test, &specs, data_rng, SplitKind::Test, base.train.len(), cfg.jitter)?;
    let (train, val) = carve_validation(train_full);
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), train);
    splits.insert("val".to_string(), val);
    splits.insert("test".to_string(), test);
    if cfg.cache {
        write_cache(&dir, &fingerprint, &splits)?;
    }
    Ok(splits)
}

pub fn build_generated_bundle(cfg: &DatasetConfig, seed: u64, data_rng: &mut ChaCha8Rng) -> Result<DatasetBundle> {
    let splits = generated_splits(cfg, seed, data_rng)?;
    let specs = specs_for(cfg.name, &cfg.bias_levels)?;
    let meta = BundleMeta {
        num_classes: Some(10),
        class_names: Some((0..10).map(|d| d.to_string()).collect()),
        bias_names: Some(specs.iter().map(|s| s.attribute.clone()).collect()),
        cardinalities: Some(vec![10; specs.len()]),
        normalization: normalization(&cfg.mean, &cfg.std),
    };
    build_bundle(cfg.name.as_str(), splits, meta)
}

pub fn normalization(mean: &[f64], std: &[f64]) -> Normalization {
    let pick = |v: &[f64], i: usize, d: f32| v.get(i).map_or(d, |&x| x as f32);
    Normalization {
        mean: [pick(mean, 0, 0.0), pick(mean, 1, 0.0), pick(mean, 2, 0.0)],
        std: [pick(std, 0, 1.0), pick(std, 1, 1.0), pick(std, 2, 1.0)],
    }
}

const SPLIT_ORDER: [&str; 3] = ["train", "val", "test"];

fn write_cache(dir: &Path, fingerprint: &str, splits: &BTreeMap<String, SampleSet>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut container = Container::new(fingerprint);
    let mut labels = csv::Writer::from_writer(Vec::new());
    let m = splits["train"].num_biases;
    let mut header = vec!["split".to_string(), "index".into(), "target".into()];
    header.extend((0..m).map(|k| format!("bias_{k}")));
    labels.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for name in SPLIT_ORDER {
        let set = &splits[name];
        container.insert_bytes(name, &[set.len(), set.height, set.width, set.channels], set.images.clone());
        for s in set.iter() {
            let mut row = vec![name.to_string(), s.index.to_string(), s.target.to_string()];
            row.extend(s.biases.iter().map(|b| b.to_string()));
            labels.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    let labels = labels.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    atomic_write(&dir.join("labels.csv"), &labels)?;
    atomic_write(&dir.join("images.bin"), &container.to_bytes()?)
}

fn read_cache(dir: &Path, fingerprint: &str, m: usize) -> Result<Option<BTreeMap<String, SampleSet>>> {
    let (img_path, lab_path) = (dir.join("images.bin"), dir.join("labels.csv"));
    if !img_path.is_file() || !lab_path.is_file() {
        return Ok(None);
    }
    let bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let container = match Container::from_bytes(&bytes) {
        Ok(c) if c.fingerprint == fingerprint => c,
        _ => return Ok(None),
    };
    let mut splits = BTreeMap::new();
    let mut reader = csv::Reader::from_path(&lab_path).map_err(|e| Error::Data(e.to_string()))?;
    let mut rows: BTreeMap<String, Vec<(usize, usize, Vec<usize>)>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", lab_path.display())))?;
        let nums: Vec<usize> = rec
            .iter()
            .skip(1)
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Data(format!("{}: bad label row", lab_path.display())))?;
        if nums.len() != 2 + m {
            return Ok(None);
        }
        rows.entry(rec[0].to_string()).or_default().push((nums[0], nums[1], nums[2..].to_vec()));
    }
    for name in SPLIT_ORDER {
        let (shape, pixels) = container.bytes(name)?;
        let split_rows = rows.remove(name).unwrap_or_default();
        if shape.len() != 4 || shape[0] != split_rows.len() {
            return Ok(None);
        }
        let mut set = SampleSet::new(shape[1], shape[2], shape[3], m);
        let il = set.image_len();
        for (i, (index, target, biases)) in split_rows.into_iter().enumerate() {
            set.push(&pixels[i * il..(i + 1) * il], target, &biases, index)?;
        }
        splits.insert(name.to_string(), set);
    }
    Ok(Some(splits))
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::digits::synthetic_digits;
    use crate::seed::named_rng;

    #[test]
    fn full_correlation_makes_bias_equal_target() {
        let base = synthetic_digits(200, 0).train;
        let mut rng = named_rng(0, "data");
        let set = generate_biased_mnist(&base, 1.0, &mut rng, SplitKind::Train, 0).unwrap();
        assert!(set.iter().all(|s| s.biases == [s.target]));
        let set = generate_fb_biased_mnist(&base, 1.0, 1.0, &mut rng, SplitKind::Train, 0).unwrap();
        assert!(set.iter().all(|s| s.biases == [s.target, s.target]));
    }

    #[test]
    fn pixels_follow_palette_rules() {
        let base = synthetic_digits(20, 0).train;
        let mut rng = named_rng(0, "data");
        let set = generate_biased_mnist(&base, 0.5, &mut rng, SplitKind::Train, 0).unwrap();
        for (i, s) in set.iter().enumerate() {
            for (px, &v) in base.image(i).iter().enumerate() {
                let rgb = &s.image[px * 3..px * 3 + 3];
                if v > FOREGROUND_THRESHOLD {
                    assert_eq!(rgb, [v, v, v]);
                } else {
                    assert_eq!(rgb, PALETTE[s.biases[0]]);
                }
            }
        }
        let set = generate_fb_biased_mnist(&base, 0.5, 0.5, &mut rng, SplitKind::Test, 0).unwrap();
        let fgp = foreground_palette();
        for (i, s) in set.iter().enumerate() {
            for (px, &v) in base.image(i).iter().enumerate() {
                let rgb = &s.image[px * 3..px * 3 + 3];
                let expect = if v > FOREGROUND_THRESHOLD { fgp[s.biases[0]] } else { PALETTE[s.biases[1]] };
                assert_eq!(rgb, expect);
            }
        }
    }

    #[test]
    fn palettes_are_disjoint() {
        let fg = foreground_palette();
        assert!(fg.iter().all(|c| !PALETTE.contains(c)));
        assert_eq!(fg[6], [127, 64, 0]);
    }

    #[test]
    fn out_of_range_rho_and_empty_base_fail() {
        let base = synthetic_digits(10, 0).train;
        let mut rng = named_rng(0, "data");
        assert!(generate_biased_mnist(&base, 0.0, &mut rng, SplitKind::Train, 0).is_err());
        assert!(generate_biased_mnist(&base, 1.01, &mut rng, SplitKind::Train, 0).is_err());
        assert!(generate_biased_mnist(&DigitSet::default(), 0.9, &mut rng, SplitKind::Train, 0).is_err());
    }

    #[test]
    fn presets_are_selectable() {
        for rho in BIASED_MNIST_PRESETS {
            BiasSpec::background(rho).check_preset(&BIASED_MNIST_PRESETS).unwrap();
        }
        for rho in FB_BIASED_MNIST_PRESETS {
            BiasSpec::foreground(rho).check_preset(&FB_BIASED_MNIST_PRESETS).unwrap();
        }
        assert!(BiasSpec::background(0.98).check_preset(&BIASED_MNIST_PRESETS).is_err());
    }

    #[test]
    fn validation_is_the_last_tenth() {
        let base = synthetic_digits(50, 0).train;
        let mut rng = named_rng(0, "data");
        let set = generate_biased_mnist(&base, 0.9, &mut rng, SplitKind::Train, 0).unwrap();
        let (train, val) = carve_validation(set);
        assert_eq!(train.indices, (0..45).collect::<Vec<_>>());
        assert_eq!(val.indices, (45..50).collect::<Vec<_>>());
    }
}
