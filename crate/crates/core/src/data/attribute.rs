//! Attribute-annotated image folders described by a metadata CSV:
//! `filepath, split, target, bias_0, …, bias_{m-1}`.

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::{self, FilterType};

use super::SampleSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageOptions {
    /// Both edges are resized to this size.
    pub image_size: usize,
    /// Center crop after resizing; 0 disables.
    pub crop_size: usize,
}

/// Accepted split tokens: `train`, `val`, `test`, and named test splits `test_<name>`.
pub fn valid_split(token: &str) -> bool {
    matches!(token, "train" | "val" | "test") || token.strip_prefix("test_").is_some_and(|s| !s.is_empty())
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("metadata is missing column `{name}`")))
}

/// Loads every row of `metadata` (relative paths resolve against `root`).
///
/// With `require_bias`, at least `bias_0` must exist.
pub fn load_attribute_dataset(
    root: &Path,
    metadata: &Path,
    opts: ImageOptions,
    require_bias: bool,
) -> Result<BTreeMap<String, SampleSet>> {
    let meta_path = if metadata.is_absolute() { metadata.to_path_buf() } else { root.join(metadata) };
    let file = std::fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: unreadable header: {e}", meta_path.display())))?
        .clone();
    let c_path = column(&headers, "filepath")?;
    let c_split = column(&headers, "split")?;
    let c_target = column(&headers, "target")?;
    let bias_count = headers.iter().filter(|h| h.trim().starts_with("bias_")).count();
    if require_bias && bias_count == 0 {
        return Err(Error::Schema("metadata is missing column `bias_0`".into()));
    }
    let bias_cols: Vec<usize> = (0..bias_count)
        .map(|k| column(&headers, &format!("bias_{k}")))
        .collect::<Result<_>>()?;

    let edge = if opts.crop_size > 0 { opts.crop_size } else { opts.image_size };
    let mut splits: BTreeMap<String, SampleSet> = BTreeMap::new();
    for (row_no, rec) in reader.records().enumerate() {
        let line = row_no + 2;
        let rec = rec.map_err(|e| Error::Data(format!("row {line}: malformed record: {e}")))?;
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let split = field(c_split);
        if !valid_split(split) {
            return Err(Error::Data(format!("row {line}: unknown split `{split}`")));
        }
        let parse = |c: usize, what: &str| -> Result<usize> {
            field(c)
                .parse()
                .map_err(|_| Error::Data(format!("row {line}: {what} `{}` is not a nonnegative integer", field(c))))
        };
        let target = parse(c_target, "target")?;
        let biases: Vec<usize> = bias_cols
            .iter()
            .enumerate()
            .map(|(k, &c)| parse(c, &format!("bias_{k}")))
            .collect::<Result<_>>()?;
        let rel = field(c_path);
        if rel.is_empty() {
            return Err(Error::Data(format!("row {line}: empty filepath")));
        }
        let path = root.join(rel);
        let image = load_image(&path, opts)?;
        splits
            .entry(split.to_string())
            .or_insert_with(|| SampleSet::new(edge, edge, 3, bias_count))
            .push(&image, target, &biases, row_no)?;
    }
    Ok(splits)
}

/// Decodes, resizes, and center-crops to an RGB `H×W×3` buffer.
pub fn load_image(path: &Path, opts: ImageOptions) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Data(format!("{}: cannot decode image: {e}", path.display())))?
        .to_rgb8();
    let s = opts.image_size as u32;
    let mut img = if img.width() == s && img.height() == s {
        img
    } else {
        imageops::resize(&img, s, s, FilterType::Triangle)
    };
    if opts.crop_size > 0 && opts.crop_size < opts.image_size {
        let c = opts.crop_size as u32;
        let off = (s - c) / 2;
        img = imageops::crop(&mut img, off, off, c, c).to_image();
    }
    Ok(img.into_raw())
}
