//! Per-sample bias embeddings consumed by MAVias.

use std::collections::BTreeMap;
use std::path::Path;

use fairtrain_tensor::{Container, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::SampleSet;
use crate::error::{Error, Result};

/// Dimension of the tag embeddings synthesized for generated datasets.
pub const SYNTHETIC_EMBED_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: BTreeMap<usize, Vec<f32>>,
}

impl EmbeddingTable {
    /// Rows for the given sample indices, `(n, dim)`; a missing index is an error.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            let row = self
                .rows
                .get(&i)
                .ok_or_else(|| Error::Data(format!("missing embedding for sample index {i}")))?;
            data.extend_from_slice(row);
        }
        Ok(Tensor::new(&[indices.len(), self.dim], data)?)
    }
}

/// Reads a CSV (`index,e0,e1,…`) or array-container (`indices`, `embeddings`) file.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Ok(c) = Container::from_bytes(&bytes) {
        return from_container(&c, path);
    }
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?.clone();
    if header.get(0) != Some("index") || header.len() < 2 {
        return Err(Error::Schema(format!(
            "{}: header must be `index,e0,…,e<D-1>`",
            path.display()
        )));
    }
    let dim = header.len() - 1;
    let mut rows = BTreeMap::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Schema(format!("{}: row {}: {e}", path.display(), r + 1)))?;
        let bad = || Error::Schema(format!("{}: row {}: not a number", path.display(), r + 1));
        let index: usize = rec[0].trim().parse().map_err(|_| bad())?;
        let v: Vec<f32> = rec.iter().skip(1).map(|s| s.trim().parse::<f32>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        if v.len() != dim {
            return Err(Error::Schema(format!("{}: row {}: expected {dim} values", path.display(), r + 1)));
        }
        rows.insert(index, v);
    }
    Ok(EmbeddingTable { dim, rows })
}

fn from_container(c: &Container, path: &Path) -> Result<EmbeddingTable> {
    let schema = |m: String| Error::Schema(format!("{}: {m}", path.display()));
    let idx: Tensor<f64> = c.tensor("indices").map_err(|e| schema(e.to_string()))?;
    let emb: Tensor<f32> = c
        .tensor::<f32>("embeddings")
        .or_else(|_| c.tensor::<f64>("embeddings").map(|t| t.cast()))
        .map_err(|e| schema(e.to_string()))?;
    if emb.rank() != 2 || emb.dim(0) != idx.len() {
        return Err(schema("embeddings must be (n, D) with n matching indices".into()));
    }
    let dim = emb.dim(1);
    let rows = idx
        .data()
        .iter()
        .enumerate()
        .map(|(i, &k)| (k as usize, emb.row(i).to_vec()))
        .collect();
    Ok(EmbeddingTable { dim, rows })
}

/// Tag-style embeddings for datasets with known bias labels: each value of each
/// attribute gets a random unit vector and a sample's embedding is the sum over
/// its attribute values.
pub fn synthesize_embeddings<R: Rng + ?Sized>(
    splits: &[&SampleSet],
    cardinalities: &[usize],
    dim: usize,
    rng: &mut R,
) -> EmbeddingTable {
    let tags: Vec<Vec<Vec<f32>>> = cardinalities
        .iter()
        .map(|&card| {
            (0..card)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.iter().map(|x| (x / norm) as f32).collect()
                })
                .collect()
        })
        .collect();
    let mut rows = BTreeMap::new();
    for set in splits {
        for s in set.iter() {
            let mut e = vec![0f32; dim];
            for (k, &a) in s.biases.iter().enumerate() {
                for (dst, &t) in e.iter_mut().zip(&tags[k][a]) {
                    *dst += t;
                }
            }
            rows.insert(s.index, e);
        }
    }
    EmbeddingTable { dim, rows }
}
