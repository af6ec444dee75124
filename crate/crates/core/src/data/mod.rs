//! Samples, splits, bundles, group indexing and batch iteration.

pub mod attribute;
pub mod digits;
pub mod mnist;

use std::collections::{BTreeMap, BTreeSet};

use fairtrain_tensor::Tensor;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub use attribute::{load_attribute_dataset, ImageOptions};
pub use mnist::{generate_biased_mnist, generate_fb_biased_mnist, BiasSpec, Placement, SplitKind};

/// Mixed-radix layout of (target, bias attributes) groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub num_classes: usize,
    pub cardinalities: Vec<usize>,
}

impl GroupLayout {
    pub fn new(num_classes: usize, cardinalities: Vec<usize>) -> Self {
        Self { num_classes, cardinalities }
    }

    pub fn num_attributes(&self) -> usize {
        self.cardinalities.len()
    }

    /// Number of distinct bias-attribute combinations (1 when there are none).
    pub fn num_combinations(&self) -> usize {
        self.cardinalities.iter().product()
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes * self.num_combinations()
    }

    pub fn combination_index(&self, biases: &[usize]) -> Result<usize> {
        if biases.len() != self.cardinalities.len() {
            return Err(Error::Data(format!(
                "{} bias values for {} attributes",
                biases.len(),
                self.cardinalities.len()
            )));
        }
        let mut c = 0;
        for (k, (&a, &card)) in biases.iter().zip(&self.cardinalities).enumerate() {
            if a >= card {
                return Err(Error::Data(format!("bias_{k} value {a} out of range (cardinality {card})")));
            }
            c = c * card + a;
        }
        Ok(c)
    }

    pub fn combination(&self, mut c: usize) -> Vec<usize> {
        let mut out = vec![0; self.cardinalities.len()];
        for (slot, &card) in out.iter_mut().zip(&self.cardinalities).rev() {
            *slot = c % card;
            c /= card;
        }
        out
    }

    /// `g = ((y·|A_1| + a_1)·|A_2| + a_2)…`
    pub fn group_index(&self, target: usize, biases: &[usize]) -> Result<usize> {
        if target >= self.num_classes {
            return Err(Error::Data(format!("target {target} out of range ({} classes)", self.num_classes)));
        }
        Ok(target * self.num_combinations() + self.combination_index(biases)?)
    }

    pub fn group_parts(&self, g: usize) -> Result<(usize, Vec<usize>)> {
        if g >= self.num_groups() {
            return Err(Error::Data(format!("group {g} out of range ({})", self.num_groups())));
        }
        let combos = self.num_combinations();
        Ok((g / combos, self.combination(g % combos)))
    }
}

/// Borrowed view of one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample<'a> {
    /// `H×W×C` intensities.
    pub image: &'a [u8],
    pub target: usize,
    pub biases: &'a [usize],
    pub index: usize,
}

/// Column-oriented storage of a split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_biases: usize,
    pub images: Vec<u8>,
    pub targets: Vec<usize>,
    pub biases: Vec<usize>,
    pub indices: Vec<usize>,
}

impl SampleSet {
    pub fn new(height: usize, width: usize, channels: usize, num_biases: usize) -> Self {
        Self { height, width, channels, num_biases, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn push(&mut self, image: &[u8], target: usize, biases: &[usize], index: usize) -> Result<()> {
        if image.len() != self.image_len() || biases.len() != self.num_biases {
            return Err(Error::Data(format!(
                "sample {index}: image of {} bytes / {} biases, expected {} / {}",
                image.len(),
                biases.len(),
                self.image_len(),
                self.num_biases
            )));
        }
        self.images.extend_from_slice(image);
        self.targets.push(target);
        self.biases.extend_from_slice(biases);
        self.indices.push(index);
        Ok(())
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        let il = self.image_len();
        let m = self.num_biases;
        Sample {
            image: &self.images[i * il..(i + 1) * il],
            target: self.targets[i],
            biases: &self.biases[i * m..(i + 1) * m],
            index: self.indices[i],
        }
    }

    pub fn bias_row(&self, i: usize) -> &[usize] {
        &self.biases[i * self.num_biases..(i + 1) * self.num_biases]
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample<'_>> {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// Samples at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> SampleSet {
        let mut out = SampleSet::new(self.height, self.width, self.channels, self.num_biases);
        for &p in positions {
            let s = self.sample(p);
            out.push(s.image, s.target, s.biases, s.index).expect("same geometry");
        }
        out
    }
}

/// Per-channel normalization applied when batches are materialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

/// Declared dataset metadata; anything left `None` is inferred from the splits.
#[derive(Debug, Clone, Default)]
pub struct BundleMeta {
    pub num_classes: Option<usize>,
    pub class_names: Option<Vec<String>>,
    pub bias_names: Option<Vec<String>>,
    pub cardinalities: Option<Vec<usize>>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub layout: GroupLayout,
    pub class_names: Vec<String>,
    pub bias_names: Vec<String>,
    pub splits: BTreeMap<String, SampleSet>,
    pub normalization: Normalization,
}

pub fn build_bundle(name: &str, splits: BTreeMap<String, SampleSet>, meta: BundleMeta) -> Result<DatasetBundle> {
    if splits.is_empty() {
        return Err(Error::Data(format!("dataset `{name}` has no splits")));
    }
    let train = splits
        .get("train")
        .ok_or_else(|| Error::Data(format!("dataset `{name}` has no train split")))?;
    let (h, w, c, m) = (train.height, train.width, train.channels, train.num_biases);
    for (split, set) in &splits {
        if (set.height, set.width, set.channels, set.num_biases) != (h, w, c, m) {
            return Err(Error::Data(format!("split `{split}` geometry or bias count differs from train")));
        }
    }
    let max_target = splits.values().flat_map(|s| s.targets.iter().copied()).max();
    let k = match (meta.num_classes, max_target) {
        (Some(k), Some(t)) if t >= k => {
            return Err(Error::Data(format!(
                "inconsistent label ranges: target {t} with {k} declared classes"
            )))
        }
        (Some(k), _) => k,
        (None, Some(t)) => t + 1,
        (None, None) => return Err(Error::Data(format!("dataset `{name}` is empty"))),
    };
    let mut cards = vec![0usize; m];
    for set in splits.values() {
        for i in 0..set.len() {
            for (card, &a) in cards.iter_mut().zip(set.bias_row(i)) {
                *card = (*card).max(a + 1);
            }
        }
    }
    let cardinalities = match meta.cardinalities {
        Some(declared) => {
            if declared.len() != m || declared.iter().zip(&cards).any(|(d, c)| c > d) {
                return Err(Error::Data("inconsistent label ranges: bias values exceed declared cardinalities".into()));
            }
            declared
        }
        None => cards.into_iter().map(|c| c.max(1)).collect(),
    };
    if k == 1 {
        log::warn!("dataset `{name}` has a single class");
    }
    let mut seen = BTreeSet::new();
    for (split, set) in &splits {
        for &i in &set.indices {
            if !seen.insert(i) {
                return Err(Error::Data(format!("sample index {i} appears twice (split `{split}`)")));
            }
        }
    }
    let class_names = meta.class_names.unwrap_or_else(|| (0..k).map(|i| i.to_string()).collect());
    if class_names.len() != k {
        return Err(Error::Data(format!("{} class names for {k} classes", class_names.len())));
    }
    let bias_names = meta.bias_names.unwrap_or_else(|| (0..m).map(|i| format!("bias_{i}")).collect());
    Ok(DatasetBundle {
        name: name.to_string(),
        layout: GroupLayout::new(k, cardinalities),
        class_names,
        bias_names,
        splits,
        normalization: meta.normalization,
    })
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.layout.num_classes
    }

    pub fn num_groups(&self) -> usize {
        self.layout.num_groups()
    }

    pub fn split(&self, name: &str) -> Result<&SampleSet> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::Data(format!("dataset `{}` has no split `{name}`", self.name)))
    }

    pub fn train(&self) -> &SampleSet {
        &self.splits["train"]
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let t = self.train();
        (t.channels, t.height, t.width)
    }

    /// Materializes the samples at `positions` of `split` as a normalized batch.
    pub fn batch(&self, split: &str, positions: &[usize]) -> Result<Batch> {
        let set = self.split(split)?;
        make_batch(set, positions, &self.layout, &self.normalization)
    }
}

/// A materialized mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions within the split.
    pub positions: Vec<usize>,
    pub indices: Vec<usize>,
    /// `(n, c, h, w)`.
    pub x: Tensor<f32>,
    pub targets: Vec<usize>,
    pub biases: Vec<usize>,
    pub num_biases: usize,
    pub groups: Vec<usize>,
    /// Flattened bias combination per sample.
    pub combos: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn bias_row(&self, i: usize) -> &[usize] {
        &self.biases[i * self.num_biases..(i + 1) * self.num_biases]
    }

    /// Values of attribute `k` for every sample.
    pub fn attribute(&self, k: usize) -> Vec<usize> {
        (0..self.len()).map(|i| self.biases[i * self.num_biases + k]).collect()
    }
}

pub fn make_batch(set: &SampleSet, positions: &[usize], layout: &GroupLayout, norm: &Normalization) -> Result<Batch> {
    let (h, w, c) = (set.height, set.width, set.channels);
    let plane = h * w;
    let n = positions.len();
    let mut x = vec![0f32; n * c * plane];
    let scale: Vec<f32> = (0..c).map(|ch| 1.0 / (255.0 * norm.std[ch.min(2)])).collect();
    let shift: Vec<f32> = (0..c).map(|ch| norm.mean[ch.min(2)] / norm.std[ch.min(2)]).collect();
    let mut batch = Batch {
        positions: positions.to_vec(),
        indices: Vec::with_capacity(n),
        x: Tensor::zeros(&[0]),
        targets: Vec::with_capacity(n),
        biases: Vec::with_capacity(n * set.num_biases),
        num_biases: set.num_biases,
        groups: Vec::with_capacity(n),
        combos: Vec::with_capacity(n),
    };
    for (b, &p) in positions.iter().enumerate() {
        if p >= set.len() {
            return Err(Error::Data(format!("position {p} out of range ({})", set.len())));
        }
        let s = set.sample(p);
        let dst = &mut x[b * c * plane..(b + 1) * c * plane];
        for (pix, px) in s.image.chunks_exact(c).enumerate() {
            for ch in 0..c {
                dst[ch * plane + pix] = px[ch] as f32 * scale[ch] - shift[ch];
            }
        }
        batch.indices.push(s.index);
        batch.targets.push(s.target);
        batch.biases.extend_from_slice(s.biases);
        batch.groups.push(layout.group_index(s.target, s.biases)?);
        batch.combos.push(layout.combination_index(s.biases)?);
    }
    batch.x = Tensor::new(&[n, c, h, w], x)?;
    Ok(batch)
}

/// How a split is traversed in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    Sequential,
    Shuffle,
    /// `len(weights)` draws with replacement, probability ∝ weight.
    Weighted(Vec<f64>),
}

impl Sampler {
    pub fn epoch_order<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        match self {
            Sampler::Sequential => Ok((0..n).collect()),
            Sampler::Shuffle => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                Ok(order)
            }
            Sampler::Weighted(weights) => {
                if weights.len() != n {
                    return Err(Error::Data(format!("{} sampling weights for {n} samples", weights.len())));
                }
                let dist = WeightedIndex::new(weights)
                    .map_err(|e| Error::Data(format!("invalid sampling weights: {e}")))?;
                Ok((0..n).map(|_| dist.sample(rng)).collect())
            }
        }
    }
}

/// Batches of positions for one epoch, fixed when the epoch starts.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    order: Vec<usize>,
    batch_size: usize,
}

impl BatchPlan {
    pub fn new(order: Vec<usize>, batch_size: usize) -> Self {
        Self { order, batch_size: batch_size.max(1) }
    }

    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn group_index_examples() {
        let l = GroupLayout::new(10, vec![10]);
        assert_eq!(l.group_index(0, &[0]).unwrap(), 0);
        assert_eq!(l.group_index(3, &[7]).unwrap(), 37);
        let l = GroupLayout::new(2, vec![2, 2]);
        assert_eq!(l.group_index(1, &[0, 1]).unwrap(), 5);
        assert!(l.group_index(2, &[0, 0]).is_err());
        assert!(l.group_index(0, &[0, 2]).is_err());
        assert!(l.group_index(0, &[0]).is_err());
    }

    #[test]
    fn group_index_enumerates_eight_combinations() {
        let l = GroupLayout::new(2, vec![2, 2]);
        let mut seen = Vec::new();
        for y in 0..2 {
            for a1 in 0..2 {
                for a2 in 0..2 {
                    // hand-expanded mixed radix
                    let expect = (y * 2 + a1) * 2 + a2;
                    let g = l.group_index(y, &[a1, a2]).unwrap();
                    assert_eq!(g, expect);
                    assert_eq!(l.group_parts(g).unwrap(), (y, vec![a1, a2]));
                    seen.push(g);
                }
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn no_attributes_means_groups_are_classes() {
        let l = GroupLayout::new(9, vec![]);
        assert_eq!(l.num_groups(), 9);
        assert_eq!(l.group_index(4, &[]).unwrap(), 4);
    }

    fn toy_set(targets: &[usize], biases: &[usize], first_index: usize) -> SampleSet {
        let mut s = SampleSet::new(2, 2, 3, 1);
        for (i, (&y, &a)) in targets.iter().zip(biases).enumerate() {
            s.push(&[(i * 10) as u8; 12], y, &[a], first_index + i).unwrap();
        }
        s
    }

    #[test]
    fn bundle_infers_counts() {
        let mut splits = BTreeMap::new();
        splits.insert("train".into(), toy_set(&[0, 1, 2], &[0, 1, 3], 0));
        splits.insert("test".into(), toy_set(&[0, 2], &[2, 1], 3));
        let b = build_bundle("toy", splits, BundleMeta::default()).unwrap();
        assert_eq!(b.layout, GroupLayout::new(3, vec![4]));
        assert_eq!(b.num_groups(), 12);
    }

    #[test]
    fn bundle_rejects_overlapping_indices_and_bad_ranges() {
        let mut splits = BTreeMap::new();
        splits.insert("train".into(), toy_set(&[0, 1], &[0, 1], 0));
        splits.insert("test".into(), toy_set(&[0], &[0], 1));
        assert!(build_bundle("toy", splits, BundleMeta::default()).is_err());

        let mut splits = BTreeMap::new();
        splits.insert("train".into(), toy_set(&[0, 1], &[0, 1], 0));
        splits.insert("test".into(), toy_set(&[5], &[0], 2));
        let meta = BundleMeta { num_classes: Some(2), ..Default::default() };
        let e = build_bundle("toy", splits, meta).unwrap_err();
        assert!(e.to_string().contains("inconsistent label ranges"));
    }

    #[test]
    fn single_class_bundle_is_accepted() {
        let mut splits = BTreeMap::new();
        splits.insert("train".into(), toy_set(&[0, 0], &[0, 1], 0));
        let b = build_bundle("one", splits, BundleMeta::default()).unwrap();
        assert_eq!(b.num_classes(), 1);
    }

    #[test]
    fn batch_normalizes_channels_first() {
        let mut set = SampleSet::new(1, 2, 3, 1);
        set.push(&[0, 51, 255, 255, 0, 102], 1, &[0], 7).unwrap();
        let layout = GroupLayout::new(2, vec![1]);
        let norm = Normalization { mean: [0.0, 0.2, 0.5], std: [1.0, 0.5, 0.25] };
        let b = make_batch(&set, &[0], &layout, &norm).unwrap();
        assert_eq!(b.x.shape(), &[1, 3, 1, 2]);
        let expect = [0.0, 1.0, (0.2 - 0.2) / 0.5, (0.0 - 0.2) / 0.5, (1.0 - 0.5) / 0.25, (0.4 - 0.5) / 0.25];
        for (a, e) in b.x.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
        assert_eq!((b.indices[0], b.groups[0]), (7, 1));
    }

    #[test]
    fn shuffled_order_is_a_permutation_and_deterministic() {
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = Sampler::Shuffle.epoch_order(50, &mut r1).unwrap();
        let b = Sampler::Shuffle.epoch_order(50, &mut r2).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let plan = BatchPlan::new(a, 16);
        assert_eq!(plan.len(), 4);
        assert_eq!(plan.batches().map(<[usize]>::len).collect::<Vec<_>>(), vec![16, 16, 16, 2]);
    }
}
