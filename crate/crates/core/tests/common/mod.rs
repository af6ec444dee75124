#![allow(dead_code)]

pub mod losses;

use std::path::Path;

use fairtrain_core::config::ExperimentConfig;
use fairtrain_core::data::GroupLayout;
use fairtrain_core::evaluation::{evaluate_log, ConflictReference, MetricReport, PredictionLog};
use fairtrain_core::load_config_str;
use fairtrain_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small Biased-MNIST run rooted in `dir`.
pub fn tiny_config(dir: &Path, method: &str, extra: &[&str]) -> ExperimentConfig {
    let text = format!(
        "dataset:\n  name: biased_mnist\n  root: {}\n  train_size: 200\n  test_size: 100\n  bias_levels: [0.9]\n\
         method:\n  name: {method}\n\
         train:\n  epochs: 2\n  batch_size: 32\n\
         output_dir: {}\n",
        dir.join("data").display(),
        dir.join("out").display()
    );
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    load_config_str(&text, &overrides).expect("tiny config loads")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Writes a tiny image folder plus `metadata.csv` shaped like a real attribute dataset.
///
/// Every split gets `per_split` rows; targets cycle over `classes` and each bias
/// column `k` cycles over `cards[k]` values, offset so all groups appear.
pub fn write_standin(dir: &Path, classes: usize, cards: &[usize], splits: &[&str], per_split: usize) {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut csv = String::from("filepath,split,target");
    for k in 0..cards.len() {
        csv.push_str(&format!(",bias_{k}"));
    }
    csv.push('\n');
    let mut n = 0usize;
    for split in splits {
        for i in 0..per_split {
            let y = i % classes;
            let rel = format!("images/{n:05}.png");
            let shade = (40 + 20 * y + 7 * (i / classes)) as u8;
            image::RgbImage::from_fn(10, 12, |x, _| image::Rgb([shade, (x * 20) as u8, 255 - shade]))
                .save(dir.join(&rel))
                .unwrap();
            csv.push_str(&format!("{rel},{split},{y}"));
            for (k, &card) in cards.iter().enumerate() {
                csv.push_str(&format!(",{}", (i / classes + k) % card));
            }
            csv.push('\n');
            n += 1;
        }
    }
    std::fs::write(dir.join("metadata.csv"), csv).unwrap();
}

/// Metrics recomputed by enumerating every (class, bias combination) with explicit loops.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub acc: f64,
    pub bca: Option<f64>,
    pub wga: f64,
    pub avg_acc: f64,
    pub group_acc: Vec<Option<f64>>,
}

/// All value tuples of the given cardinalities, first attribute slowest.
pub fn all_combinations(cards: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &card in cards {
        let mut next = Vec::new();
        for prefix in &out {
            for a in 0..card {
                let mut v = prefix.clone();
                v.push(a);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

/// `rows` and `train` are `(target, biases, pred)`; predictions in `train` are ignored.
pub fn oracle_metrics(
    rows: &[(usize, Vec<usize>, usize)],
    train: &[(usize, Vec<usize>, usize)],
    classes: usize,
    cards: &[usize],
) -> OracleMetrics {
    let combos = all_combinations(cards);
    let mut group_acc = Vec::new();
    for y in 0..classes {
        for combo in &combos {
            let members: Vec<_> = rows.iter().filter(|r| r.0 == y && &r.1 == combo).collect();
            if members.is_empty() {
                group_acc.push(None);
            } else {
                let hits = members.iter().filter(|r| r.2 == r.0).count();
                group_acc.push(Some(hits as f64 / members.len() as f64));
            }
        }
    }
    let present: Vec<f64> = group_acc.iter().flatten().copied().collect();
    let wga = present.iter().copied().fold(f64::INFINITY, f64::min);
    let avg_acc = present.iter().sum::<f64>() / present.len() as f64;
    let acc = rows.iter().filter(|r| r.2 == r.0).count() as f64 / rows.len() as f64;

    let majority: Vec<Option<&Vec<usize>>> = (0..classes)
        .map(|y| {
            let mut best: Option<(&Vec<usize>, usize)> = None;
            for combo in &combos {
                let n = train.iter().filter(|r| r.0 == y && &r.1 == combo).count();
                if n > 0 && best.is_none_or(|(_, b)| n > b) {
                    best = Some((combo, n));
                }
            }
            best.map(|(c, _)| c)
        })
        .collect();
    let conflicting: Vec<_> = rows
        .iter()
        .filter(|r| matches!(majority[r.0], Some(m) if *m != r.1))
        .collect();
    let bca = (!conflicting.is_empty())
        .then(|| conflicting.iter().filter(|r| r.2 == r.0).count() as f64 / conflicting.len() as f64);
    OracleMetrics { acc, bca, wga, avg_acc, group_acc }
}

/// A random evaluation log and training log for the oracle comparison.
pub fn random_logs(
    rng: &mut ChaCha8Rng,
) -> (usize, Vec<usize>, Vec<(usize, Vec<usize>, usize)>, Vec<(usize, Vec<usize>, usize)>) {
    let classes = rng.random_range(1..=5);
    let m = rng.random_range(0..=2);
    let cards: Vec<usize> = (0..m).map(|_| rng.random_range(1..=4)).collect();
    let skill = rng.random_range(0.0..1.0);
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<(usize, Vec<usize>, usize)> {
        (0..n)
            .map(|_| {
                let y = rng.random_range(0..classes);
                let a: Vec<usize> = cards.iter().map(|&c| rng.random_range(0..c)).collect();
                let pred = if rng.random::<f64>() < skill { y } else { rng.random_range(0..classes) };
                (y, a, pred)
            })
            .collect()
    };
    let n = rng.random_range(1..=200);
    let rows = draw(n, rng);
    let n_train = rng.random_range(0..=200);
    let train = draw(n_train, rng);
    (classes, cards, rows, train)
}

/// The library's report for rows of `(target, biases, pred)`, conflicts judged against `train`.
pub fn report_for(
    classes: usize,
    cards: &[usize],
    rows: &[(usize, Vec<usize>, usize)],
    train: &[(usize, Vec<usize>, usize)],
) -> MetricReport {
    let layout = GroupLayout::new(classes, cards.to_vec());
    let mut log = PredictionLog::new("test");
    for (i, (y, a, p)) in rows.iter().enumerate() {
        log.push(i, *y, a, *p);
    }
    let reference = ConflictReference::from_labels(&layout, train.iter().map(|r| (r.0, r.1.as_slice()))).unwrap();
    evaluate_log(&log, &layout, Some(&reference), "wga").unwrap()
}
