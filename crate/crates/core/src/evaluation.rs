//! Group-decomposed accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::data::GroupLayout;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub target: usize,
    pub biases: Vec<usize>,
    pub pred: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionLog {
    pub split: String,
    pub rows: Vec<PredictionRow>,
}

impl PredictionLog {
    pub fn new(split: impl Into<String>) -> Self {
        Self { split: split.into(), rows: Vec::new() }
    }

    pub fn push(&mut self, index: usize, target: usize, biases: &[usize], pred: usize) {
        self.rows.push(PredictionRow { index, target, biases: biases.to_vec(), pred });
    }
}

/// Majority bias combination of each class in the training split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictReference {
    pub majority: Vec<Option<Vec<usize>>>,
}

impl ConflictReference {
    /// Ties go to the smallest combination id; classes absent from `rows` get `None`.
    pub fn from_labels<'a>(
        layout: &GroupLayout,
        rows: impl IntoIterator<Item = (usize, &'a [usize])>,
    ) -> Result<Self> {
        let combos = layout.num_combinations();
        let mut counts = vec![0usize; layout.num_classes * combos];
        for (y, a) in rows {
            let g = layout.group_index(y, a)?;
            counts[g] += 1;
        }
        let majority = (0..layout.num_classes)
            .map(|y| {
                let row = &counts[y * combos..(y + 1) * combos];
                let best = (0..combos).fold(None, |best: Option<usize>, c| match best {
                    Some(b) if row[b] >= row[c] => Some(b),
                    _ if row[c] > 0 => Some(c),
                    b => b,
                });
                best.map(|c| layout.combination(c))
            })
            .collect();
        Ok(Self { majority })
    }

    /// A sample conflicts when its biases differ from its class's majority.
    pub fn is_conflicting(&self, target: usize, biases: &[usize]) -> bool {
        match self.majority.get(target) {
            Some(Some(m)) => m.as_slice() != biases,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    /// `None` marks a group with no samples.
    pub group_acc: Vec<Option<f64>>,
    pub group_count: Vec<usize>,
    pub acc: f64,
    pub avg_acc: f64,
    pub wga: f64,
    /// `None` when the split has no bias-conflicting samples or no bias labels.
    pub bca: Option<f64>,
    pub primary: String,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricClass {
    pub name: &'static str,
    pub higher_is_better: bool,
    pub extract: fn(&MetricReport) -> Option<f64>,
}

impl PartialEq for MetricClass {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.higher_is_better == other.higher_is_better
    }
}

impl Eq for MetricClass {}

pub const METRICS: &[MetricClass] = &[
    MetricClass { name: "acc", higher_is_better: true, extract: |r| Some(r.acc) },
    MetricClass { name: "bca", higher_is_better: true, extract: |r| r.bca },
    MetricClass { name: "wga", higher_is_better: true, extract: |r| Some(r.wga) },
    MetricClass { name: "avg_acc", higher_is_better: true, extract: |r| Some(r.avg_acc) },
    MetricClass { name: "error_rate", higher_is_better: false, extract: |r| Some(1.0 - r.acc) },
];

pub fn metric_class(name: &str) -> Option<&'static MetricClass> {
    METRICS.iter().find(|m| m.name == name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricMeta {
    pub name: &'static str,
    pub value: Option<f64>,
    pub higher_is_better: bool,
    pub is_primary: bool,
}

impl MetricReport {
    pub fn value(&self, metric: &str) -> Option<f64> {
        metric_class(metric).and_then(|m| (m.extract)(self))
    }

    pub fn primary_value(&self) -> Option<f64> {
        self.value(&self.primary)
    }

    pub fn metadata(&self) -> Vec<MetricMeta> {
        METRICS
            .iter()
            .map(|m| MetricMeta {
                name: m.name,
                value: (m.extract)(self),
                higher_is_better: m.higher_is_better,
                is_primary: m.name == self.primary,
            })
            .collect()
    }

    /// Fails on the first non-finite value, naming it.
    pub fn check_finite(&self) -> Result<()> {
        let named = [("acc", Some(self.acc)), ("avg_acc", Some(self.avg_acc)), ("wga", Some(self.wga)), ("bca", self.bca)];
        for (name, v) in named {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFiniteMetric(name.into()));
            }
        }
        for (g, v) in self.group_acc.iter().enumerate() {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFiniteMetric(format!("acc_g{g}")));
            }
        }
        Ok(())
    }
}

/// Per-group accuracy and count; absent groups get `None`.
pub fn group_accuracies(log: &PredictionLog, layout: &GroupLayout) -> Result<(Vec<Option<f64>>, Vec<usize>)> {
    let g_total = layout.num_groups();
    let mut correct = vec![0usize; g_total];
    let mut count = vec![0usize; g_total];
    for row in &log.rows {
        let g = layout
            .group_index(row.target, &row.biases)
            .map_err(|e| Error::Metric(format!("row {}: {e}", row.index)))?;
        count[g] += 1;
        correct[g] += usize::from(row.pred == row.target);
    }
    let acc = correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    Ok((acc, count))
}

pub fn summarize(
    group_acc: &[Option<f64>],
    group_count: &[usize],
    log: &PredictionLog,
    reference: Option<&ConflictReference>,
    primary: &str,
) -> Result<MetricReport> {
    let present: Vec<f64> = group_acc.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Metric(format!("split `{}` has no present groups", log.split)));
    }
    let wga = present.iter().copied().fold(f64::INFINITY, f64::min);
    let avg_acc = present.iter().sum::<f64>() / present.len() as f64;
    let total: usize = group_count.iter().sum();
    let correct = log.rows.iter().filter(|r| r.pred == r.target).count();
    let acc = correct as f64 / total as f64;
    let bca = reference.and_then(|r| {
        let (mut n, mut c) = (0usize, 0usize);
        for row in log.rows.iter().filter(|row| r.is_conflicting(row.target, &row.biases)) {
            n += 1;
            c += usize::from(row.pred == row.target);
        }
        (n > 0).then(|| c as f64 / n as f64)
    });
    Ok(MetricReport {
        split: log.split.clone(),
        group_acc: group_acc.to_vec(),
        group_count: group_count.to_vec(),
        acc,
        avg_acc,
        wga,
        bca,
        primary: primary.to_string(),
    })
}

/// Convenience: group accuracies followed by [`summarize`].
pub fn evaluate_log(
    log: &PredictionLog,
    layout: &GroupLayout,
    reference: Option<&ConflictReference>,
    primary: &str,
) -> Result<MetricReport> {
    let (acc, count) = group_accuracies(log, layout)?;
    summarize(&acc, &count, log, reference, primary)
}

/// Strict improvement; ties keep the incumbent.
pub fn is_improvement(candidate: f64, incumbent: f64, higher_is_better: bool) -> bool {
    if higher_is_better {
        candidate > incumbent
    } else {
        candidate < incumbent
    }
}
