use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::MetricReport;

/// 6 significant digits, shortest `%g`-style form.
///
/// Rounding is done once on the exact binary value (half-even on ties).
pub fn format_float(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let (mantissa, e) = sci.split_at(sci.find('e').expect("exponent"));
        format!("{}{e}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn csv_header(num_groups: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "split", "train_loss", "acc", "bca", "wga", "avg_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..num_groups).map(|g| format!("acc_g{g}")));
    h
}

/// Human-readable `log.txt` plus structured `metrics.csv`.
#[derive(Debug)]
pub struct RunLog {
    csv_path: PathBuf,
    log_path: PathBuf,
    header: Vec<String>,
}

impl RunLog {
    /// Starts fresh logs, truncating any existing files.
    pub fn create(dir: &Path, num_groups: usize) -> Result<Self> {
        let log = Self::paths(dir, num_groups);
        let mut w = csv::Writer::from_path(&log.csv_path).map_err(|e| csv_error(&log.csv_path, e))?;
        w.write_record(&log.header).map_err(|e| csv_error(&log.csv_path, e))?;
        w.flush().map_err(|e| Error::io(&log.csv_path, e))?;
        File::create(&log.log_path).map_err(|e| Error::io(&log.log_path, e))?;
        Ok(log)
    }

    /// Reopens logs of an interrupted run, dropping CSV rows past `epoch`.
    pub fn resume(dir: &Path, num_groups: usize, epoch: usize) -> Result<Self> {
        let log = Self::paths(dir, num_groups);
        let mut reader = csv::Reader::from_path(&log.csv_path).map_err(|e| csv_error(&log.csv_path, e))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| csv_error(&log.csv_path, e))?
            .iter()
            .map(String::from)
            .collect();
        if header != log.header {
            return Err(Error::Checkpoint(format!("{}: schema drift in metrics header", log.csv_path.display())));
        }
        let mut kept = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_error(&log.csv_path, e))?;
            let e: usize = rec[0]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad epoch `{}` in metrics.csv", &rec[0])))?;
            if e <= epoch {
                kept.push(rec);
            }
        }
        let mut w = csv::Writer::from_path(&log.csv_path).map_err(|e| csv_error(&log.csv_path, e))?;
        w.write_record(&log.header).map_err(|e| csv_error(&log.csv_path, e))?;
        for rec in &kept {
            w.write_record(rec).map_err(|e| csv_error(&log.csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&log.csv_path, e))?;
        Ok(log)
    }

    fn paths(dir: &Path, num_groups: usize) -> Self {
        Self {
            csv_path: dir.join("metrics.csv"),
            log_path: dir.join("log.txt"),
            header: csv_header(num_groups),
        }
    }

    pub fn csv_path(&self) -> &Path {
        &self.csv_path
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    /// Appends one line to `log.txt`.
    pub fn line(&self, msg: &str) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&self.log_path)
            .map_err(|e| Error::io(&self.log_path, e))?;
        writeln!(f, "{msg}").map_err(|e| Error::io(&self.log_path, e))?;
        log::info!("{msg}");
        Ok(())
    }

    /// One CSV row plus one log line for `(epoch, split)`.
    pub fn log_metrics(&self, report: &MetricReport, epoch: usize, train_loss: Option<f64>) -> Result<()> {
        report.check_finite()?;
        let groups = self.header.len() - 7;
        if report.group_acc.len() != groups {
            return Err(Error::Metric(format!(
                "schema drift: report has {} groups, log has {groups}",
                report.group_acc.len()
            )));
        }
        let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        let mut row = vec![
            epoch.to_string(),
            report.split.clone(),
            opt(train_loss),
            format_float(report.acc),
            opt(report.bca),
            format_float(report.wga),
            format_float(report.avg_acc),
        ];
        row.extend(report.group_acc.iter().map(|&v| opt(v)));
        let file = OpenOptions::new()
            .append(true)
            .open(&self.csv_path)
            .map_err(|e| Error::io(&self.csv_path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.write_record(&row).map_err(|e| csv_error(&self.csv_path, e))?;
        w.flush().map_err(|e| Error::io(&self.csv_path, e))?;

        let mut parts = vec![format!("epoch {epoch}"), report.split.clone()];
        for m in report.metadata() {
            if let Some(v) = m.value {
                if m.is_primary {
                    parts.push(format!("*{} {}*", m.name, format_float(v)));
                } else {
                    parts.push(format!("{} {}", m.name, format_float(v)));
                }
            }
        }
        self.line(&parts.join(" | "))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Parses `metrics.csv` into one map per row.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push(header.iter().cloned().zip(rec.iter().map(String::from)).collect());
    }
    Ok(rows)
}
