//! CSV outputs: per-epoch training metrics and supervision-ratio traces.
//!
//! `metrics.csv` columns: epoch, strategy, lr, train_loss_head_1..K+1,
//! test_err_head_1..K+1, seconds. `ratios.csv` columns: epoch, strategy,
//! layer, ratio. UTF-8, comma-separated, dot decimal. Every write replaces
//! the file atomically (temp + rename), so interrupted runs never leave torn
//! output; rows only ever get appended.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ratio::RatioTrace;
use crate::train::{EpochRow, Strategy};

pub fn metrics_header(n_heads: usize) -> String {
    let mut cols = vec![
        "epoch".to_string(),
        "strategy".to_string(),
        "lr".to_string(),
    ];
    for k in 1..=n_heads {
        cols.push(format!("train_loss_head_{k}"));
    }
    for k in 1..=n_heads {
        cols.push(format!("test_err_head_{k}"));
    }
    cols.push("seconds".to_string());
    cols.join(",")
}

/// Atomic whole-file write: temp in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = sibling_tmp(path);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sibling_tmp(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Append-only metrics file, flushed after every row.
pub struct MetricsWriter {
    path: PathBuf,
    n_heads: usize,
    lines: Vec<String>,
}

impl MetricsWriter {
    /// Creates (or appends to) `path`. An existing file must carry the same
    /// header, otherwise the schema mismatch is an error.
    pub fn open(path: impl Into<PathBuf>, n_heads: usize) -> Result<Self> {
        let path = path.into();
        let header = metrics_header(n_heads);
        let mut lines = vec![header.clone()];
        if path.exists() {
            let existing = fs::read_to_string(&path)?;
            let mut it = existing.lines();
            match it.next() {
                Some(first) if first == header => {
                    lines = existing.lines().map(str::to_string).collect();
                }
                Some(first) => {
                    return Err(Error::MetricsSchema(format!(
                        "existing header '{first}' does not match '{header}'"
                    )));
                }
                None => {}
            }
        }
        let writer = MetricsWriter {
            path,
            n_heads,
            lines,
        };
        writer.flush()?;
        Ok(writer)
    }

    /// Appends one epoch row and flushes the file.
    pub fn record_epoch(&mut self, strategy: Strategy, row: &EpochRow) -> Result<()> {
        if row.train_loss.len() != self.n_heads || row.test_err.len() != self.n_heads {
            return Err(Error::MetricsSchema(format!(
                "row has {} loss / {} err columns, file expects {}",
                row.train_loss.len(),
                row.test_err.len(),
                self.n_heads
            )));
        }
        let mut cols = vec![row.epoch.to_string(), strategy.to_string(), fmt_f64(row.lr)];
        cols.extend(row.train_loss.iter().map(|&v| fmt_f64(v)));
        cols.extend(row.test_err.iter().map(|&v| fmt_f64(v)));
        cols.push(fmt_f64(row.seconds));
        self.lines.push(cols.join(","));
        self.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn flush(&self) -> Result<()> {
        let mut contents = self.lines.join("\n");
        contents.push('\n');
        write_atomic(&self.path, contents.as_bytes())
    }
}

/// Shortest round-trip decimal form; parses back to the identical value.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes one row per (epoch, strategy, layer).
pub fn export_ratio_csv(path: &Path, traces: &[RatioTrace]) -> Result<()> {
    let mut out = String::from("epoch,strategy,layer,ratio\n");
    for trace in traces {
        for &(layer, ratio) in &trace.entries {
            out.push_str(&format!(
                "{},{},{layer},{}\n",
                trace.epoch,
                trace.strategy,
                fmt_f64(ratio)
            ));
        }
    }
    write_atomic(path, out.as_bytes())
}
