//! Per-epoch metrics rows and their CSV form.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,lr,train_loss_R,train_loss_I,train_loss_total,val_acc_R,val_acc_I,alpha_mean,alpha_min,alpha_max,wall_seconds";

/// One epoch of training. Quantities that do not apply to a mode are NaN.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss_r: f64,
    pub train_loss_i: f64,
    pub train_loss_total: f64,
    pub val_acc_r: f64,
    pub val_acc_i: f64,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub wall_seconds: f64,
}

impl PartialEq for EpochMetrics {
    /// Bitwise comparison, so NaN entries compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.values().map(f64::to_bits) == other.values().map(f64::to_bits)
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        v.to_string()
    }
}

impl EpochMetrics {
    fn values(&self) -> [f64; 10] {
        [
            self.lr,
            self.train_loss_r,
            self.train_loss_i,
            self.train_loss_total,
            self.val_acc_r,
            self.val_acc_i,
            self.alpha_mean,
            self.alpha_min,
            self.alpha_max,
            self.wall_seconds,
        ]
    }

    pub fn to_csv_row(&self) -> String {
        let mut fields = vec![self.epoch.to_string()];
        fields.extend(self.values().into_iter().map(fmt_value));
        fields.join(",")
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 11 {
            return Err(Error::InvalidArgument(format!(
                "metrics row has {} fields, expected 11: {line:?}",
                fields.len()
            )));
        }
        let bad = |f: &str| Error::InvalidArgument(format!("bad metrics field {f:?}"));
        let epoch = fields[0].parse().map_err(|_| bad(fields[0]))?;
        let mut v = [0f64; 10];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad(f))?;
        }
        Ok(EpochMetrics {
            epoch,
            lr: v[0],
            train_loss_r: v[1],
            train_loss_i: v[2],
            train_loss_total: v[3],
            val_acc_r: v[4],
            val_acc_i: v[5],
            alpha_mean: v[6],
            alpha_min: v[7],
            alpha_max: v[8],
            wall_seconds: v[9],
        })
    }
}

pub fn history_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn history_from_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "metrics header mismatch: {other:?}"
            )))
        }
    }
    lines.map(EpochMetrics::parse_csv_row).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    history_from_csv(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Replaces the file with a header and the given rows.
pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, history_to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn append_metrics(path: &Path, row: &EpochMetrics) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", row.to_csv_row()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            lr: 0.01,
            train_loss_r: 1.2345678901234,
            train_loss_i: f64::NAN,
            train_loss_total: 1.0 / 3.0,
            val_acc_r: 0.25,
            val_acc_i: f64::NAN,
            alpha_mean: 1.0,
            alpha_min: 1.0,
            alpha_max: 1.0,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![row(0), row(1)];
        let text = history_to_csv(&rows);
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.lines().nth(1).unwrap().contains(",nan,"));
        assert_eq!(history_from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn rejects_malformed_rows() {
        assert!(EpochMetrics::parse_csv_row("1,2,3").is_err());
        assert!(history_from_csv("epoch,lr\n").is_err());
        let bad = row(0).to_csv_row().replace("0.25", "x");
        assert!(EpochMetrics::parse_csv_row(&bad).is_err());
    }

    #[test]
    fn append_extends_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&path, &[row(0)]).unwrap();
        append_metrics(&path, &row(1)).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![row(0), row(1)]);
    }
}
