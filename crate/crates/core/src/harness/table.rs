use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{labels_in_order, HarnessError};

/// One trained and scored cell; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub run_id: String,
    pub equalizer: String,
    pub channel: String,
    pub snr_db: f64,
    pub trial: usize,
    pub seed: u64,
    /// NaN when training failed.
    pub ser: f64,
    pub n_test: u64,
    pub train_symbols: u64,
    pub wall_s: f64,
}

/// Mean and sample standard deviation of the finite SERs at one
/// `(equalizer, snr)` point.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub equalizer: String,
    pub snr_db: f64,
    /// Finite SERs that went into the statistics.
    pub n: usize,
    pub ser_mean: f64,
    pub ser_std: f64,
}

/// Groups by equalizer (first-seen order) and SNR (ascending).
pub fn summarize(rows: &[SweepResult]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for label in labels_in_order(rows.iter().map(|r| r.equalizer.as_str())) {
        let mut snrs: Vec<f64> = rows
            .iter()
            .filter(|r| r.equalizer == label)
            .map(|r| r.snr_db)
            .collect();
        snrs.sort_by(f64::total_cmp);
        snrs.dedup();
        for snr in snrs {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.equalizer == label && r.snr_db == snr && r.ser.is_finite())
                .map(|r| r.ser)
                .collect();
            let n = xs.len();
            let mean = if n == 0 {
                f64::NAN
            } else {
                xs.iter().sum::<f64>() / n as f64
            };
            let std = match n {
                0 => f64::NAN,
                1 => 0.0,
                _ => (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt(),
            };
            out.push(SummaryRow {
                equalizer: label.clone(),
                snr_db: snr,
                n,
                ser_mean: mean,
                ser_std: std,
            });
        }
    }
    out
}

pub fn emit_results(rows: &[SweepResult], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "run_id",
            "equalizer",
            "channel",
            "snr_db",
            "trial",
            "seed",
            "ser",
            "n_test",
            "train_symbols",
            "wall_s",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_results(path: &Path) -> Result<Vec<SweepResult>, HarnessError> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Serialize)]
struct PlotRow {
    snr_db: f64,
    ser_mean: f64,
    ser_std: f64,
}

/// Writes `<dir>/<equalizer>.csv` with `(snr_db, ser_mean, ser_std)` rows
/// sorted by SNR. Returns the files written.
pub fn emit_plotdata(
    summary: &[SummaryRow],
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for label in labels_in_order(summary.iter().map(|s| s.equalizer.as_str())) {
        let mut pts: Vec<&SummaryRow> = summary.iter().filter(|s| s.equalizer == label).collect();
        pts.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
        let path = dir.join(format!("{label}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        if pts.is_empty() {
            w.write_record(["snr_db", "ser_mean", "ser_std"])?;
        }
        for s in pts {
            w.serialize(PlotRow {
                snr_db: s.snr_db,
                ser_mean: s.ser_mean,
                ser_std: s.ser_std,
            })?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
