//! Metrics CSV rows and run summaries.

use std::fs;
use std::path::Path;

use lix_core::harness::{EpochLog, SegMetrics, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

pub const METRICS_HEADER: &str = "run_id,method,seed,epoch,mFsc,fwFsc,mIoU,fwIoU,loss_H,loss_L,loss_F,beta_mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub mFsc: f64,
    pub fwFsc: f64,
    pub mIoU: f64,
    pub fwIoU: f64,
    pub loss_H: f64,
    pub loss_L: f64,
    pub loss_F: f64,
    pub beta_mean: f64,
}

impl MetricsRow {
    pub fn new(run_id: &str, method: &str, seed: u64, e: &EpochLog) -> Self {
        Self {
            run_id: run_id.to_string(),
            method: method.to_string(),
            seed,
            epoch: e.epoch,
            mFsc: e.metrics.mFsc,
            fwFsc: e.metrics.fwFsc,
            mIoU: e.metrics.mIoU,
            fwIoU: e.metrics.fwIoU,
            loss_H: e.loss_h,
            loss_L: e.loss_l,
            loss_F: e.loss_f,
            beta_mean: e.beta_mean,
        }
    }
}

pub fn epoch_rows(run_id: &str, method: &str, seed: u64, outcome: &TrainOutcome) -> Vec<MetricsRow> {
    outcome.epochs.iter().map(|e| MetricsRow::new(run_id, method, seed, e)).collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::from(e).context(path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::from(e).context(path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Final JSON record of one `train` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best: SegMetrics,
    pub checkpoint: String,
    pub metrics_csv: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Failure::from(e).context(path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_row_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let e = EpochLog {
            epoch: 3,
            metrics: SegMetrics { mFsc: 1.0, fwFsc: 2.0, mIoU: 3.0, fwIoU: 4.0 },
            loss_h: 0.5,
            loss_l: 0.25,
            loss_f: 0.125,
            beta_mean: 5.5,
        };
        let row = MetricsRow::new("lix-s0", "lix", 0, &e);
        write_csv(&path, std::slice::from_ref(&row)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(read_metrics(&path).unwrap(), vec![row]);
    }
}
