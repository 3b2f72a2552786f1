//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Result};

/// All four values are percentages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct SegMetrics {
    pub mFsc: f64,
    pub fwFsc: f64,
    pub mIoU: f64,
    pub fwIoU: f64,
}

/// `counts[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(shape_mismatch("confusion", &[gt.len()], &[pred.len()]));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g >= self.classes || p >= self.classes {
                return Err(invalid(format!("label {} out of range", g.max(p))));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn metrics(&self) -> Result<SegMetrics> {
        let total = self.total();
        if total == 0 {
            return Err(invalid("no pixels to evaluate"));
        }
        let c = self.classes;
        let (mut f_sum, mut iou_sum, mut present) = (0.0, 0.0, 0usize);
        let (mut f_fw, mut iou_fw) = (0.0, 0.0);
        for k in 0..c {
            let tp = self.count(k, k) as f64;
            let gt: u64 = (0..c).map(|p| self.count(k, p)).sum();
            let pred: u64 = (0..c).map(|g| self.count(g, k)).sum();
            if gt == 0 && pred == 0 {
                continue;
            }
            present += 1;
            let fp = pred as f64 - tp;
            let fnn = gt as f64 - tp;
            let f1 = 2.0 * tp / (2.0 * tp + fp + fnn);
            let iou = tp / (tp + fp + fnn);
            f_sum += f1;
            iou_sum += iou;
            let freq = gt as f64 / total as f64;
            f_fw += freq * f1;
            iou_fw += freq * iou;
        }
        let m = present as f64;
        Ok(SegMetrics {
            mFsc: 100.0 * f_sum / m,
            fwFsc: 100.0 * f_fw,
            mIoU: 100.0 * iou_sum / m,
            fwIoU: 100.0 * iou_fw,
        })
    }
}

/// Metrics of a single prediction against ground truth.
pub fn segmentation_metrics(gt: &[usize], pred: &[usize], classes: usize) -> Result<SegMetrics> {
    let mut cm = Confusion::new(classes);
    cm.add(gt, pred)?;
    cm.metrics()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let m = segmentation_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((m.mIoU - 700.0 / 12.0).abs() < 1e-10);
        assert!((m.fwIoU - 700.0 / 12.0).abs() < 1e-10);
        // F1: class 0 → 2/3, class 1 → 4/5.
        assert!((m.mFsc - 50.0 * (2.0 / 3.0 + 0.8)).abs() < 1e-10);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let m = segmentation_metrics(&[0, 2, 2], &[0, 2, 2], 5).unwrap();
        for v in [m.mFsc, m.fwFsc, m.mIoU, m.fwIoU] {
            assert!((v - 100.0).abs() < 1e-12);
        }
        assert!(segmentation_metrics(&[], &[], 3).is_err());
        assert!(segmentation_metrics(&[0], &[3], 3).is_err());
    }
}
