//! Ablation grids and their aggregation across seeds.

use std::fmt;
use std::str::FromStr;

use lix_core::feature::{KernelKind, Similarity};
use lix_core::harness::{distill_with_views, Dataset, LoopLimits, Method, OmegaMode, TeacherView, TrainConfig, TrainOutcome};
use serde::Serialize;

use crate::exit::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Beta,
    Kernel,
    Similarity,
    Ratio,
    Omega,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Beta, Axis::Kernel, Axis::Similarity, Axis::Ratio, Axis::Omega];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::Kernel => "kernel",
            Axis::Similarity => "similarity",
            Axis::Ratio => "ratio",
            Axis::Omega => "omega",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Failure;

    fn from_str(s: &str) -> Result<Self, Failure> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Failure::usage(format!("unknown ablation axis `{s}`")))
    }
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub method: Method,
    pub cfg: TrainConfig,
}

pub const DKD_BETAS: [f64; 4] = [1.0, 2.0, 5.0, 10.0];
pub const KERNELS: [KernelKind; 4] = [KernelKind::None, KernelKind::Linear, KernelKind::Gaussian, KernelKind::Laplace];
/// `L_H : L_L : L_F` weightings.
pub const RATIOS: [(u32, u32, u32); 4] = [(1, 1, 1), (1, 2, 1), (1, 1, 2), (2, 1, 1)];

pub fn kernel_name(k: KernelKind) -> &'static str {
    match k {
        KernelKind::None => "none",
        KernelKind::Linear => "linear",
        KernelKind::Gaussian => "gaussian",
        KernelKind::Laplace => "laplace",
    }
}

fn similarity_name(s: Similarity) -> &'static str {
    match s {
        Similarity::Cka => "cka",
        Similarity::Euclidean => "euclidean",
    }
}

fn feature_cell(base: &TrainConfig, kernel: KernelKind, similarity: Similarity) -> Cell {
    let mut cfg = *base;
    cfg.feature.kernel = kernel;
    cfg.feature.similarity = similarity;
    Cell {
        label: format!("{}_{}", kernel_name(kernel), similarity_name(similarity)),
        method: Method::Arfd,
        cfg,
    }
}

pub fn dkd_cell(base: &TrainConfig, beta: f64) -> Cell {
    Cell {
        label: format!("dkd_beta{beta}"),
        method: Method::Dkd,
        cfg: TrainConfig { dkd_beta: beta, ..*base },
    }
}

pub fn omega_cell(base: &TrainConfig, omega: OmegaMode) -> Cell {
    let mut cfg = *base;
    cfg.dwc.omega = omega;
    Cell {
        label: match omega {
            OmegaMode::Probs => "dwld_probs".into(),
            OmegaMode::ProbsConf => "dwld_probs_conf".into(),
        },
        method: Method::Dwld,
        cfg,
    }
}

/// The grid of an axis, built from `base`. Feature-loss cells use the
/// `arfd` method and controller cells the `dwld` method so that each axis
/// varies one component.
pub fn cells(axis: Axis, base: &TrainConfig) -> Vec<Cell> {
    match axis {
        Axis::Beta => {
            let mut v: Vec<Cell> = DKD_BETAS.iter().map(|&b| dkd_cell(base, b)).collect();
            v.push(Cell {
                label: "dwld".into(),
                method: Method::Dwld,
                cfg: *base,
            });
            v
        }
        Axis::Kernel => KERNELS.iter().map(|&k| feature_cell(base, k, Similarity::Cka)).collect(),
        Axis::Similarity => KERNELS
            .iter()
            .flat_map(|&k| [Similarity::Cka, Similarity::Euclidean].map(|s| feature_cell(base, k, s)))
            .collect(),
        Axis::Ratio => RATIOS
            .iter()
            .map(|&(h, l, f)| Cell {
                label: format!("{h}:{l}:{f}"),
                method: Method::Lix,
                cfg: TrainConfig {
                    lambda_l: f64::from(l) / f64::from(h),
                    lambda_f: f64::from(f) / f64::from(h),
                    ..*base
                },
            })
            .collect(),
        Axis::Omega => vec![omega_cell(base, OmegaMode::Probs), omega_cell(base, OmegaMode::ProbsConf)],
    }
}

/// Data and cached teacher outputs of one seed.
pub struct Arm<'a> {
    pub seed: u64,
    pub data: &'a Dataset,
    pub views: &'a [TeacherView],
}

pub fn run_cell(cell: &Cell, arm: &Arm) -> Result<TrainOutcome, Failure> {
    let cfg = TrainConfig { seed: arm.seed, ..cell.cfg };
    log::info!("cell {} seed {}", cell.label, arm.seed);
    distill_with_views(arm.views, arm.data, &cfg, cell.method, LoopLimits::default())
        .map_err(|e| Failure::from(e).context(format!("cell {} seed {}", cell.label, arm.seed)))
}

/// Best-epoch result of one cell at one seed.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub cell: String,
    pub method: Method,
    pub seed: u64,
    pub outcome: TrainOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct CellSummary {
    pub axis: String,
    pub cell: String,
    pub method: String,
    pub runs: usize,
    pub mFsc_mean: f64,
    pub mFsc_std: f64,
    pub fwFsc_mean: f64,
    pub fwFsc_std: f64,
    pub mIoU_mean: f64,
    pub mIoU_std: f64,
    pub fwIoU_mean: f64,
    pub fwIoU_std: f64,
    pub beta_mean: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs by cell, keeping the order in which cells first appear.
pub fn summarize(axis: Axis, runs: &[SweepRun]) -> Vec<CellSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.cell.as_str()) {
            labels.push(&r.cell);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&SweepRun> = runs.iter().filter(|r| r.cell == label).collect();
            let stat = |f: fn(&SweepRun) -> f64| mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mfsc, mfsc_sd) = stat(|r| r.outcome.best.mFsc);
            let (fwfsc, fwfsc_sd) = stat(|r| r.outcome.best.fwFsc);
            let (miou, miou_sd) = stat(|r| r.outcome.best.mIoU);
            let (fwiou, fwiou_sd) = stat(|r| r.outcome.best.fwIoU);
            let (beta, _) = stat(|r| r.outcome.epochs[r.outcome.best_epoch].beta_mean);
            CellSummary {
                axis: axis.name().into(),
                cell: label.into(),
                method: group[0].method.name().into(),
                runs: group.len(),
                mFsc_mean: mfsc,
                mFsc_std: mfsc_sd,
                fwFsc_mean: fwfsc,
                fwFsc_std: fwfsc_sd,
                mIoU_mean: miou,
                mIoU_std: miou_sd,
                fwIoU_mean: fwiou,
                fwIoU_std: fwiou_sd,
                beta_mean: beta,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let base = TrainConfig::default();
        let beta = cells(Axis::Beta, &base);
        assert_eq!(beta.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(), [
            "dkd_beta1", "dkd_beta2", "dkd_beta5", "dkd_beta10", "dwld"
        ]);
        assert_eq!(beta[2].cfg.dkd_beta, 5.0);
        let ratio = cells(Axis::Ratio, &base);
        assert_eq!(ratio.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(), ["1:1:1", "1:2:1", "1:1:2", "2:1:1"]);
        assert_eq!((ratio[3].cfg.lambda_l, ratio[3].cfg.lambda_f), (0.5, 0.5));
        assert_eq!((ratio[1].cfg.lambda_l, ratio[1].cfg.lambda_f), (2.0, 1.0));
        assert_eq!(cells(Axis::Similarity, &base).len(), 8);
        assert_eq!(cells(Axis::Kernel, &base).len(), 4);
        let omega = cells(Axis::Omega, &base);
        assert_eq!(omega[0].cfg.dwc.omega, OmegaMode::Probs);
        assert!("gamma".parse::<Axis>().is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
