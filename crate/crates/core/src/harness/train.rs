//! Teacher training and student distillation loops.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dwc::{beta_on_tape, omega_on_tape, BetaBounds, DwcInit, DwcParams, DwcVars};
use crate::error::{invalid, Error, Result};
use crate::feature::{pair_loss_on_tape, AlignerParams, AlignerVars, FeatureLossConfig};
use crate::logit::{
    kd_equivalent_beta, probabilities, weighted_logit_loss_on_tape, LogitField, LogitLossConfig, Reduction,
    TargetMask,
};
use crate::rng::{stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_in_place, Tensor};

use super::dataset::Dataset;
use super::metrics::{Confusion, SegMetrics};
use super::model::{argmax_labels, Bound, NetKind, Network, TAP_CHANNELS};
use super::optim::{sgd_step, SgdConfig};
use super::scene::SyntheticScene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Kd,
    Dkd,
    Dwld,
    Arfd,
    Lix,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::None, Method::Kd, Method::Dkd, Method::Dwld, Method::Arfd, Method::Lix];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Kd => "kd",
            Method::Dkd => "dkd",
            Method::Dwld => "dwld",
            Method::Arfd => "arfd",
            Method::Lix => "lix",
        }
    }

    pub fn uses_logit(self) -> bool {
        matches!(self, Method::Kd | Method::Dkd | Method::Dwld | Method::Lix)
    }

    pub fn uses_dwc(self) -> bool {
        matches!(self, Method::Dwld | Method::Lix)
    }

    pub fn uses_feature(self) -> bool {
        matches!(self, Method::Arfd | Method::Lix)
    }

    pub fn needs_teacher(self) -> bool {
        self != Method::None
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    Probs,
    #[default]
    ProbsConf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwcInput {
    #[default]
    Student,
    Teacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwcConfig {
    pub omega: OmegaMode,
    pub input: DwcInput,
    pub hidden: usize,
    pub dropout: f64,
    /// Let logit-loss gradients reach the student through the controller input.
    pub full_flow: bool,
    pub init: DwcInit,
    pub trainable: bool,
    pub bounds: BetaBounds,
}

impl Default for DwcConfig {
    fn default() -> Self {
        Self {
            omega: OmegaMode::ProbsConf,
            input: DwcInput::Student,
            hidden: 16,
            dropout: 0.0,
            full_flow: false,
            init: DwcInit::Xavier,
            trainable: true,
            bounds: BetaBounds::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_l: f64,
    pub lambda_f: f64,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub logit: LogitLossConfig,
    /// Fixed NCLD weight of the `dkd` method.
    pub dkd_beta: f64,
    pub dwc: DwcConfig,
    pub feature: FeatureLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l: 0.5,
            lambda_f: 0.5,
            sgd: SgdConfig::default(),
            epochs: 60,
            batch: 8,
            seed: 0,
            logit: LogitLossConfig {
                reduction: Reduction::Mean,
                ..LogitLossConfig::default()
            },
            dkd_beta: 2.0,
            dwc: DwcConfig::default(),
            feature: FeatureLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.lambda_l >= 0.0 && self.lambda_f >= 0.0) {
            return Err(invalid("loss weights must be nonnegative"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(invalid("epochs and batch must be positive"));
        }
        if !(self.dkd_beta >= 0.0) {
            return Err(invalid("dkd beta must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.dwc.dropout) || self.dwc.hidden == 0 {
            return Err(invalid("bad controller configuration"));
        }
        Ok(())
    }
}

/// Mean per-pixel cross-entropy of `softmax(z)` against the labels.
pub fn hard_label_loss(z: &LogitField, labels: &TargetMask) -> Result<f64> {
    Ok(cross_entropy(z.tensor(), labels)?.0)
}

fn cross_entropy(z: &Tensor, labels: &TargetMask) -> Result<(f64, Tensor)> {
    let c = z.dim(0);
    let n = z.numel() / c;
    if labels.len() != n || labels.classes() != c {
        return Err(invalid(format!(
            "labels cover {} pixels of {} classes, logits {n} of {c}",
            labels.len(),
            labels.classes()
        )));
    }
    let mut grad = vec![0.0; c * n];
    let mut row = vec![0.0; c];
    let mut total = 0.0;
    for (i, &k) in labels.targets().iter().enumerate() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = z.data()[j * n + i];
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[k];
        softmax_in_place(&mut row, 1.0);
        for (j, p) in row.iter().enumerate() {
            grad[j * n + i] = (p - if j == k { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(z.shape(), grad)?))
}

pub fn hard_label_loss_on_tape(tape: &mut Tape, z: Var, labels: &TargetMask) -> Result<Var> {
    let (value, grad) = cross_entropy(tape.value(z), labels)?;
    Ok(tape.custom(&[z], Tensor::scalar(value), move |g, _, _| vec![Some(grad.scale(g.data()[0]))]))
}

/// `L_H + λ_L·L_L + λ_F·L_F`.
pub fn total_loss(l_h: f64, l_l: f64, l_f: f64, lambda_l: f64, lambda_f: f64) -> Result<f64> {
    if !(lambda_l >= 0.0 && lambda_f >= 0.0) {
        return Err(invalid("loss weights must be nonnegative"));
    }
    for v in [l_h, l_l, l_f] {
        if !v.is_finite() {
            return Err(Error::NonFinite("loss component".into()));
        }
    }
    Ok(l_h + lambda_l * l_l + lambda_f * l_f)
}

/// Per-step record of the batch-mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub loss_h: f64,
    pub loss_l: f64,
    pub loss_f: f64,
    pub beta_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub metrics: SegMetrics,
    pub loss_h: f64,
    pub loss_l: f64,
    pub loss_f: f64,
    pub beta_mean: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation mIoU.
    pub checkpoint: Checkpoint,
    pub best: SegMetrics,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Parts {
    h: f64,
    l: f64,
    f: f64,
    beta: f64,
}

/// Options of the optimization loop that are not part of the training
/// configuration; used by tests to cut runs short.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoopLimits {
    /// Stop after this many optimizer steps (the epoch is still evaluated).
    pub max_steps: Option<usize>,
    /// Skip validation; metrics of every epoch are then zero.
    pub skip_eval: bool,
}

fn bind_selected(tape: &mut Tape, params: &Checkpoint, trainable: &HashSet<String>) -> Bound {
    params
        .iter()
        .map(|(n, t)| {
            let v = if trainable.contains(n) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            (n.to_string(), v)
        })
        .collect()
}

fn fit<L, E>(
    mut params: Checkpoint,
    trainable: HashSet<String>,
    train_len: usize,
    cfg: &TrainConfig,
    limits: LoopLimits,
    mut scene_loss: L,
    evaluate: E,
) -> Result<TrainOutcome>
where
    L: FnMut(&mut Tape, &Bound, usize) -> Result<(Var, Parts)>,
    E: Fn(&Checkpoint) -> Result<SegMetrics>,
{
    cfg.validate()?;
    if train_len == 0 {
        return Err(invalid("empty training set"));
    }
    let names: Vec<String> = params.names().filter(|n| trainable.contains(*n)).map(String::from).collect();
    let mut velocity: Vec<Tensor> = names.iter().map(|n| Tensor::zeros(params.get(n).unwrap().shape())).collect();
    let mut shuffle = Rng::new(cfg.seed, stream::SHUFFLE);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(SegMetrics, usize, Checkpoint)> = None;
    let mut global = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_len).collect();
        shuffle.shuffle(&mut order);
        let first_step = steps.len();
        for batch in order.chunks(cfg.batch) {
            if limits.max_steps.is_some_and(|m| global >= m) {
                break;
            }
            let mut tape = Tape::new();
            let bound = bind_selected(&mut tape, &params, &trainable);
            let mut acc = Parts::default();
            let mut total: Option<Var> = None;
            for &i in batch {
                let (v, p) = scene_loss(&mut tape, &bound, i)?;
                acc.h += p.h;
                acc.l += p.l;
                acc.f += p.f;
                acc.beta += p.beta;
                total = Some(match total {
                    Some(t) => tape.add(t, v)?,
                    None => v,
                });
            }
            let inv = 1.0 / batch.len() as f64;
            let loss = tape.scale(total.expect("non-empty batch"), inv);
            let value = tape.value(loss).item()?;
            let diverged = |params: &Checkpoint| Error::Diverged {
                epoch,
                step: global,
                last_good: Box::new(params.clone()),
            };
            if !value.is_finite() {
                log::error!("loss became non-finite at epoch {epoch}, step {global}");
                return Err(diverged(&params));
            }
            let grads = tape.backward(loss)?;
            let grad_list: Vec<Tensor> = names
                .iter()
                .map(|n| grads.get_or_zeros(&tape, bound[n]))
                .collect();
            drop(tape);
            let mut current: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
            match sgd_step(&mut current, &grad_list, &cfg.sgd, &mut velocity) {
                Ok(()) => {}
                Err(Error::NonFinite(msg)) => {
                    log::error!("rejected step {global}: {msg}");
                    return Err(diverged(&params));
                }
                Err(e) => return Err(e),
            }
            for (n, t) in names.iter().zip(current) {
                params.insert(n.clone(), t);
            }
            steps.push(StepLog {
                epoch,
                step: global,
                total: value,
                loss_h: acc.h * inv,
                loss_l: acc.l * inv,
                loss_f: acc.f * inv,
                beta_mean: acc.beta * inv,
            });
            global += 1;
        }
        let metrics = if limits.skip_eval { SegMetrics::default() } else { evaluate(&params)? };
        let this = &steps[first_step..];
        let mean = |f: fn(&StepLog) -> f64| {
            if this.is_empty() {
                0.0
            } else {
                this.iter().map(f).sum::<f64>() / this.len() as f64
            }
        };
        let log = EpochLog {
            epoch,
            metrics,
            loss_h: mean(|s| s.loss_h),
            loss_l: mean(|s| s.loss_l),
            loss_f: mean(|s| s.loss_f),
            beta_mean: mean(|s| s.beta_mean),
        };
        log::info!(
            "epoch {epoch}: loss_H {:.4} loss_L {:.4} loss_F {:.4} beta {:.3} val mIoU {:.2}",
            log.loss_h,
            log.loss_l,
            log.loss_f,
            log.beta_mean,
            metrics.mIoU
        );
        epochs.push(log);
        if best.as_ref().is_none_or(|(b, _, _)| metrics.mIoU > b.mIoU) {
            best = Some((metrics, epoch, params.clone()));
        }
        if limits.max_steps.is_some_and(|m| global >= m) {
            break 'epochs;
        }
    }
    let (best, best_epoch, checkpoint) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint,
        best,
        best_epoch,
        epochs,
        steps,
    })
}

/// Metrics of a network over a set of scenes, from the pooled confusion matrix.
pub fn evaluate(net: &Network, scenes: &[SyntheticScene]) -> Result<SegMetrics> {
    if scenes.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut cm = Confusion::new(net.classes());
    for s in scenes {
        let depth = (net.kind() == NetKind::Teacher).then(|| s.depth_input());
        let (z, _) = net.predict(&s.rgb, depth.as_ref())?;
        cm.add(s.labels.targets(), &argmax_labels(&z))?;
    }
    cm.metrics()
}

pub fn train_teacher(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_teacher_limited(data, cfg, LoopLimits::default())
}

pub fn train_teacher_limited(data: &Dataset, cfg: &TrainConfig, limits: LoopLimits) -> Result<TrainOutcome> {
    data.validate()?;
    let net = Network::new(NetKind::Teacher, data.classes(), &mut Rng::new(cfg.seed, stream::TEACHER_INIT))?;
    let trainable: HashSet<String> = net.params().names().map(String::from).collect();
    let inputs: Vec<(Tensor, Tensor)> = data.train.iter().map(|s| (s.rgb.clone(), s.depth_input())).collect();
    let structure = net.clone();
    fit(
        net.params().clone(),
        trainable,
        data.train.len(),
        cfg,
        limits,
        |tape, bound, i| {
            let x = tape.constant(inputs[i].0.clone());
            let d = tape.constant(inputs[i].1.clone());
            let out = structure.forward(tape, bound, x, Some(d))?;
            let l = hard_label_loss_on_tape(tape, out.logits, &data.train[i].labels)?;
            let h = tape.value(l).item()?;
            Ok((l, Parts { h, ..Parts::default() }))
        },
        |ck| evaluate(&Network::from_checkpoint(ck)?, &data.val),
    )
}

/// Frozen teacher outputs on a training scene.
#[derive(Clone, Debug)]
pub struct TeacherView {
    pub logits: LogitField,
    pub taps: [Tensor; 2],
}

pub fn teacher_views(teacher: &Network, scenes: &[SyntheticScene]) -> Result<Vec<TeacherView>> {
    if teacher.kind() != NetKind::Teacher {
        return Err(invalid("teacher checkpoint lacks a depth branch"));
    }
    scenes
        .iter()
        .map(|s| {
            let (logits, taps) = teacher.predict(&s.rgb, Some(&s.depth_input()))?;
            Ok(TeacherView { logits, taps })
        })
        .collect()
}

fn dwc_input_width(cfg: &DwcConfig, classes: usize) -> usize {
    match cfg.omega {
        OmegaMode::Probs => classes,
        OmegaMode::ProbsConf => classes + 1,
    }
}

/// Initial student-side parameters of a distillation run: the network,
/// plus the controller and aligners when the method uses them.
pub fn initial_student_params(classes: usize, cfg: &TrainConfig, method: Method) -> Result<Checkpoint> {
    let net = Network::new(NetKind::Student, classes, &mut Rng::new(cfg.seed, stream::STUDENT_INIT))?;
    let mut ck = net.params().clone();
    if method.uses_dwc() {
        let dwc = DwcParams::new(
            dwc_input_width(&cfg.dwc, classes),
            cfg.dwc.hidden,
            classes,
            cfg.dwc.init,
            &mut Rng::new(cfg.seed, stream::DWC_INIT),
        )?;
        ck.extend_prefixed("", &dwc.to_checkpoint());
    }
    if method.uses_feature() {
        let mut rng = Rng::new(cfg.seed, stream::ALIGNER_INIT);
        for (n, &c) in TAP_CHANNELS.iter().enumerate() {
            for side in ["teacher", "student"] {
                let p = AlignerParams::new(c, c, &mut rng);
                ck.extend_prefixed("", &p.to_checkpoint(&format!("arfd.pair{n}.{side}")));
            }
        }
    }
    Ok(ck)
}

fn dwc_vars(bound: &Bound) -> Result<DwcVars> {
    let get = |l: usize, p: &str| {
        bound
            .get(&format!("dwc.layer{l}.{p}"))
            .copied()
            .ok_or_else(|| invalid("controller parameters missing"))
    };
    Ok(DwcVars {
        layers: [(get(0, "w")?, get(0, "b")?), (get(1, "w")?, get(1, "b")?), (get(2, "w")?, get(2, "b")?)],
    })
}

fn aligner_vars(bound: &Bound, prefix: &str) -> Result<AlignerVars> {
    let get = |n: &str| {
        bound
            .get(&format!("{prefix}.{n}"))
            .copied()
            .ok_or_else(|| invalid(format!("aligner {prefix} missing")))
    };
    Ok(AlignerVars {
        conv_w: get("conv.w")?,
        conv_b: get("conv.b")?,
        norm_scale: get("norm.scale")?,
        norm_shift: get("norm.shift")?,
        normalize: true,
    })
}

/// Trains a student with the hard-label loss plus the distillation terms of
/// `method`. `teacher` may be `None` only for [`Method::None`].
pub fn distill_student(
    teacher: Option<&Network>,
    data: &Dataset,
    cfg: &TrainConfig,
    method: Method,
) -> Result<TrainOutcome> {
    let views = match (method.needs_teacher(), teacher) {
        (false, _) => Vec::new(),
        (true, Some(t)) => teacher_views(t, &data.train)?,
        (true, None) => return Err(invalid(format!("method {method} needs a teacher"))),
    };
    distill_with_views(&views, data, cfg, method, LoopLimits::default())
}

/// [`distill_student`] with precomputed teacher outputs, so that sweeps can
/// share one teacher pass.
pub fn distill_with_views(
    views: &[TeacherView],
    data: &Dataset,
    cfg: &TrainConfig,
    method: Method,
    limits: LoopLimits,
) -> Result<TrainOutcome> {
    data.validate()?;
    if method.needs_teacher() && views.len() != data.train.len() {
        return Err(invalid("teacher outputs do not cover the training set"));
    }
    let classes = data.classes();
    let params = initial_student_params(classes, cfg, method)?;
    let trainable: HashSet<String> = params
        .names()
        .filter(|n| !n.starts_with("dwc.") || cfg.dwc.trainable)
        .map(String::from)
        .collect();
    let structure = Network::from_checkpoint(&params)?;
    let mut dropout_rng = Rng::new(cfg.seed, stream::DROPOUT);
    let logit_cfg = match method {
        Method::Kd => LogitLossConfig { alpha: 1.0, ..cfg.logit },
        _ => cfg.logit,
    };
    let fixed_beta: Vec<Option<Tensor>> = match method {
        Method::Kd => views
            .iter()
            .zip(&data.train)
            .map(|(v, s)| kd_equivalent_beta(&v.logits, &s.labels, cfg.logit.temperature).map(Some))
            .collect::<Result<_>>()?,
        _ => vec![None; views.len()],
    };
    let with_conf = cfg.dwc.omega == OmegaMode::ProbsConf;

    fit(
        params,
        trainable,
        data.train.len(),
        cfg,
        limits,
        |tape, bound, i| {
            let scene = &data.train[i];
            let x = tape.constant(scene.rgb.clone());
            let out = structure.forward(tape, bound, x, None)?;
            let l_h = hard_label_loss_on_tape(tape, out.logits, &scene.labels)?;
            let mut parts = Parts {
                h: tape.value(l_h).item()?,
                ..Parts::default()
            };
            let mut total = l_h;
            if method.uses_logit() {
                let view = &views[i];
                let n = scene.labels.len();
                let beta = match method {
                    Method::Kd => tape.constant(fixed_beta[i].clone().unwrap()),
                    Method::Dkd => tape.constant(Tensor::full(&[n, classes], cfg.dkd_beta)),
                    _ => {
                        let probs = match (cfg.dwc.input, cfg.dwc.full_flow) {
                            (DwcInput::Teacher, _) => {
                                tape.constant(probabilities(&view.logits, cfg.logit.temperature)?.tensor().clone())
                            }
                            (DwcInput::Student, false) => {
                                let z = LogitField::new(tape.value(out.logits).clone())?;
                                tape.constant(probabilities(&z, cfg.logit.temperature)?.tensor().clone())
                            }
                            (DwcInput::Student, true) => {
                                let flat = tape.reshape(out.logits, &[classes, n])?;
                                let rows = tape.transpose(flat)?;
                                tape.softmax_rows(rows, cfg.logit.temperature)?
                            }
                        };
                        let omega = omega_on_tape(tape, probs, with_conf)?;
                        let vars = dwc_vars(bound)?;
                        let dropout = (cfg.dwc.dropout > 0.0).then_some((cfg.dwc.dropout, &mut dropout_rng));
                        beta_on_tape(tape, omega, &vars, cfg.dwc.bounds, dropout)?
                    }
                };
                parts.beta = tape.value(beta).mean();
                let (l_l, _) = weighted_logit_loss_on_tape(tape, &view.logits, out.logits, &scene.labels, beta, &logit_cfg)?;
                parts.l = tape.value(l_l).item()?;
                let weighted = tape.scale(l_l, cfg.lambda_l);
                total = tape.add(total, weighted)?;
            }
            if method.uses_feature() {
                let view = &views[i];
                let mut l_f: Option<Var> = None;
                for n in 0..TAP_CHANNELS.len() {
                    let t = tape.constant(view.taps[n].clone());
                    let tv = aligner_vars(bound, &format!("arfd.pair{n}.teacher"))?;
                    let sv = aligner_vars(bound, &format!("arfd.pair{n}.student"))?;
                    let p = pair_loss_on_tape(tape, t, out.taps[n], &tv, &sv, &cfg.feature)?;
                    l_f = Some(match l_f {
                        Some(acc) => tape.add(acc, p)?,
                        None => p,
                    });
                }
                let l_f = l_f.expect("at least one tap");
                parts.f = tape.value(l_f).item()?;
                let weighted = tape.scale(l_f, cfg.lambda_f);
                total = tape.add(total, weighted)?;
            }
            Ok((total, parts))
        },
        |ck| evaluate(&Network::from_checkpoint(ck)?, &data.val),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::DatasetSpec;

    #[test]
    fn cross_entropy_examples() {
        let z = LogitField::new(Tensor::zeros(&[4, 2, 2])).unwrap();
        let m = TargetMask::new(vec![0, 1, 2, 3], 4).unwrap();
        assert!((hard_label_loss(&z, &m).unwrap() - 4f64.ln()).abs() < 1e-15);
        let mut big = Tensor::zeros(&[3, 1, 2]);
        big.data_mut()[0] = 50.0;
        big.data_mut()[5] = 50.0;
        let m = TargetMask::new(vec![0, 2], 3).unwrap();
        assert!(hard_label_loss(&LogitField::new(big).unwrap(), &m).unwrap() < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_naive_oracle() {
        let mut rng = Rng::new(3, 0);
        let z = LogitField::new(rng.uniform_tensor(&[5, 4, 3], -3.0, 3.0)).unwrap();
        let m = TargetMask::new((0..12).map(|_| rng.below(0, 5)).collect(), 5).unwrap();
        let p = probabilities(&z, 1.0).unwrap();
        let naive: f64 = m.targets().iter().enumerate().map(|(i, &k)| -p.tensor().at2(i, k).ln()).sum::<f64>() / 12.0;
        assert!((hard_label_loss(&z, &m).unwrap() - naive).abs() < 1e-12);
        let err = crate::gradcheck::finite_diff_check(|t, v| hard_label_loss_on_tape(t, v, &m), z.tensor(), 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0, 0.4, 0.2, 0.5, 0.5).unwrap() - 1.3).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 3.0, 9.0, 0.0, 0.0).unwrap(), 0.7);
        assert!(total_loss(1.0, 1.0, 1.0, -0.1, 0.0).is_err());
        let d = TrainConfig::default();
        assert_eq!((d.lambda_l, d.lambda_f), (0.5, 0.5));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("teacher".parse::<Method>().is_err());
    }

    fn tiny() -> Dataset {
        DatasetSpec { seed: 4, train: 4, val: 2, height: 32, width: 32, classes: 6 }.generate().unwrap()
    }

    #[test]
    fn short_runs_log_consistent_components() {
        let data = tiny();
        let cfg = TrainConfig { epochs: 1, batch: 2, ..TrainConfig::default() };
        let teacher = Network::new(NetKind::Teacher, 6, &mut Rng::new(1, 2)).unwrap();
        let views = teacher_views(&teacher, &data.train).unwrap();
        for method in Method::ALL {
            let out = distill_with_views(&views, &data, &cfg, method, LoopLimits::default()).unwrap();
            assert_eq!(out.steps.len(), 2);
            for s in &out.steps {
                let recomputed = total_loss(s.loss_h, s.loss_l, s.loss_f, cfg.lambda_l, cfg.lambda_f).unwrap();
                assert!((s.total - recomputed).abs() < 1e-10, "{method}");
                assert_eq!(s.loss_l == 0.0, !method.uses_logit(), "{method}");
                assert_eq!(s.loss_f == 0.0, !method.uses_feature(), "{method}");
            }
        }
    }
}
