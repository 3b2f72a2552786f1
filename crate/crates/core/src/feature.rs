//! Feature distillation with aligned, kernel-recalibrated features compared
//! through centered kernel alignment.
//!
//! Each side of a tapped pair goes through
//! `resize → 3×3 conv → channel norm → ReLU → reshape (C×HW)`, then an
//! elementwise kernel recalibration, then a `C×C` Gram matrix. Pairs are
//! scored with `1 − CKA` (or a mean squared error for comparison runs).

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, shape_mismatch, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on the kernel bandwidth statistic.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(invalid(format!("feature map must be C×H×W, got {:?}", values.shape())));
        }
        values.ensure_finite("feature map")?;
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dim(0)
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.0.dim(1), self.0.dim(2))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Aligned features are used as they are.
    None,
    Linear,
    Gaussian,
    #[default]
    Laplace,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HsicMode {
    /// `tr(HTH·HSH)/(n−1)²`.
    #[default]
    Standard,
    /// Expanded form `n²/(n−1)²·(tr(TS) + (1ᵀT1)(1ᵀS1)/n² − (2/n²)·1ᵀTS1)`.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cka,
    /// Mean squared difference of the recalibrated features.
    Euclidean,
}

/// One side's aligner: a 3×3 convolution to the teacher channel count and a
/// per-channel affine normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignerParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
    pub normalize: bool,
}

impl AlignerParams {
    /// He-uniform convolution weights, unit scale, zero shift.
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_channels * 9) as f64;
        let a = (6.0 / fan_in).sqrt();
        Self {
            conv_w: rng.uniform_tensor(&[out_channels, in_channels, 3, 3], -a, a),
            conv_b: Tensor::zeros(&[out_channels]),
            norm_scale: Tensor::full(&[out_channels], 1.0),
            norm_shift: Tensor::zeros(&[out_channels]),
            normalize: true,
        }
    }

    /// A centre-tap identity kernel with normalization switched off.
    pub fn identity(channels: usize) -> Self {
        let mut w = Tensor::zeros(&[channels, channels, 3, 3]);
        for c in 0..channels {
            w.data_mut()[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        Self {
            conv_w: w,
            conv_b: Tensor::zeros(&[channels]),
            norm_scale: Tensor::full(&[channels], 1.0),
            norm_shift: Tensor::zeros(&[channels]),
            normalize: false,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_w.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.conv_w.dim(1)
    }

    fn validate(&self) -> Result<()> {
        let s = self.conv_w.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 {
            return Err(invalid(format!("aligner kernel must be 3×3, got {s:?}")));
        }
        let c = s[0];
        for t in [&self.conv_b, &self.norm_scale, &self.norm_shift] {
            if t.shape() != [c] {
                return Err(shape_mismatch("aligner", s, t.shape()));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert(format!("{prefix}.conv.w"), self.conv_w.clone());
        ck.insert(format!("{prefix}.conv.b"), self.conv_b.clone());
        ck.insert(format!("{prefix}.norm.scale"), self.norm_scale.clone());
        ck.insert(format!("{prefix}.norm.shift"), self.norm_shift.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |n: &str| ck.require(&format!("{prefix}.{n}")).cloned();
        let p = Self {
            conv_w: get("conv.w")?,
            conv_b: get("conv.b")?,
            norm_scale: get("norm.scale")?,
            norm_shift: get("norm.shift")?,
            normalize: true,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Aligner parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AlignerVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub norm_scale: Var,
    pub norm_shift: Var,
    pub normalize: bool,
}

impl AlignerVars {
    pub fn register(tape: &mut Tape, p: &AlignerParams, trainable: bool) -> Self {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            conv_w: reg(&p.conv_w),
            conv_b: reg(&p.conv_b),
            norm_scale: reg(&p.norm_scale),
            norm_shift: reg(&p.norm_shift),
            normalize: p.normalize,
        }
    }

    pub fn all(&self) -> [Var; 4] {
        [self.conv_w, self.conv_b, self.norm_scale, self.norm_shift]
    }
}

/// `C^T×HW` aligned features.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures(Tensor);

impl AlignedFeatures {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecalibratedFeatures {
    pub fk: Tensor,
    pub kernel: KernelKind,
}

/// Common spatial target of a teacher/student pair.
pub fn common_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    (a.0.min(b.0), a.1.min(b.1))
}

pub fn align_on_tape(tape: &mut Tape, x: Var, vars: &AlignerVars, target: (usize, usize)) -> Result<Var> {
    if target.0 == 0 || target.1 == 0 {
        return Err(invalid("alignment target must be non-empty"));
    }
    let r = tape.resize(x, target.0, target.1)?;
    let conv = tape.conv2d(r, vars.conv_w, vars.conv_b, 1)?;
    let normed = if vars.normalize {
        tape.channel_norm(conv, vars.norm_scale, vars.norm_shift)?
    } else {
        conv
    };
    let act = tape.relu(normed);
    let c = tape.value(act).dim(0);
    tape.reshape(act, &[c, target.0 * target.1])
}

pub fn align(f: &FeatureMap, params: &AlignerParams, target: (usize, usize)) -> Result<AlignedFeatures> {
    params.validate()?;
    if f.channels() != params.in_channels() {
        return Err(shape_mismatch("align", f.0.shape(), params.conv_w.shape()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.0.clone());
    let vars = AlignerVars::register(&mut tape, params, false);
    let out = align_on_tape(&mut tape, x, &vars, target)?;
    Ok(AlignedFeatures(tape.value(out).clone()))
}

pub fn feature_mean(fa: &AlignedFeatures) -> f64 {
    fa.0.mean()
}

struct Recal {
    out: Vec<f64>,
    dev: Vec<f64>,
    sigma: f64,
    floored: bool,
}

fn recal_forward(x: &[f64], kernel: KernelKind) -> Recal {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = dev.iter().map(|d| d * d).sum::<f64>() / n;
    let floored = var < SIGMA_FLOOR;
    let sigma = var.max(SIGMA_FLOOR);
    let out = match kernel {
        KernelKind::None => x.to_vec(),
        KernelKind::Linear => dev.clone(),
        KernelKind::Gaussian => dev.iter().map(|d| (-d * d / (2.0 * sigma)).exp()).collect(),
        KernelKind::Laplace => dev.iter().map(|d| (-d * d / sigma).exp()).collect(),
    };
    Recal { out, dev, sigma, floored }
}

/// Elementwise kernel recalibration around the global mean. The bandwidth
/// statistic is the mean squared deviation, floored at [`SIGMA_FLOOR`]; it
/// is used as `σ²` by the Gaussian and as `σ` by the Laplace kernel.
pub fn recalibrate(fa: &AlignedFeatures, kernel: KernelKind) -> RecalibratedFeatures {
    let r = recal_forward(fa.0.data(), kernel);
    RecalibratedFeatures {
        fk: Tensor::new(fa.0.shape(), r.out).unwrap(),
        kernel,
    }
}

pub fn recalibrate_on_tape(tape: &mut Tape, x: Var, kernel: KernelKind) -> Var {
    if kernel == KernelKind::None {
        return x;
    }
    let shape = tape.value(x).shape().to_vec();
    let r = recal_forward(tape.value(x).data(), kernel);
    let value = Tensor::new(&shape, r.out.clone()).unwrap();
    let Recal { out, dev, sigma, floored } = r;
    tape.custom(&[x], value, move |g, _, _| {
        let n = dev.len() as f64;
        let g = g.data();
        // Gradient with respect to the deviations d = x − mean.
        let dd: Vec<f64> = match kernel {
            KernelKind::None => unreachable!(),
            KernelKind::Linear => g.to_vec(),
            KernelKind::Gaussian | KernelKind::Laplace => {
                let (c_direct, c_sigma) = if kernel == KernelKind::Gaussian {
                    (1.0 / sigma, 0.5 / (sigma * sigma))
                } else {
                    (2.0 / sigma, 1.0 / (sigma * sigma))
                };
                let mut d_sigma = 0.0;
                if !floored {
                    for i in 0..dev.len() {
                        d_sigma += g[i] * out[i] * dev[i] * dev[i] * c_sigma;
                    }
                }
                (0..dev.len())
                    .map(|i| -g[i] * out[i] * dev[i] * c_direct + d_sigma * 2.0 * dev[i] / n)
                    .collect()
            }
        };
        let m = dd.iter().sum::<f64>() / n;
        vec![Some(Tensor::new(&shape, dd.iter().map(|v| v - m).collect()).unwrap())]
    })
}

pub fn gram(fk: &RecalibratedFeatures) -> Tensor {
    fk.fk.matmul(&fk.fk.transpose().unwrap()).unwrap()
}

pub fn gram_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let xt = tape.transpose(x)?;
    tape.matmul(x, xt)
}

fn check_grams(t: &Tensor, s: &Tensor) -> Result<usize> {
    let (n, m) = t.dims2()?;
    if n != m || t.shape() != s.shape() {
        return Err(shape_mismatch("hsic", t.shape(), s.shape()));
    }
    if n < 2 {
        return Err(invalid("hsic needs at least two rows"));
    }
    Ok(n)
}

/// `H X H` with `H = I − 11ᵀ/n`.
fn double_center(x: &Tensor) -> Tensor {
    let n = x.dim(0);
    let rows: Vec<f64> = (0..n).map(|i| x.row(i).iter().sum::<f64>() / n as f64).collect();
    let cols: Vec<f64> = (0..n).map(|j| (0..n).map(|i| x.at2(i, j)).sum::<f64>() / n as f64).collect();
    let all = rows.iter().sum::<f64>() / n as f64;
    Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        x.data()[idx] - rows[i] - cols[j] + all
    })
}

fn frob(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `trace(A·B)`.
fn trace_prod(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.dim(0);
    (0..n).map(|i| (0..n).map(|j| a.at2(i, j) * b.at2(j, i)).sum::<f64>()).sum()
}

pub fn hsic(t: &Tensor, s: &Tensor, mode: HsicMode) -> Result<f64> {
    let n = check_grams(t, s)?;
    let nf = n as f64;
    let denom = (nf - 1.0) * (nf - 1.0);
    Ok(match mode {
        HsicMode::Standard => frob(&double_center(t), &double_center(s).transpose()?) / denom,
        HsicMode::PaperLiteral => {
            let sum_t = t.sum();
            let sum_s = s.sum();
            let ts1: f64 = t.matmul(s)?.sum();
            nf * nf / denom * (trace_prod(t, s) + sum_t * sum_s / (nf * nf) - 2.0 / (nf * nf) * ts1)
        }
    })
}

/// `∂HSIC(A, B)/∂B` as a general matrix; depends on `A` only.
fn hsic_grad_second(a: &Tensor, mode: HsicMode) -> Tensor {
    let n = a.dim(0);
    let nf = n as f64;
    let denom = (nf - 1.0) * (nf - 1.0);
    match mode {
        HsicMode::Standard => double_center(&a.transpose().unwrap()).scale(1.0 / denom),
        HsicMode::PaperLiteral => {
            let sum_a = a.sum();
            // 1ᵀ A B 1 = (Aᵀ1)ᵀ B 1
            let at1: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a.at2(i, j)).sum()).collect();
            let at = a.transpose().unwrap();
            Tensor::from_fn(&[n, n], |idx| {
                nf * nf / denom * (at.data()[idx] + sum_a / (nf * nf) - 2.0 / (nf * nf) * at1[idx / n])
            })
        }
    }
}

fn self_grad(b: &Tensor, mode: HsicMode) -> Tensor {
    // Sum of the gradients through both slots.
    match mode {
        HsicMode::Standard => hsic_grad_second(b, mode).scale(2.0),
        HsicMode::PaperLiteral => hsic_grad_second(b, mode).add(&hsic_grad_first(b)).unwrap(),
    }
}

/// `∂HSIC_lit(A, B)/∂A`; depends on `B` only.
fn hsic_grad_first(b: &Tensor) -> Tensor {
    let n = b.dim(0);
    let nf = n as f64;
    let denom = (nf - 1.0) * (nf - 1.0);
    let sum_b = b.sum();
    let b1: Vec<f64> = (0..n).map(|i| b.row(i).iter().sum()).collect();
    let bt = b.transpose().unwrap();
    Tensor::from_fn(&[n, n], |idx| {
        let j = idx % n;
        nf * nf / denom * (bt.data()[idx] + sum_b / (nf * nf) - 2.0 / (nf * nf) * b1[j])
    })
}

/// Self-HSIC below this fraction of the Gram's squared scale counts as
/// degenerate.
const DEGENERATE_REL: f64 = 1e-12;

fn degenerate(h: f64, g: &Tensor, n: usize) -> bool {
    let scale = frob(g, g) / ((n - 1) * (n - 1)) as f64;
    !(h > DEGENERATE_REL * scale) || !h.is_finite()
}

struct CkaParts {
    value: f64,
    h_ts: f64,
    h_tt: f64,
    h_ss: f64,
    degenerate: bool,
}

fn cka_parts(t: &Tensor, s: &Tensor, mode: HsicMode) -> Result<CkaParts> {
    let n = check_grams(t, s)?;
    let h_ts = hsic(t, s, mode)?;
    let h_tt = hsic(t, t, mode)?;
    let h_ss = hsic(s, s, mode)?;
    let degenerate = degenerate(h_tt, t, n) || degenerate(h_ss, s, n);
    let value = if degenerate {
        log::warn!("cka: degenerate feature Gram (self-HSIC {h_tt:.3e}, {h_ss:.3e}); using 0");
        0.0
    } else {
        h_ts / (h_tt * h_ss).sqrt()
    };
    Ok(CkaParts {
        value,
        h_ts,
        h_tt,
        h_ss,
        degenerate,
    })
}

/// `HSIC(T,S)/√(HSIC(T,T)·HSIC(S,S))`, or 0 when either side is degenerate.
pub fn cka(t: &Tensor, s: &Tensor, mode: HsicMode) -> Result<f64> {
    Ok(cka_parts(t, s, mode)?.value)
}

pub fn cka_on_tape(tape: &mut Tape, t: Var, s: Var, mode: HsicMode) -> Result<Var> {
    let (tv, sv) = (tape.value(t).clone(), tape.value(s).clone());
    let p = cka_parts(&tv, &sv, mode)?;
    Ok(tape.custom(&[t, s], Tensor::scalar(p.value), move |g, _, need| {
        if p.degenerate {
            return vec![
                need[0].then(|| Tensor::zeros(tv.shape())),
                need[1].then(|| Tensor::zeros(sv.shape())),
            ];
        }
        let g = g.data()[0];
        let root = (p.h_tt * p.h_ss).sqrt();
        let gt = need[0].then(|| {
            let d_ts = match mode {
                HsicMode::Standard => hsic_grad_second(&sv, mode),
                HsicMode::PaperLiteral => hsic_grad_first(&sv),
            };
            let d_tt = self_grad(&tv, mode);
            d_ts.scale(g / root).sub(&d_tt.scale(g * 0.5 * p.h_ts / (root * p.h_tt))).unwrap()
        });
        let gs = need[1].then(|| {
            let d_ts = hsic_grad_second(&tv, mode);
            let d_ss = self_grad(&sv, mode);
            d_ts.scale(g / root).sub(&d_ss.scale(g * 0.5 * p.h_ts / (root * p.h_ss))).unwrap()
        });
        vec![gt, gs]
    }))
}

/// Configuration of the feature loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLossConfig {
    pub kernel: KernelKind,
    pub hsic_mode: HsicMode,
    pub similarity: Similarity,
}

/// One pair's contribution: `1 − CKA` of the recalibrated Grams, or the
/// mean squared difference of the recalibrated features.
pub fn pair_loss_on_tape(
    tape: &mut Tape,
    teacher: Var,
    student: Var,
    t_vars: &AlignerVars,
    s_vars: &AlignerVars,
    cfg: &FeatureLossConfig,
) -> Result<Var> {
    let ts = tape.value(teacher).shape().to_vec();
    let ss = tape.value(student).shape().to_vec();
    if ts.len() != 3 || ss.len() != 3 {
        return Err(shape_mismatch("pair_loss", &ts, &ss));
    }
    let target = common_shape((ts[1], ts[2]), (ss[1], ss[2]));
    let fa_t = align_on_tape(tape, teacher, t_vars, target)?;
    let fa_s = align_on_tape(tape, student, s_vars, target)?;
    let ct = tape.value(fa_t).dim(0);
    if tape.value(fa_s).dim(0) != ct {
        return Err(shape_mismatch("pair_loss", tape.value(fa_t).shape(), tape.value(fa_s).shape()));
    }
    let fk_t = recalibrate_on_tape(tape, fa_t, cfg.kernel);
    let fk_s = recalibrate_on_tape(tape, fa_s, cfg.kernel);
    match cfg.similarity {
        Similarity::Cka => {
            let gt = gram_on_tape(tape, fk_t)?;
            let gs = gram_on_tape(tape, fk_s)?;
            let c = cka_on_tape(tape, gt, gs, cfg.hsic_mode)?;
            let neg = tape.scale(c, -1.0);
            Ok(tape.add_scalar(neg, 1.0))
        }
        Similarity::Euclidean => {
            let d = tape.sub(fk_t, fk_s)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean(sq))
        }
    }
}

/// `Σ_n (1 − CKA_n)` over teacher/student pairs, evaluated without gradients.
pub fn fd_loss(
    pairs: &[(FeatureMap, FeatureMap)],
    aligners: &[(AlignerParams, AlignerParams)],
    cfg: &FeatureLossConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("feature loss needs at least one pair"));
    }
    if pairs.len() != aligners.len() {
        return Err(invalid(format!("{} pairs but {} aligner pairs", pairs.len(), aligners.len())));
    }
    let mut tape = Tape::new();
    let mut total = 0.0;
    for ((ft, fs), (at, as_)) in pairs.iter().zip(aligners) {
        at.validate()?;
        as_.validate()?;
        let t = tape.constant(ft.0.clone());
        let s = tape.constant(fs.0.clone());
        let tv = AlignerVars::register(&mut tape, at, false);
        let sv = AlignerVars::register(&mut tape, as_, false);
        let l = pair_loss_on_tape(&mut tape, t, s, &tv, &sv, cfg)?;
        total += tape.value(l).item()?;
    }
    Ok(total)
}
