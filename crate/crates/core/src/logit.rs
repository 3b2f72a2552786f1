//! Logit distillation: classic KD, its exact split into a target-class term
//! (TCLD) and a non-target term (NCLD), decoupled KD with fixed weights, and
//! the logit-wise weighted loss driven by a [`BetaMatrix`].
//!
//! All per-pixel quantities use pixel-major `HW×C` matrices. Logarithms are
//! clamped below at [`LOG_FLOOR`]; nothing else is clamped.
//!
//! With the teacher-weighted KL direction the decomposition
//! `KL(p_T‖p_S) = TCLD + (1 − p_T[k])·NCLD` holds per pixel, so constant
//! weights reduce the weighted loss to DKD and the weights `1 − p_T[k]`
//! reduce it to KD.

use serde::{Deserialize, Serialize};

use crate::dwc::BetaMatrix;
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_in_place, Tensor};

pub const LOG_FLOOR: f64 = 1e-12;

fn ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Raw class scores, `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitField(Tensor);

impl LogitField {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(invalid(format!("logits must be C×H×W, got {:?}", values.shape())));
        }
        if values.dim(0) < 2 {
            return Err(invalid("logits need at least two classes"));
        }
        values.ensure_finite("logits")?;
        Ok(Self(values))
    }

    /// Builds a field from pixel-major `HW×C` rows laid out over `h×w`.
    pub fn from_pixel_rows(rows: &Tensor, h: usize, w: usize) -> Result<Self> {
        let (n, c) = rows.dims2()?;
        if n != h * w {
            return Err(shape_mismatch("from_pixel_rows", rows.shape(), &[h, w]));
        }
        Self::new(rows.transpose()?.reshape(&[c, h, w])?)
    }

    pub fn classes(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn pixels(&self) -> usize {
        self.0.dim(1) * self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `HW×C` view (the reshape of the channel-first field).
    pub fn pixel_rows(&self) -> Tensor {
        pixel_major(&self.0)
    }
}

pub(crate) fn pixel_major(chw: &Tensor) -> Tensor {
    let c = chw.dim(0);
    let n = chw.numel() / c;
    let src = chw.data();
    let mut out = vec![0.0; n * c];
    for ch in 0..c {
        for i in 0..n {
            out[i * c + ch] = src[ch * n + i];
        }
    }
    Tensor::new(&[n, c], out).unwrap()
}

fn channel_major(rows: &[f64], c: usize, shape: &[usize]) -> Tensor {
    let n = rows.len() / c;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n + i] = rows[i * c + ch];
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// Ground-truth class per pixel. The one-hot matrix `T` of the target
/// classes and its complement `N = 1·1ᵀ − T` are derived on demand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMask {
    classes: usize,
    targets: Vec<usize>,
}

impl TargetMask {
    pub fn new(targets: Vec<usize>, classes: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(invalid("empty target mask"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(invalid(format!("target {bad} out of range for {classes} classes")));
        }
        Ok(Self { classes, targets })
    }

    /// Parses a Boolean-valued `HW×C` matrix; each row must hold exactly one 1.
    pub fn from_onehot(onehot: &Tensor) -> Result<Self> {
        let (n, c) = onehot.dims2()?;
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let row = onehot.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(invalid(format!("row {i} is not Boolean")));
            }
            let ones: Vec<usize> = (0..c).filter(|&j| row[j] == 1.0).collect();
            match ones[..] {
                [k] => targets.push(k),
                _ => return Err(invalid(format!("row {i} has {} targets", ones.len()))),
            }
        }
        Self::new(targets, c)
    }

    pub fn onehot(&self) -> Tensor {
        let c = self.classes;
        Tensor::from_fn(&[self.targets.len(), c], |i| {
            if self.targets[i / c] == i % c {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    fn check(&self, pixels: usize, classes: usize) -> Result<()> {
        if self.targets.len() != pixels || self.classes != classes {
            return Err(shape_mismatch(
                "target mask",
                &[self.targets.len(), self.classes],
                &[pixels, classes],
            ));
        }
        Ok(())
    }
}

/// Row-stochastic `HW×C` class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix(Tensor);

impl ProbabilityMatrix {
    pub fn new(p: Tensor) -> Result<Self> {
        let (n, _) = p.dims2()?;
        for i in 0..n {
            let row = p.row(i);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self(p))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.0.dim(1)
    }
}

/// Per-pixel `[p_k, 1 − p_k]`, `HW×2`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryProbabilities(Tensor);

impl BinaryProbabilities {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Softmax over the non-target logits only; the target column is exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct NonTargetProbabilities(Tensor);

impl NonTargetProbabilities {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `Σ p_T log(p_T / p_S)`, the direction of classic KD.
    #[default]
    Teacher,
    /// `Σ p_S log(p_T / p_S)` as printed for the weighted loss. Kept for
    /// comparison; it is not a divergence and breaks the decomposition.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// NCLD weight: one scalar for every logit, or one weight per logit.
#[derive(Clone, Debug, PartialEq)]
pub enum NcldWeight {
    Fixed(f64),
    Matrix(BetaMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DkdParams {
    pub alpha: f64,
    pub beta: NcldWeight,
    pub temperature: f64,
}

impl DkdParams {
    pub fn fixed(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta: NcldWeight::Fixed(beta),
            temperature: 1.0,
        }
    }

    fn fixed_beta(&self) -> Result<f64> {
        if !(self.alpha >= 0.0) {
            return Err(invalid(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        match self.beta {
            NcldWeight::Fixed(b) if b >= 0.0 => Ok(b),
            NcldWeight::Fixed(b) => Err(invalid(format!("beta must be nonnegative, got {b}"))),
            NcldWeight::Matrix(_) => Err(invalid("this operation needs a fixed beta")),
        }
    }
}

/// Softmax of the reshaped logits at the given temperature.
pub fn probabilities(z: &LogitField, temperature: f64) -> Result<ProbabilityMatrix> {
    Ok(ProbabilityMatrix(z.pixel_rows().softmax_rows(temperature)?))
}

pub fn binary_split(p: &ProbabilityMatrix, mask: &TargetMask) -> Result<BinaryProbabilities> {
    let (n, c) = p.0.dims2()?;
    mask.check(n, c)?;
    let mut out = Vec::with_capacity(2 * n);
    for (i, &k) in mask.targets.iter().enumerate() {
        let row = p.0.row(i);
        let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
        out.push(row[k]);
        out.push(rest);
    }
    Ok(BinaryProbabilities(Tensor::new(&[n, 2], out)?))
}

/// Softmax over the non-target entries of one row; the target slot gets 0.
fn masked_softmax(row: &mut [f64], k: usize, temperature: f64) {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if j == k {
            *v = 0.0;
        } else {
            *v = ((*v - max) / temperature).exp();
            z += *v;
        }
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Non-target distribution, equivalent to subtracting an infinitely large
/// value from the target logit before the softmax.
pub fn nontarget_probabilities(
    z: &LogitField,
    mask: &TargetMask,
    temperature: f64,
) -> Result<NonTargetProbabilities> {
    check_temperature(temperature)?;
    let mut rows = z.pixel_rows();
    let c = z.classes();
    if c < 2 {
        return Err(invalid("no non-target classes"));
    }
    mask.check(z.pixels(), c)?;
    for (row, &k) in rows.data_mut().chunks_mut(c).zip(&mask.targets) {
        masked_softmax(row, k, temperature);
    }
    Ok(NonTargetProbabilities(rows))
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {t}")))
    }
}

fn kl_sum(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(shape_mismatch("kl", p.shape(), q.shape()));
    }
    let mut clamped = 0usize;
    let mut total = 0.0;
    for (&a, &b) in p.data().iter().zip(q.data()) {
        if a > 0.0 {
            if b < LOG_FLOOR {
                clamped += 1;
            }
            total += a * (ln(a) - ln(b));
        }
    }
    if clamped > 0 {
        log::debug!("kl: {clamped} student probabilities clamped at {LOG_FLOOR}");
    }
    Ok(total)
}

/// `Σ_pixels KL(p_T ‖ p_S)`.
pub fn kd_loss(p_t: &ProbabilityMatrix, p_s: &ProbabilityMatrix) -> Result<f64> {
    kl_sum(&p_t.0, &p_s.0)
}

/// `Σ_pixels KL(b_T ‖ b_S)` over the binary target/non-target split.
pub fn tcld(b_t: &BinaryProbabilities, b_s: &BinaryProbabilities) -> Result<f64> {
    kl_sum(&b_t.0, &b_s.0)
}

/// Per-pixel `KL(p̂_T\k ‖ p̂_S\k)`.
pub fn ncld(pnk_t: &NonTargetProbabilities, pnk_s: &NonTargetProbabilities) -> Result<Tensor> {
    let (n, c) = pnk_t.0.dims2()?;
    if pnk_s.0.shape() != pnk_t.0.shape() {
        return Err(shape_mismatch("ncld", pnk_t.0.shape(), pnk_s.0.shape()));
    }
    let vals = (0..n)
        .map(|i| {
            let (a, b) = (pnk_t.0.row(i), pnk_s.0.row(i));
            (0..c).filter(|&j| a[j] > 0.0).map(|j| a[j] * (ln(a[j]) - ln(b[j]))).sum()
        })
        .collect();
    Tensor::new(&[n], vals)
}

/// `α·TCLD + β·Σ NCLD` with a fixed `β`.
pub fn dkd_loss(z_t: &LogitField, z_s: &LogitField, mask: &TargetMask, params: &DkdParams) -> Result<f64> {
    let beta = params.fixed_beta()?;
    let t = params.temperature;
    let b_t = binary_split(&probabilities(z_t, t)?, mask)?;
    let b_s = binary_split(&probabilities(z_s, t)?, mask)?;
    let n = ncld(
        &nontarget_probabilities(z_t, mask, t)?,
        &nontarget_probabilities(z_s, mask, t)?,
    )?;
    Ok(params.alpha * tcld(&b_t, &b_s)? + beta * n.sum())
}

/// Configuration of the weighted logit loss used during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitLossConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub direction: KlDirection,
    pub reduction: Reduction,
}

impl Default for LogitLossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            temperature: 1.0,
            direction: KlDirection::Teacher,
            reduction: Reduction::Sum,
        }
    }
}

/// Value and gradients of the weighted logit loss.
pub struct LogitLossEval {
    pub value: f64,
    pub tcld: f64,
    pub weighted_ncld: f64,
    /// `∂L/∂z_S`, laid out `C×H×W`.
    pub grad_student: Tensor,
    /// `∂L/∂β`, `HW×C`; zero on target columns.
    pub grad_beta: Tensor,
}

/// `α·TCLD + Σ β ⊙ (per-logit NCLD contribution)` with hand-derived
/// gradients. `beta` is `HW×C`; its target-class entries are ignored.
pub fn weighted_logit_loss(
    z_t: &LogitField,
    z_s: &LogitField,
    mask: &TargetMask,
    beta: &Tensor,
    cfg: &LogitLossConfig,
) -> Result<LogitLossEval> {
    check_temperature(cfg.temperature)?;
    if !(cfg.alpha >= 0.0) {
        return Err(invalid(format!("alpha must be nonnegative, got {}", cfg.alpha)));
    }
    if z_t.tensor().shape() != z_s.tensor().shape() {
        return Err(shape_mismatch("weighted_logit_loss", z_t.tensor().shape(), z_s.tensor().shape()));
    }
    let c = z_s.classes();
    let n = z_s.pixels();
    mask.check(n, c)?;
    if beta.shape() != [n, c] {
        return Err(shape_mismatch("weighted_logit_loss beta", beta.shape(), &[n, c]));
    }
    let temp = cfg.temperature;
    let zt = z_t.pixel_rows();
    let zs = z_s.pixel_rows();
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let alpha = cfg.alpha;

    let mut grad_s = vec![0.0; n * c];
    let mut grad_b = vec![0.0; n * c];
    let (mut tc_total, mut nc_total) = (0.0, 0.0);
    let mut pt = vec![0.0; c];
    let mut ps = vec![0.0; c];
    let mut qt = vec![0.0; c];
    let mut qs = vec![0.0; c];
    for (i, &k) in mask.targets.iter().enumerate() {
        let r = i * c..(i + 1) * c;
        pt.copy_from_slice(zt.row(i));
        ps.copy_from_slice(zs.row(i));
        qt.copy_from_slice(zt.row(i));
        qs.copy_from_slice(zs.row(i));
        softmax_in_place(&mut pt, temp);
        softmax_in_place(&mut ps, temp);
        masked_softmax(&mut qt, k, temp);
        masked_softmax(&mut qs, k, temp);
        let t0 = pt[k];
        let t1: f64 = (0..c).filter(|&j| j != k).map(|j| pt[j]).sum();
        let s0 = ps[k];
        let s1: f64 = (0..c).filter(|&j| j != k).map(|j| ps[j]).sum();
        let b = &beta.data()[r.clone()];
        let gs = &mut grad_s[r.clone()];
        let gb = &mut grad_b[r];

        match cfg.direction {
            KlDirection::Teacher => {
                let tc = xlogy_ratio(t0, s0) + xlogy_ratio(t1, s1);
                tc_total += tc;
                // ∂TCLD/∂s_j, with s the tempered logits.
                for j in 0..c {
                    gs[j] += if j == k {
                        alpha * (-t0 * s1 + t1 * s0)
                    } else {
                        alpha * (t0 * ps[j] - t1 * s0 * qs[j])
                    };
                }
                let mut weighted_qt = 0.0;
                for j in (0..c).filter(|&j| j != k) {
                    let contrib = xlogy_ratio(qt[j], qs[j]);
                    nc_total += b[j] * contrib;
                    gb[j] = contrib * scale;
                    weighted_qt += b[j] * qt[j];
                }
                for j in (0..c).filter(|&j| j != k) {
                    gs[j] += -b[j] * qt[j] + qs[j] * weighted_qt;
                }
            }
            KlDirection::Literal => {
                let tc = s0 * (ln(t0) - ln(s0)) + s1 * (ln(t1) - ln(s1));
                tc_total += tc;
                let d = (ln(t0) - ln(s0)) - (ln(t1) - ln(s1));
                for j in 0..c {
                    gs[j] += if j == k {
                        alpha * d * s0 * s1
                    } else {
                        -alpha * d * s0 * ps[j]
                    };
                }
                let mut a = vec![0.0; c];
                let mut mean_a = 0.0;
                for j in (0..c).filter(|&j| j != k) {
                    let lr = ln(qt[j]) - ln(qs[j]);
                    nc_total += b[j] * qs[j] * lr;
                    gb[j] = qs[j] * lr * scale;
                    a[j] = b[j] * (lr - 1.0);
                    mean_a += qs[j] * a[j];
                }
                for j in (0..c).filter(|&j| j != k) {
                    gs[j] += qs[j] * (a[j] - mean_a);
                }
            }
        }
    }
    let chain = scale / temp;
    for g in grad_s.iter_mut() {
        *g *= chain;
    }
    let value = scale * (alpha * tc_total + nc_total);
    if !value.is_finite() {
        return Err(Error::NonFinite("weighted_logit_loss".into()));
    }
    Ok(LogitLossEval {
        value,
        tcld: tc_total * scale,
        weighted_ncld: nc_total * scale,
        grad_student: channel_major(&grad_s, c, z_s.tensor().shape()),
        grad_beta: Tensor::new(&[n, c], grad_b)?,
    })
}

/// `a log(a / b)` with `0 log 0 = 0` and the logarithm floor.
fn xlogy_ratio(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        a * (ln(a) - ln(b))
    } else {
        0.0
    }
}

/// Dynamically weighted logit distillation (DWLD).
pub fn dwld_loss(
    z_t: &LogitField,
    z_s: &LogitField,
    mask: &TargetMask,
    beta: &BetaMatrix,
    alpha: f64,
    direction: KlDirection,
) -> Result<f64> {
    beta.validate()?;
    let cfg = LogitLossConfig {
        alpha,
        direction,
        ..LogitLossConfig::default()
    };
    Ok(weighted_logit_loss(z_t, z_s, mask, beta.tensor(), &cfg)?.value)
}

/// Per-pixel `∂DKD/∂z_S[k]` at the target logit, analytic. Only the TCLD
/// term contributes because the non-target softmax does not involve `z_k`.
pub fn grad_target_logit(
    z_t: &LogitField,
    z_s: &LogitField,
    mask: &TargetMask,
    params: &DkdParams,
) -> Result<Tensor> {
    params.fixed_beta()?;
    let t = params.temperature;
    let b_t = binary_split(&probabilities(z_t, t)?, mask)?;
    let b_s = binary_split(&probabilities(z_s, t)?, mask)?;
    let n = mask.len();
    let vals = (0..n)
        .map(|i| {
            let (t0, t1) = (b_t.0.at2(i, 0), b_t.0.at2(i, 1));
            let (s0, s1) = (b_s.0.at2(i, 0), b_s.0.at2(i, 1));
            params.alpha * (-t0 * s1 + t1 * s0) / t
        })
        .collect();
    Tensor::new(&[n], vals)
}

/// Records the weighted logit loss on a tape. `student` holds `C×H×W`
/// logits and `beta` an `HW×C` weight matrix; either may be constant.
pub fn weighted_logit_loss_on_tape(
    tape: &mut Tape,
    teacher: &LogitField,
    student: Var,
    mask: &TargetMask,
    beta: Var,
    cfg: &LogitLossConfig,
) -> Result<(Var, LogitLossParts)> {
    let z_s = LogitField::new(tape.value(student).clone())?;
    let eval = weighted_logit_loss(teacher, &z_s, mask, tape.value(beta), cfg)?;
    let parts = LogitLossParts {
        tcld: eval.tcld,
        weighted_ncld: eval.weighted_ncld,
    };
    let (gs, gb) = (eval.grad_student, eval.grad_beta);
    let v = tape.custom(&[student, beta], Tensor::scalar(eval.value), move |g, _, need| {
        let s = g.data()[0];
        vec![need[0].then(|| gs.scale(s)), need[1].then(|| gb.scale(s))]
    });
    Ok((v, parts))
}

/// Component values reported alongside the taped loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogitLossParts {
    pub tcld: f64,
    pub weighted_ncld: f64,
}

/// The weights `1 − p_T[k]` broadcast over classes; with `α = 1` these turn
/// the weighted loss into classic KD.
pub fn kd_equivalent_beta(z_t: &LogitField, mask: &TargetMask, temperature: f64) -> Result<Tensor> {
    let p = probabilities(z_t, temperature)?;
    let c = p.classes();
    let b = binary_split(&p, mask)?;
    Ok(Tensor::from_fn(&[p.rows(), c], |idx| b.0.at2(idx / c, 1)))
}
