//! The property suite run by `lix verify`.
//!
//! Every check draws its inputs from a seeded stream and compares the
//! library against an independent computation: brute-force matrix algebra,
//! central finite differences, or a naive confusion count.

use std::fmt::Write as _;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::dwc::{
    beta_matrix, beta_on_tape, build_omega, confidence, omega_on_tape, BetaBounds, BetaMatrix, DwcInit, DwcParams, DwcVars,
};
use crate::error::{invalid, Result};
use crate::feature::{cka, hsic, pair_loss_on_tape, AlignerParams, AlignerVars, FeatureLossConfig, HsicMode, Similarity};
use crate::harness::metrics::segmentation_metrics;
use crate::logit::{
    binary_split, dkd_loss, dwld_loss, grad_target_logit, kd_equivalent_beta, kd_loss, ncld, nontarget_probabilities,
    probabilities, tcld, weighted_logit_loss, weighted_logit_loss_on_tape, DkdParams, KlDirection, LogitField,
    LogitLossConfig, Reduction, TargetMask,
};
use crate::rng::{stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Direction of the fused loss inside the decomposition check. Anything
    /// other than [`KlDirection::Teacher`] is expected to fail it.
    pub decomposition_direction: KlDirection,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            decomposition_direction: KlDirection::Teacher,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{:width$}  {status}  {:7.3}s  {}", c.name, c.seconds, c.detail);
        }
        let failed = self.failures().len();
        let _ = writeln!(out, "{} checks, {} passed, {failed} failed", self.checks.len(), self.checks.len() - failed);
        out
    }
}

type CheckFn = fn(&mut Rng, &VerifyOptions) -> Result<(bool, String)>;

/// Check names in execution order.
pub const CHECKS: [&str; 18] = [
    "I1.decomposition",
    "I2.dwld_to_dkd",
    "I2.dwld_to_kd",
    "I3.ncld_flat_in_target",
    "I3.dkd_target_gradient",
    "I4.nonnegative",
    "I5.pixel_permutation",
    "cka.self",
    "cka.range",
    "cka.invariance",
    "hsic.centering_oracle",
    "hsic.literal_expansion",
    "grad.logit_loss",
    "grad.feature_loss",
    "grad.controller",
    "dwc.bounds",
    "metrics.oracle",
    "checkpoint.round_trip",
];

const FUNCS: [CheckFn; 18] = [
    decomposition,
    dwld_to_dkd,
    dwld_to_kd,
    ncld_flat_in_target,
    dkd_target_gradient,
    nonnegative,
    pixel_permutation,
    cka_self,
    cka_range,
    cka_invariance,
    hsic_centering,
    hsic_literal,
    grad_logit,
    grad_feature,
    grad_controller,
    dwc_bounds,
    metrics_oracle,
    checkpoint_round_trip,
];

pub fn run(opts: &VerifyOptions) -> VerifyReport {
    run_selected(opts, |_| true)
}

/// Runs the checks whose names satisfy `select`.
pub fn run_selected(opts: &VerifyOptions, select: impl Fn(&str) -> bool) -> VerifyReport {
    let mut checks = Vec::new();
    for (i, (&name, f)) in CHECKS.iter().zip(FUNCS).enumerate() {
        if !select(name) {
            continue;
        }
        let mut rng = Rng::new(opts.seed.wrapping_add(i as u64), stream::TESTING);
        let start = Instant::now();
        let (passed, detail) = match f(&mut rng, opts) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        checks.push(CheckOutcome {
            name,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    VerifyReport { checks }
}

fn field(rng: &mut Rng, c: usize, h: usize, w: usize, spread: f64) -> LogitField {
    LogitField::new(rng.uniform_tensor(&[c, h, w], -spread, spread)).expect("three-dimensional")
}

fn mask(rng: &mut Rng, n: usize, c: usize) -> TargetMask {
    TargetMask::new((0..n).map(|_| rng.below(0, c)).collect(), c).expect("targets below class count")
}

/// `|a − b| / max(|a|, |b|, floor)`.
fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn verdict(err: f64, tol: f64, what: &str) -> (bool, String) {
    (err < tol, format!("max {what} {err:.2e} (tol {tol:.0e})"))
}

fn decomposition(rng: &mut Rng, opts: &VerifyOptions) -> Result<(bool, String)> {
    let start = Instant::now();
    let mut err: f64 = 0.0;
    for b in 0..1000 {
        let c = 2 + b % 9;
        let (zt, zs) = (field(rng, c, 2, 3, 4.0), field(rng, c, 2, 3, 4.0));
        let m = mask(rng, 6, c);
        let (pt, ps) = (probabilities(&zt, 1.0)?, probabilities(&zs, 1.0)?);
        let kd = kd_loss(&pt, &ps)?;
        let bt = binary_split(&pt, &m)?;
        let per_pixel = ncld(&nontarget_probabilities(&zt, &m, 1.0)?, &nontarget_probabilities(&zs, &m, 1.0)?)?;
        let weighted: f64 = (0..6).map(|i| bt.tensor().at2(i, 1) * per_pixel.data()[i]).sum();
        let split = tcld(&bt, &binary_split(&ps, &m)?)? + weighted;
        let cfg = LogitLossConfig {
            direction: opts.decomposition_direction,
            ..LogitLossConfig::default()
        };
        let fused = weighted_logit_loss(&zt, &zs, &m, &kd_equivalent_beta(&zt, &m, 1.0)?, &cfg)?;
        err = err.max((kd - split).abs()).max((kd - fused.tcld - fused.weighted_ncld).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = verdict(err, 1e-10, "|KD - (TCLD + Σ(1-p_T)NCLD)|");
    Ok((ok && secs < 5.0, format!("{detail} over 1000 batches, C in 2..=10")))
}

fn dwld_to_dkd(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let bounds = BetaBounds::new(0.0, 20.0)?;
    let mut err: f64 = 0.0;
    for b in 0..200 {
        let c = 2 + b % 9;
        let (zt, zs) = (field(rng, c, 3, 3, 3.0), field(rng, c, 3, 3, 3.0));
        let m = mask(rng, 9, c);
        let (alpha, beta) = (rng.uniform(0.0, 3.0), rng.uniform(0.5, 10.0));
        let mat = BetaMatrix::new(Tensor::full(&[9, c], beta), bounds)?;
        let dwld = dwld_loss(&zt, &zs, &m, &mat, alpha, KlDirection::Teacher)?;
        let dkd = dkd_loss(&zt, &zs, &m, &DkdParams::fixed(alpha, beta))?;
        err = err.max((dwld - dkd).abs());
    }
    Ok(verdict(err, 1e-10, "|DWLD - DKD|"))
}

fn dwld_to_kd(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut err: f64 = 0.0;
    for b in 0..200 {
        let c = 2 + b % 9;
        let (zt, zs) = (field(rng, c, 3, 3, 3.0), field(rng, c, 3, 3, 3.0));
        let m = mask(rng, 9, c);
        let beta = kd_equivalent_beta(&zt, &m, 1.0)?;
        let loss = weighted_logit_loss(&zt, &zs, &m, &beta, &LogitLossConfig::default())?.value;
        err = err.max((loss - kd_loss(&probabilities(&zt, 1.0)?, &probabilities(&zs, 1.0)?)?).abs());
    }
    Ok(verdict(err, 1e-10, "|DWLD(β = 1 - p_T) - KD|"))
}

fn total_ncld(zt: &LogitField, zs: &Tensor, m: &TargetMask) -> Result<f64> {
    let zs = LogitField::new(zs.clone())?;
    Ok(ncld(&nontarget_probabilities(zt, m, 1.0)?, &nontarget_probabilities(&zs, m, 1.0)?)?.sum())
}

fn target_coords(m: &TargetMask) -> Vec<usize> {
    let n = m.len();
    m.targets().iter().enumerate().map(|(i, &k)| k * n + i).collect()
}

fn fd_at(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, coords: &[usize], h: f64) -> Result<Vec<f64>> {
    crate::gradcheck::numerical_gradient_at(f, x, h, coords)
}

fn ncld_flat_in_target(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let c = 5;
    let zt = field(rng, c, 8, 8, 3.0);
    let zs = rng.uniform_tensor(&[c, 8, 8], -3.0, 3.0);
    let m = mask(rng, 64, c);
    let g = fd_at(|z| total_ncld(&zt, z, &m), &zs, &target_coords(&m), 1e-5)?;
    let worst = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(verdict(worst, 1e-6, "|∂NCLD/∂z_k| over 64 pixels"))
}

fn dkd_target_gradient(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let c = 6;
    let zt = field(rng, c, 8, 8, 3.0);
    let zs = rng.uniform_tensor(&[c, 8, 8], -3.0, 3.0);
    let m = mask(rng, 64, c);
    let params = DkdParams::fixed(rng.uniform(0.5, 2.0), rng.uniform(1.0, 8.0));
    let analytic = grad_target_logit(&zt, &LogitField::new(zs.clone())?, &m, &params)?;
    let numeric = fd_at(
        |z| dkd_loss(&zt, &LogitField::new(z.clone())?, &m, &params),
        &zs,
        &target_coords(&m),
        1e-5,
    )?;
    let err = analytic.data().iter().zip(&numeric).map(|(&a, &n)| rel(a, n, 1e-6)).fold(0.0, f64::max);
    Ok(verdict(err, 1e-4, "relative error of ∂DKD/∂z_k"))
}

fn nonnegative(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let bounds = BetaBounds::default();
    let mut lowest = f64::INFINITY;
    let mut at_equal: f64 = 0.0;
    for b in 0..200 {
        let c = 2 + b % 9;
        let (zt, zs) = (field(rng, c, 2, 4, 5.0), field(rng, c, 2, 4, 5.0));
        let m = mask(rng, 8, c);
        let beta = BetaMatrix::new(rng.uniform_tensor(&[8, c], 1.0, 10.0), bounds)?;
        let params = DkdParams::fixed(rng.uniform(0.0, 2.0), rng.uniform(0.0, 8.0));
        let values = [
            kd_loss(&probabilities(&zt, 1.0)?, &probabilities(&zs, 1.0)?)?,
            dkd_loss(&zt, &zs, &m, &params)?,
            dwld_loss(&zt, &zs, &m, &beta, 1.0, KlDirection::Teacher)?,
        ];
        lowest = values.iter().fold(lowest, |a, &v| a.min(v));
        let same = [
            kd_loss(&probabilities(&zt, 1.0)?, &probabilities(&zt, 1.0)?)?,
            dkd_loss(&zt, &zt, &m, &params)?,
            dwld_loss(&zt, &zt, &m, &beta, 1.0, KlDirection::Teacher)?,
        ];
        at_equal = same.iter().fold(at_equal, |a, &v| a.max(v.abs()));
    }
    Ok((
        lowest >= -1e-12 && at_equal < 1e-12,
        format!("min loss {lowest:.2e}, max loss at p_S = p_T {at_equal:.2e}"),
    ))
}

fn pixel_permutation(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut err: f64 = 0.0;
    for _ in 0..50 {
        let c = rng.below(2, 11);
        let (h, w) = (4, 5);
        let n = h * w;
        let (zt, zs) = (field(rng, c, h, w, 4.0), field(rng, c, h, w, 4.0));
        let m = mask(rng, n, c);
        let beta = rng.uniform_tensor(&[n, c], 1.0, 10.0);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let permute = |t: &Tensor| Tensor::from_rows(&order.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>());
        let zt2 = LogitField::from_pixel_rows(&permute(&zt.pixel_rows())?, h, w)?;
        let zs2 = LogitField::from_pixel_rows(&permute(&zs.pixel_rows())?, h, w)?;
        let m2 = TargetMask::new(order.iter().map(|&i| m.targets()[i]).collect(), c)?;
        let bounds = BetaBounds::default();
        let a = dwld_loss(&zt, &zs, &m, &BetaMatrix::new(beta.clone(), bounds)?, 1.0, KlDirection::Teacher)?;
        let b = dwld_loss(&zt2, &zs2, &m2, &BetaMatrix::new(permute(&beta)?, bounds)?, 1.0, KlDirection::Teacher)?;
        err = err.max((a - b).abs());
    }
    Ok(verdict(err, 1e-12, "|DWLD - DWLD(permuted)|"))
}

fn linear_gram(x: &Tensor) -> Result<Tensor> {
    x.matmul(&x.transpose()?)
}

fn random_features(rng: &mut Rng) -> Tensor {
    let n = rng.below(3, 12);
    let d = rng.below(2, 20);
    rng.uniform_tensor(&[n, d], -1.0, 1.0)
}

fn cka_self(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut err: f64 = 0.0;
    for _ in 0..500 {
        let g = linear_gram(&random_features(rng))?;
        err = err.max((cka(&g, &g, HsicMode::Standard)? - 1.0).abs());
    }
    Ok(verdict(err, 1e-10, "|CKA(X, X) - 1|"))
}

fn cka_range(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..500 {
        let x = random_features(rng);
        let d = rng.below(2, 20);
        let y = rng.uniform_tensor(&[x.dim(0), d], -1.0, 1.0).map(|v| v.max(0.0));
        let v = cka(&linear_gram(&x)?, &linear_gram(&y)?, HsicMode::Standard)?;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((
        lo >= 0.0 && hi <= 1.0 + 1e-12,
        format!("CKA over 500 pairs in [{lo:.4}, {hi:.4}]"),
    ))
}

/// Orthogonal `d×d` matrix from Gram-Schmidt on a random square.
fn random_orthogonal(rng: &mut Rng, d: usize) -> Result<Tensor> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for q in &cols {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Ok(Tensor::from_fn(&[d, d], |idx| cols[idx % d][idx / d]))
}

fn cka_invariance(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut err: f64 = 0.0;
    let mut orth_err: f64 = 0.0;
    for _ in 0..100 {
        let x = random_features(rng);
        let y = rng.uniform_tensor(&[x.dim(0), x.dim(1)], -1.0, 1.0);
        let base = cka(&linear_gram(&x)?, &linear_gram(&y)?, HsicMode::Standard)?;
        let scaled = cka(&linear_gram(&x.scale(rng.uniform(0.01, 50.0)))?, &linear_gram(&y)?, HsicMode::Standard)?;
        let q = random_orthogonal(rng, x.dim(1))?;
        orth_err = orth_err.max(q.transpose()?.matmul(&q)?.sub(&Tensor::identity(x.dim(1)))?.max_abs());
        let rotated = cka(&linear_gram(&x.matmul(&q)?)?, &linear_gram(&y)?, HsicMode::Standard)?;
        err = err.max((scaled - base).abs()).max((rotated - base).abs());
    }
    let (ok, detail) = verdict(err, 1e-8, "change under scaling or rotation");
    Ok((ok && orth_err < 1e-10, format!("{detail}; |QᵀQ - I| {orth_err:.1e}")))
}

fn random_gram(rng: &mut Rng, n: usize) -> Result<Tensor> {
    let d = rng.below(1, 8);
    linear_gram(&rng.uniform_tensor(&[n, d], -1.0, 1.0))
}

fn hsic_centering(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut err: f64 = 0.0;
    for n in 2..=16 {
        for _ in 0..5 {
            let (k, l) = (random_gram(rng, n)?, random_gram(rng, n)?);
            let h = Tensor::from_fn(&[n, n], |idx| f64::from(u8::from(idx / n == idx % n)) - 1.0 / n as f64);
            let khlh = k.matmul(&h)?.matmul(&l)?.matmul(&h)?;
            let trace: f64 = (0..n).map(|i| khlh.at2(i, i)).sum();
            let oracle = trace / ((n - 1) * (n - 1)) as f64;
            err = err.max(rel(hsic(&k, &l, HsicMode::Standard)?, oracle, 1.0));
        }
    }
    Ok(verdict(err, 1e-10, "error against tr(KHLH)/(n-1)² for n = 2..=16"))
}

fn hsic_literal(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut err: f64 = 0.0;
    for n in 2..=16 {
        let (t, s) = (random_gram(rng, n)?, random_gram(rng, n)?);
        let nf = n as f64;
        let mut trace = 0.0;
        let mut sum_t = 0.0;
        let mut sum_s = 0.0;
        let mut cross = 0.0;
        for i in 0..n {
            for j in 0..n {
                trace += t.at2(i, j) * s.at2(j, i);
                sum_t += t.at2(i, j);
                sum_s += s.at2(i, j);
                for l in 0..n {
                    cross += t.at2(i, l) * s.at2(l, j);
                }
            }
        }
        let first = nf * nf / ((nf - 1.0) * (nf - 1.0));
        let expanded = first * trace + first * sum_t * sum_s / (nf * nf) - first * 2.0 / (nf * nf) * cross;
        err = err.max(rel(hsic(&t, &s, HsicMode::PaperLiteral)?, expanded, 1.0));
    }
    Ok(verdict(err, 1e-10, "error against the three-term expansion"))
}

/// Compares tape gradients with central differences at `probes` random
/// coordinates of every input. Returns the worst relative error.
fn probe_gradients<F>(rng: &mut Rng, inputs: &[Tensor], probes: usize, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = build(&mut t, &vs)?;
        t.value(o).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for _ in 0..probes {
            let j = rng.below(0, x.numel());
            let mut values = inputs.to_vec();
            values[i].data_mut()[j] = x.data()[j] + h;
            let up = eval(&values)?;
            values[i].data_mut()[j] = x.data()[j] - h;
            let down = eval(&values)?;
            worst = worst.max(rel(analytic[i].data()[j], (up - down) / (2.0 * h), 1e-6));
        }
    }
    Ok(worst)
}

fn grad_logit(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for reduction in [Reduction::Sum, Reduction::Mean] {
        let c = 5;
        let zt = field(rng, c, 4, 4, 3.0);
        let m = mask(rng, 16, c);
        let zs = rng.uniform_tensor(&[c, 4, 4], -3.0, 3.0);
        let beta = rng.uniform_tensor(&[16, c], 1.0, 10.0);
        let cfg = LogitLossConfig {
            alpha: 1.3,
            reduction,
            ..LogitLossConfig::default()
        };
        let err = probe_gradients(rng, &[zs, beta], 24, |tape, v| {
            Ok(weighted_logit_loss_on_tape(tape, &zt, v[0], &m, v[1], &cfg)?.0)
        })?;
        worst = worst.max(err);
    }
    Ok(verdict(worst, 1e-4, "relative error over student logits and β"))
}

fn aligner_inputs(p: &AlignerParams) -> [Tensor; 4] {
    [p.conv_w.clone(), p.conv_b.clone(), p.norm_scale.clone(), p.norm_shift.clone()]
}

fn aligner_from(v: &[Var]) -> AlignerVars {
    AlignerVars {
        conv_w: v[0],
        conv_b: v[1],
        norm_scale: v[2],
        norm_shift: v[3],
        normalize: true,
    }
}

fn grad_feature(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for similarity in [Similarity::Cka, Similarity::Euclidean] {
        let cfg = FeatureLossConfig {
            similarity,
            ..FeatureLossConfig::default()
        };
        let teacher = rng.uniform_tensor(&[4, 4, 4], 0.0, 1.0);
        let student = rng.uniform_tensor(&[3, 8, 8], -1.0, 1.0);
        let at = AlignerParams::new(4, 4, rng);
        let mut as_ = AlignerParams::new(3, 4, rng);
        as_.norm_shift = rng.uniform_tensor(&[4], 0.2, 0.5);
        let mut inputs = vec![student];
        inputs.extend(aligner_inputs(&as_));
        inputs.extend(aligner_inputs(&at));
        let err = probe_gradients(rng, &inputs, 20, |tape, v| {
            let t = tape.constant(teacher.clone());
            pair_loss_on_tape(tape, t, v[0], &aligner_from(&v[5..9]), &aligner_from(&v[1..5]), &cfg)
        })?;
        worst = worst.max(err);
    }
    Ok(verdict(worst, 1e-4, "relative error over student features and aligners"))
}

fn grad_controller(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let c = 5;
    let zt = field(rng, c, 4, 4, 3.0);
    let zs = field(rng, c, 4, 4, 3.0);
    let m = mask(rng, 16, c);
    let params = DwcParams::new(c + 1, 16, c, DwcInit::Xavier, rng)?;
    let probs = probabilities(&zs, 1.0)?.tensor().clone();
    let inputs: Vec<Tensor> = params.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect();
    let cfg = LogitLossConfig::default();
    let err = probe_gradients(rng, &inputs, 20, |tape, v| {
        let p = tape.constant(probs.clone());
        let omega = omega_on_tape(tape, p, true)?;
        let vars = DwcVars {
            layers: [(v[0], v[1]), (v[2], v[3]), (v[4], v[5])],
        };
        let beta = beta_on_tape(tape, omega, &vars, BetaBounds::default(), None)?;
        let s = tape.constant(zs.tensor().clone());
        Ok(weighted_logit_loss_on_tape(tape, &zt, s, &m, beta, &cfg)?.0)
    })?;
    Ok(verdict(err, 1e-4, "relative error over controller weights and biases"))
}

fn dwc_bounds(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut outside = 0usize;
    let mut mid_err: f64 = 0.0;
    for _ in 0..50 {
        let c = rng.below(2, 11);
        let lo = rng.uniform(0.0, 5.0);
        let bounds = BetaBounds::new(lo, lo + rng.uniform(0.5, 10.0))?;
        let p = probabilities(&field(rng, c, 3, 3, 20.0), 1.0)?;
        let omega = build_omega(&p, &confidence(&p))?;
        let params = DwcParams::new(c + 1, 16, c, DwcInit::Xavier, rng)?;
        let beta = beta_matrix(&omega, &params, bounds)?;
        outside += beta.tensor().data().iter().filter(|&&b| !(b >= bounds.min() && b <= bounds.max())).count();
        let zero = DwcParams::new(c + 1, 16, c, DwcInit::Zero, rng)?;
        let mid = beta_matrix(&omega, &zero, bounds)?;
        mid_err = mid.tensor().data().iter().fold(mid_err, |a, &b| a.max((b - bounds.midpoint()).abs()));
    }
    Ok((
        outside == 0 && mid_err < 1e-12,
        format!("{outside} weights outside bounds; zero-init deviation from midpoint {mid_err:.1e}"),
    ))
}

/// Per-class counts by direct enumeration, then the four averages.
fn brute_metrics(gt: &[usize], pred: &[usize], classes: usize) -> [f64; 4] {
    let mut f1 = Vec::new();
    let mut iou = Vec::new();
    let mut weight = Vec::new();
    for k in 0..classes {
        let tp = gt.iter().zip(pred).filter(|&(&g, &p)| g == k && p == k).count() as f64;
        let fp = gt.iter().zip(pred).filter(|&(&g, &p)| g != k && p == k).count() as f64;
        let fneg = gt.iter().zip(pred).filter(|&(&g, &p)| g == k && p != k).count() as f64;
        if tp + fp + fneg == 0.0 {
            continue;
        }
        f1.push(2.0 * tp / (2.0 * tp + fp + fneg));
        iou.push(tp / (tp + fp + fneg));
        weight.push((tp + fneg) / gt.len() as f64);
    }
    let mean = |v: &[f64]| 100.0 * v.iter().sum::<f64>() / v.len() as f64;
    let fw = |v: &[f64]| 100.0 * v.iter().zip(&weight).map(|(a, w)| a * w).sum::<f64>();
    [mean(&f1), fw(&f1), mean(&iou), fw(&iou)]
}

fn metrics_oracle(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut err: f64 = 0.0;
    for _ in 0..100 {
        let classes = rng.below(2, 8);
        let n = rng.below(1, 200);
        let gt: Vec<usize> = (0..n).map(|_| rng.below(0, classes)).collect();
        let pred: Vec<usize> = (0..n)
            .map(|i| if rng.unit() < 0.6 { gt[i] } else { rng.below(0, classes) })
            .collect();
        let m = segmentation_metrics(&gt, &pred, classes)?;
        let want = brute_metrics(&gt, &pred, classes);
        for (got, want) in [m.mFsc, m.fwFsc, m.mIoU, m.fwIoU].into_iter().zip(want) {
            err = err.max((got - want).abs());
        }
    }
    let hand = segmentation_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2)?;
    let hand_err = (hand.mIoU - 700.0 / 12.0).abs();
    let (ok, detail) = verdict(err, 1e-10, "metric error");
    Ok((
        ok && hand_err < 1e-10,
        format!("{detail} over 100 pairs; hand case mIoU {:.4}%", hand.mIoU),
    ))
}

fn checkpoint_round_trip(rng: &mut Rng, _: &VerifyOptions) -> Result<(bool, String)> {
    let mut ck = Checkpoint::new();
    for i in 0..6 {
        let rank = rng.below(1, 4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.below(1, 5)).collect();
        ck.insert(format!("tensor{i}.w"), rng.uniform_tensor(&shape, -1e3, 1e3));
    }
    let bytes = ck.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    let bitwise = back.len() == ck.len()
        && ck.iter().all(|(n, t)| {
            back.get(n).is_some_and(|b| {
                b.shape() == t.shape() && b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
        });
    let truncated = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err();
    if !bitwise {
        return Err(invalid("round trip changed the checkpoint"));
    }
    Ok((truncated, format!("{} tensors bitwise equal; truncation rejected: {truncated}", ck.len())))
}
