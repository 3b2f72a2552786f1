//! Dynamic weight controller: a three-layer perceptron mapping per-pixel
//! class probabilities (optionally with their entropy) to bounded per-logit
//! NCLD weights.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, shape_mismatch, Result};
use crate::logit::{ProbabilityMatrix, LOG_FLOOR};
use crate::rng::Rng;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Per-pixel Shannon entropy in nats, length `HW`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceVector(Tensor);

impl ConfidenceVector {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

pub fn confidence(p: &ProbabilityMatrix) -> ConfidenceVector {
    let t = p.tensor();
    let (n, _) = t.dims2().expect("probability matrix is 2-d");
    let c = (0..n)
        .map(|i| {
            let h: f64 = t.row(i).iter().filter(|&&v| v > 0.0).map(|&v| -v * v.max(LOG_FLOOR).ln()).sum();
            h.max(0.0)
        })
        .collect();
    ConfidenceVector(Tensor::new(&[n], c).unwrap())
}

/// Controller input, `HW×(C+1)` with entropy or `HW×C` without.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaMatrix(Tensor);

impl OmegaMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.dim(1)
    }
}

/// `[P̂ | c]`.
pub fn build_omega(p: &ProbabilityMatrix, c: &ConfidenceVector) -> Result<OmegaMatrix> {
    let (n, k) = p.tensor().dims2()?;
    if c.0.numel() != n {
        return Err(shape_mismatch("build_omega", p.tensor().shape(), c.0.shape()));
    }
    let mut out = Vec::with_capacity(n * (k + 1));
    for i in 0..n {
        out.extend_from_slice(p.tensor().row(i));
        out.push(c.0.data()[i]);
    }
    Ok(OmegaMatrix(Tensor::new(&[n, k + 1], out)?))
}

/// Probabilities alone, for the ablation without the entropy column.
pub fn omega_probs_only(p: &ProbabilityMatrix) -> OmegaMatrix {
    OmegaMatrix(p.tensor().clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaBounds {
    min: f64,
    max: f64,
}

impl BetaBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min >= 0.0 && min < max && max.is_finite()) {
            return Err(invalid(format!("bad beta bounds [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

impl Default for BetaBounds {
    fn default() -> Self {
        Self { min: 1.0, max: 10.0 }
    }
}

/// Per-logit NCLD weights `HW×C`, every entry within its bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaMatrix {
    beta: Tensor,
    bounds: BetaBounds,
}

impl BetaMatrix {
    pub fn new(beta: Tensor, bounds: BetaBounds) -> Result<Self> {
        let m = Self { beta, bounds };
        m.validate()?;
        Ok(m)
    }

    /// Skips the bounds check, so that consumers can be tested on invalid input.
    pub fn from_parts_unchecked(beta: Tensor, bounds: BetaBounds) -> Self {
        Self { beta, bounds }
    }

    pub fn validate(&self) -> Result<()> {
        self.beta.dims2()?;
        if let Some(v) = self.beta.data().iter().find(|&&v| !self.bounds.contains(v)) {
            return Err(invalid(format!(
                "beta {v} outside [{}, {}]",
                self.bounds.min, self.bounds.max
            )));
        }
        Ok(())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.beta
    }

    pub fn bounds(&self) -> BetaBounds {
        self.bounds
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwcInit {
    #[default]
    Xavier,
    /// All weights and biases zero: the controller outputs the bound midpoint.
    Zero,
}

/// Weights stored `in×out` so that a layer is `X·W + b` on row-major pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DwcParams {
    pub layers: [(Tensor, Tensor); 3],
}

impl DwcParams {
    pub fn new(input: usize, hidden: usize, classes: usize, init: DwcInit, rng: &mut Rng) -> Result<Self> {
        if input == 0 || hidden == 0 || classes == 0 {
            return Err(invalid("controller extents must be positive"));
        }
        let dims = [(input, hidden), (hidden, hidden), (hidden, classes)];
        let layers = dims.map(|(i, o)| {
            let w = match init {
                DwcInit::Xavier => {
                    let a = (6.0 / (i + o) as f64).sqrt();
                    rng.uniform_tensor(&[i, o], -a, a)
                }
                DwcInit::Zero => Tensor::zeros(&[i, o]),
            };
            (w, Tensor::zeros(&[o]))
        });
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].0.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.layers[2].0.dim(1)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            ck.insert(format!("dwc.layer{l}.w"), w.clone());
            ck.insert(format!("dwc.layer{l}.b"), b.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |l: usize, p: &str| ck.require(&format!("dwc.layer{l}.{p}")).cloned();
        let layers = [
            (get(0, "w")?, get(0, "b")?),
            (get(1, "w")?, get(1, "b")?),
            (get(2, "w")?, get(2, "b")?),
        ];
        for (l, (w, b)) in layers.iter().enumerate() {
            let (_, o) = w.dims2()?;
            if b.shape() != [o] {
                return Err(invalid(format!("dwc layer {l}: bias shape {:?}", b.shape())));
            }
        }
        for l in 1..3 {
            if layers[l].0.dim(0) != layers[l - 1].0.dim(1) {
                return Err(invalid(format!("dwc layer {l}: input extent mismatch")));
            }
        }
        Ok(Self { layers })
    }
}

/// `β = β_min + (β_max − β_min)·σ(MLP(Ω))`.
pub fn beta_matrix(omega: &OmegaMatrix, params: &DwcParams, bounds: BetaBounds) -> Result<BetaMatrix> {
    if omega.width() != params.input_width() {
        return Err(shape_mismatch("beta_matrix", omega.0.shape(), params.layers[0].0.shape()));
    }
    let mut h = omega.0.clone();
    for (l, (w, b)) in params.layers.iter().enumerate() {
        h = h.matmul(w)?;
        let o = b.numel();
        for (j, v) in h.data_mut().iter_mut().enumerate() {
            *v += b.data()[j % o];
            if l < 2 {
                *v = v.max(0.0);
            }
        }
    }
    let span = bounds.max - bounds.min;
    let beta = h.map(|v| (bounds.min + span * sigmoid(v)).clamp(bounds.min, bounds.max));
    BetaMatrix::new(beta, bounds)
}

/// Controller parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DwcVars {
    pub layers: [(Var, Var); 3],
}

impl DwcVars {
    /// Registers parameters as leaves (trainable) or constants (frozen).
    pub fn register(tape: &mut Tape, params: &DwcParams, trainable: bool) -> Self {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let l = &params.layers;
        Self {
            layers: [
                (reg(&l[0].0), reg(&l[0].1)),
                (reg(&l[1].0), reg(&l[1].1)),
                (reg(&l[2].0), reg(&l[2].1)),
            ],
        }
    }

    pub fn all(&self) -> [Var; 6] {
        let l = &self.layers;
        [l[0].0, l[0].1, l[1].0, l[1].1, l[2].0, l[2].1]
    }
}

/// Tape version of [`beta_matrix`]. With `dropout = Some((rate, rng))`,
/// inverted dropout is applied to both hidden activations.
pub fn beta_on_tape(
    tape: &mut Tape,
    omega: Var,
    vars: &DwcVars,
    bounds: BetaBounds,
    mut dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let mut h = omega;
    for (l, &(w, b)) in vars.layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row_bias(z, b)?;
        if l < 2 {
            h = tape.relu(h);
            if let Some((rate, rng)) = dropout.as_mut() {
                if *rate > 0.0 {
                    let keep = 1.0 - *rate;
                    let shape = tape.value(h).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let mask = (0..n).map(|_| if rng.unit() < keep { 1.0 / keep } else { 0.0 }).collect();
                    let m = tape.constant(Tensor::new(&shape, mask)?);
                    h = tape.mul(h, m)?;
                }
            }
        }
    }
    let s = tape.sigmoid(h);
    let scaled = tape.scale(s, bounds.max - bounds.min);
    Ok(tape.add_scalar(scaled, bounds.min))
}

/// Builds `Ω` on the tape from `HW×C` probabilities, with or without the
/// entropy column.
pub fn omega_on_tape(tape: &mut Tape, probs: Var, with_confidence: bool) -> Result<Var> {
    if with_confidence {
        let c = tape.row_entropy(probs)?;
        tape.concat_cols(probs, c)
    } else {
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn probs(rows: &[Vec<f64>]) -> ProbabilityMatrix {
        ProbabilityMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn confidence_examples() {
        let c = confidence(&probs(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.25; 4],
        ]));
        assert_eq!(c.tensor().data()[0], 0.0);
        assert!((c.tensor().data()[1] - 4f64.ln()).abs() < 1e-12);
        let c = confidence(&probs(&[vec![0.5, 0.25, 0.25]]));
        assert!((c.tensor().data()[0] - 1.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn omega_shape_and_values() {
        let p = probs(&[vec![0.5, 0.5]]);
        let o = build_omega(&p, &confidence(&p)).unwrap();
        assert_eq!(o.tensor().shape(), &[1, 3]);
        assert!((o.tensor().data()[2] - 2f64.ln()).abs() < 1e-15);
        let short = ConfidenceVector(Tensor::zeros(&[2]));
        assert!(build_omega(&p, &short).is_err());
        assert_eq!(omega_probs_only(&p).width(), 2);
    }

    #[test]
    fn zero_controller_gives_midpoint() {
        let p = probs(&[vec![0.2, 0.3, 0.5], vec![0.9, 0.05, 0.05]]);
        let o = build_omega(&p, &confidence(&p)).unwrap();
        let params = DwcParams::new(4, 16, 3, DwcInit::Zero, &mut Rng::new(0, 0)).unwrap();
        let b = beta_matrix(&o, &params, BetaBounds::default()).unwrap();
        assert!(b.tensor().data().iter().all(|&v| v == 5.5));
    }

    #[test]
    fn saturation_reaches_bounds() {
        let p = probs(&[vec![0.5, 0.5]]);
        let o = omega_probs_only(&p);
        let mut params = DwcParams::new(2, 4, 2, DwcInit::Zero, &mut Rng::new(0, 0)).unwrap();
        params.layers[2].1 = Tensor::new(&[2], vec![1e3, -1e3]).unwrap();
        let b = beta_matrix(&o, &params, BetaBounds::default()).unwrap();
        assert!((b.tensor().data()[0] - 10.0).abs() < 1e-12);
        assert!((b.tensor().data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extent_mismatch_rejected() {
        let p = probs(&[vec![0.5, 0.5]]);
        let params = DwcParams::new(5, 4, 2, DwcInit::Xavier, &mut Rng::new(0, 0)).unwrap();
        assert!(beta_matrix(&omega_probs_only(&p), &params, BetaBounds::default()).is_err());
        assert!(BetaBounds::new(5.0, 5.0).is_err());
        assert!(BetaBounds::new(-1.0, 5.0).is_err());
    }

    #[test]
    fn tape_matches_pure_and_checkpoint_round_trips() {
        let mut rng = Rng::new(3, 0);
        let p = rng.uniform_tensor(&[10, 4], -2.0, 2.0).softmax_rows(1.0).unwrap();
        let pm = ProbabilityMatrix::new(p.clone()).unwrap();
        let o = build_omega(&pm, &confidence(&pm)).unwrap();
        let params = DwcParams::new(5, 16, 4, DwcInit::Xavier, &mut rng).unwrap();
        let pure = beta_matrix(&o, &params, BetaBounds::default()).unwrap();
        let mut tape = Tape::new();
        let pv = tape.constant(p);
        let ov = omega_on_tape(&mut tape, pv, true).unwrap();
        let vars = DwcVars::register(&mut tape, &params, true);
        let b = beta_on_tape(&mut tape, ov, &vars, BetaBounds::default(), None).unwrap();
        assert!(tape.value(b).sub(pure.tensor()).unwrap().max_abs() < 1e-12);
        let back = DwcParams::from_checkpoint(&params.to_checkpoint()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = Rng::new(9, 0);
        let p = rng.uniform_tensor(&[6, 3], -2.0, 2.0).softmax_rows(1.0).unwrap();
        let params = DwcParams::new(4, 5, 3, DwcInit::Xavier, &mut rng).unwrap();
        for layer in 0..3 {
            for which in 0..2 {
                let base = if which == 0 {
                    params.layers[layer].0.clone()
                } else {
                    rng.uniform_tensor(params.layers[layer].1.shape(), -0.5, 0.5)
                };
                let err = finite_diff_check(
                    |t, x| {
                        let pv = t.constant(p.clone());
                        let ov = omega_on_tape(t, pv, true)?;
                        let mut vars = DwcVars::register(t, &params, false);
                        if which == 0 {
                            vars.layers[layer].0 = x;
                        } else {
                            vars.layers[layer].1 = x;
                        }
                        let b = beta_on_tape(t, ov, &vars, BetaBounds::default(), None)?;
                        Ok(t.sum(b))
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "layer {layer} param {which}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn beta_stays_bounded(seed in any::<u64>(), spread in 0.1f64..50.0) {
            let mut rng = Rng::new(seed, 0);
            let p = rng.uniform_tensor(&[40, 5], -spread, spread).softmax_rows(1.0).unwrap();
            let pm = ProbabilityMatrix::new(p).unwrap();
            let o = build_omega(&pm, &confidence(&pm)).unwrap();
            let params = DwcParams::new(6, 16, 5, DwcInit::Xavier, &mut rng).unwrap();
            let b = beta_matrix(&o, &params, BetaBounds::default()).unwrap();
            prop_assert!(b.tensor().data().iter().all(|&v| (1.0..=10.0).contains(&v)));
        }

        #[test]
        fn entropy_within_bounds(seed in any::<u64>(), c in 2usize..10) {
            let mut rng = Rng::new(seed, 0);
            let p = rng.uniform_tensor(&[8, c], -5.0, 5.0).softmax_rows(1.0).unwrap();
            let conf = confidence(&ProbabilityMatrix::new(p).unwrap());
            let lim = (c as f64).ln() + 1e-12;
            prop_assert!(conf.tensor().data().iter().all(|&v| (0.0..=lim).contains(&v)));
        }
    }
}
