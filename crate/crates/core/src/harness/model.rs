//! Toy encoder-decoder segmentation networks.
//!
//! Both networks share a three-stage encoder (16/32/64 channels, each stage
//! a stride-2 3×3 convolution with ReLU) and a decoder that upsamples by
//! nearest neighbour, adds the encoder skip, and convolves. The teacher runs
//! a second encoder on the depth input and adds its output to the RGB stream
//! after every stage. Stage 2 and stage 3 outputs are exposed as feature taps.

use std::collections::HashMap;

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::logit::LogitField;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
/// Channels of the two feature taps.
pub const TAP_CHANNELS: [usize; 2] = [32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Teacher,
    Student,
}

struct Conv {
    name: &'static str,
    cin: usize,
    cout: usize,
    k: usize,
}

fn layers(kind: NetKind, classes: usize) -> Vec<Conv> {
    let [c1, c2, c3] = STAGE_CHANNELS;
    let mut v = vec![
        Conv { name: "enc1", cin: 3, cout: c1, k: 3 },
        Conv { name: "enc2", cin: c1, cout: c2, k: 3 },
        Conv { name: "enc3", cin: c2, cout: c3, k: 3 },
        Conv { name: "dec3", cin: c3, cout: c2, k: 3 },
        Conv { name: "dec2", cin: c2, cout: c1, k: 3 },
        Conv { name: "dec1", cin: c1, cout: c1, k: 3 },
        Conv { name: "head", cin: c1, cout: classes, k: 1 },
    ];
    if kind == NetKind::Teacher {
        v.extend([
            Conv { name: "depth.enc1", cin: 1, cout: c1, k: 3 },
            Conv { name: "depth.enc2", cin: c1, cout: c2, k: 3 },
            Conv { name: "depth.enc3", cin: c2, cout: c3, k: 3 },
        ]);
    }
    v
}

/// Variables of a bound parameter set, by name.
pub type Bound = HashMap<String, Var>;

/// Registers every tensor of `params` on the tape under its name.
pub fn bind(tape: &mut Tape, params: &Checkpoint, trainable: bool) -> Bound {
    params
        .iter()
        .map(|(n, t)| {
            let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            (n.to_string(), v)
        })
        .collect()
}

fn var(bound: &Bound, name: &str) -> Result<Var> {
    bound.get(name).copied().ok_or_else(|| invalid(format!("parameter {name} not bound")))
}

pub struct Forward {
    /// `C×H×W`.
    pub logits: Var,
    pub taps: [Var; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    kind: NetKind,
    classes: usize,
    params: Checkpoint,
}

impl Network {
    pub fn new(kind: NetKind, classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(invalid("a segmentation network needs at least two classes"));
        }
        let mut params = Checkpoint::new();
        for l in layers(kind, classes) {
            let a = (6.0 / (l.cin * l.k * l.k) as f64).sqrt();
            params.insert(format!("{}.w", l.name), rng.uniform_tensor(&[l.cout, l.cin, l.k, l.k], -a, a));
            params.insert(format!("{}.b", l.name), Tensor::zeros(&[l.cout]));
        }
        Ok(Self { kind, classes, params })
    }

    /// Reads the network tensors of a checkpoint, ignoring controller and
    /// aligner entries.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let head = ck.require("head.w")?;
        let classes = head.dim(0);
        let kind = if ck.get("depth.enc1.w").is_some() { NetKind::Teacher } else { NetKind::Student };
        let mut params = Checkpoint::new();
        for l in layers(kind, classes) {
            for (suffix, shape) in [("w", vec![l.cout, l.cin, l.k, l.k]), ("b", vec![l.cout])] {
                let name = format!("{}.{suffix}", l.name);
                let t = ck.require(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(invalid(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
                }
                params.insert(name, t.clone());
            }
        }
        Ok(Self { kind, classes, params })
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &Checkpoint {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Checkpoint {
        &mut self.params
    }

    fn conv(tape: &mut Tape, b: &Bound, name: &str, x: Var, stride: usize, relu: bool) -> Result<Var> {
        let w = var(b, &format!("{name}.w"))?;
        let bias = var(b, &format!("{name}.b"))?;
        let y = tape.conv2d(x, w, bias, stride)?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    /// `rgb: 3×H×W`; `depth: 1×H×W` normalized inverse depth (teacher only).
    /// `H` and `W` must be divisible by 8.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, rgb: Var, depth: Option<Var>) -> Result<Forward> {
        let &[_, h, w] = tape.value(rgb).shape() else {
            return Err(invalid("rgb input must be 3×H×W"));
        };
        if h % 8 != 0 || w % 8 != 0 {
            return Err(invalid(format!("input {h}×{w} is not divisible by 8")));
        }
        let r1 = Self::conv(tape, b, "enc1", rgb, 2, true)?;
        let (e1, e2, e3) = match (self.kind, depth) {
            (NetKind::Student, _) => {
                let e2 = Self::conv(tape, b, "enc2", r1, 2, true)?;
                let e3 = Self::conv(tape, b, "enc3", e2, 2, true)?;
                (r1, e2, e3)
            }
            (NetKind::Teacher, Some(d)) => {
                let d1 = Self::conv(tape, b, "depth.enc1", d, 2, true)?;
                let f1 = tape.add(r1, d1)?;
                let r2 = Self::conv(tape, b, "enc2", f1, 2, true)?;
                let d2 = Self::conv(tape, b, "depth.enc2", d1, 2, true)?;
                let f2 = tape.add(r2, d2)?;
                let r3 = Self::conv(tape, b, "enc3", f2, 2, true)?;
                let d3 = Self::conv(tape, b, "depth.enc3", d2, 2, true)?;
                let f3 = tape.add(r3, d3)?;
                (f1, f2, f3)
            }
            (NetKind::Teacher, None) => return Err(invalid("the teacher needs a depth input")),
        };
        let x3 = Self::conv(tape, b, "dec3", e3, 1, true)?;
        let u2 = tape.upsample_nearest(x3, 2)?;
        let s2 = tape.add(u2, e2)?;
        let x2 = Self::conv(tape, b, "dec2", s2, 1, true)?;
        let u1 = tape.upsample_nearest(x2, 2)?;
        let s1 = tape.add(u1, e1)?;
        let x1 = Self::conv(tape, b, "dec1", s1, 1, true)?;
        let u0 = tape.upsample_nearest(x1, 2)?;
        let logits = Self::conv(tape, b, "head", u0, 1, false)?;
        Ok(Forward { logits, taps: [e2, e3] })
    }

    /// Inference without gradients: logits and both feature taps.
    pub fn predict(&self, rgb: &Tensor, depth: Option<&Tensor>) -> Result<(LogitField, [Tensor; 2])> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, &self.params, false);
        let x = tape.constant(rgb.clone());
        let d = depth.map(|d| tape.constant(d.clone()));
        let out = self.forward(&mut tape, &b, x, d)?;
        let logits = LogitField::new(tape.value(out.logits).clone())?;
        Ok((logits, [tape.value(out.taps[0]).clone(), tape.value(out.taps[1]).clone()]))
    }
}

/// Per-pixel argmax of `C×H×W` logits.
pub fn argmax_labels(logits: &LogitField) -> Vec<usize> {
    let rows = logits.pixel_rows();
    let c = logits.classes();
    rows.data()
        .chunks(c)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_taps() {
        let mut rng = Rng::new(1, 0);
        let rgb = rng.uniform_tensor(&[3, 32, 32], 0.0, 1.0);
        let depth = rng.uniform_tensor(&[1, 32, 32], 0.0, 1.0);
        let s = Network::new(NetKind::Student, 6, &mut rng).unwrap();
        let (z, taps) = s.predict(&rgb, None).unwrap();
        assert_eq!(z.tensor().shape(), &[6, 32, 32]);
        assert_eq!(taps[0].shape(), &[32, 8, 8]);
        assert_eq!(taps[1].shape(), &[64, 4, 4]);
        let t = Network::new(NetKind::Teacher, 6, &mut rng).unwrap();
        assert!(t.predict(&rgb, None).is_err());
        let (z, _) = t.predict(&rgb, Some(&depth)).unwrap();
        assert_eq!(z.tensor().shape(), &[6, 32, 32]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = Network::new(NetKind::Teacher, 5, &mut Rng::new(2, 0)).unwrap();
        let mut ck = t.params().clone();
        ck.insert("dwc.layer0.w", Tensor::zeros(&[2, 2]));
        assert_eq!(Network::from_checkpoint(&ck).unwrap(), t);
    }

    #[test]
    fn argmax_picks_largest() {
        let z = LogitField::new(Tensor::new(&[3, 1, 2], vec![0.0, 5.0, 2.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(argmax_labels(&z), vec![1, 0]);
    }
}
