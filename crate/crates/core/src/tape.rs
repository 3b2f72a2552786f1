//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its variables. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of that scalar with respect to every variable that
//! was created with [`Tape::leaf`]. Variables created with
//! [`Tape::constant`] never receive gradients and the nodes that only depend
//! on constants skip their backward rules entirely.
//!
//! Losses with hand-derived backward rules plug in through
//! [`Tape::custom`].

use crate::error::{invalid, shape_mismatch, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::{gemm, Tensor};

/// Backward rule: `(upstream gradient, parent values, which parents need a
/// gradient) -> one optional gradient per parent`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `v` when the output does not
    /// depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a node with a caller-supplied value and backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let parents = inputs.iter().map(|v| v.0).collect();
        self.push(value, parents, Some(Box::new(backward)))
    }

    /// Gradients of the scalar `output` with respect to every leaf. Interior
    /// gradients are released as soon as they have been propagated.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let values: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = rule(&g, &values, &needs);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.custom(&[a, b], v, |g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.custom(&[a, b], v, |g, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.custom(&[a, b], v, |g, x, need| {
            vec![
                need[0].then(|| g.mul(x[1]).unwrap()),
                need[1].then(|| g.mul(x[0]).unwrap()),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.custom(&[a], v, move |g, _, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.custom(&[a], v, |g, _, _| vec![Some(g.clone())])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.custom(&[a], v, |g, x, _| vec![Some(Tensor::full(x[0].shape(), g.data()[0]))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.custom(&[a], v, move |g, x, _| {
            vec![Some(Tensor::full(x[0].shape(), g.data()[0] / n))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.custom(&[a], v, |g, x, _| {
            vec![Some(x[0].zip_map(g, |xi, gi| if xi > 0.0 { gi } else { 0.0 }).unwrap())]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let out = v.clone();
        self.custom(&[a], v, move |g, _, _| {
            vec![Some(out.zip_map(g, |s, gi| gi * s * (1.0 - s)).unwrap())]
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let out = v.clone();
        self.custom(&[a], v, move |g, _, _| vec![Some(out.mul(g).unwrap())])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.custom(&[a], v, |g, x, _| {
            vec![Some(g.clone().reshape(x[0].shape()).unwrap())]
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.custom(&[a, b], v, |g, x, need| {
            let (m, k) = x[0].dims2().unwrap();
            let n = x[1].dim(1);
            let ga = need[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, x[1].data(), true, &mut out, false);
                Tensor::new(&[m, k], out).unwrap()
            });
            let gb = need[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm(k, m, n, x[0].data(), true, g.data(), false, &mut out, false);
                Tensor::new(&[k, n], out).unwrap()
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.custom(&[a], v, |g, _, _| vec![Some(g.transpose().unwrap())]))
    }

    /// `x + 1·bᵀ` for `x: n×m`, `b: m`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(b).numel() != m {
            return Err(shape_mismatch("add_row_bias", self.value(x).shape(), self.value(b).shape()));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(m) {
            for (o, bi) in row.iter_mut().zip(&bias) {
                *o += bi;
            }
        }
        Ok(self.custom(&[x, b], v, move |g, x, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (a, gi) in acc.iter_mut().zip(row) {
                        *a += gi;
                    }
                }
                Tensor::new(x[1].shape(), acc).unwrap()
            });
            let _ = n;
            vec![need[0].then(|| g.clone()), gb]
        }))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.value(a).dims2()?;
        let (nb, cb) = self.value(b).dims2()?;
        if n != nb {
            return Err(shape_mismatch("concat_cols", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let v = Tensor::new(&[n, ca + cb], out)?;
        Ok(self.custom(&[a, b], v, move |g, _, _| {
            let mut ga = Vec::with_capacity(n * ca);
            let mut gb = Vec::with_capacity(n * cb);
            for row in g.data().chunks(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            vec![
                Some(Tensor::new(&[n, ca], ga).unwrap()),
                Some(Tensor::new(&[n, cb], gb).unwrap()),
            ]
        }))
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let v = self.value(x).softmax_rows(temperature)?;
        let p = v.clone();
        Ok(self.custom(&[x], v, move |g, _, _| {
            let c = p.dim(1);
            let mut out = vec![0.0; p.numel()];
            for ((o, pr), gr) in out.chunks_mut(c).zip(p.data().chunks(c)).zip(g.data().chunks(c)) {
                let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    o[j] = pr[j] * (gr[j] - dot) / temperature;
                }
            }
            vec![Some(Tensor::new(p.shape(), out).unwrap())]
        }))
    }

    /// Shannon entropy of each row of a stochastic matrix, as an `n×1`
    /// column. Logarithms are clamped at `1e-12`.
    pub fn row_entropy(&mut self, p: Var) -> Result<Var> {
        let (n, c) = self.value(p).dims2()?;
        let vals: Vec<f64> = (0..n)
            .map(|i| -self.value(p).row(i).iter().map(|&q| q * q.max(LOG_FLOOR).ln()).sum::<f64>())
            .collect();
        let v = Tensor::new(&[n, 1], vals)?;
        Ok(self.custom(&[p], v, move |g, x, _| {
            let out = Tensor::from_fn(&[n, c], |idx| {
                let q = x[0].data()[idx];
                -g.data()[idx / c] * (q.max(LOG_FLOOR).ln() + 1.0)
            });
            vec![Some(out)]
        }))
    }

    /// "Same" convolution with a square kernel: `x: cin×h×w`,
    /// `w: cout×cin×k×k`, `b: cout`, zero padding `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (&[cin, h, wd], &[cout, wcin, k, k2]) = (&xs[..], &ws[..]) else {
            return Err(shape_mismatch("conv2d", &xs, &ws));
        };
        if wcin != cin || k != k2 || self.value(b).numel() != cout || stride == 0 {
            return Err(shape_mismatch("conv2d", &xs, &ws));
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride);
        let (out, cols) = ops::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            cout,
            &geom,
        );
        let v = Tensor::new(&[cout, geom.ho, geom.wo], out)?;
        let needs_x = self.requires_grad(x);
        // The im2col buffer is only needed for the weight gradient.
        let cols = self.requires_grad(w).then_some(cols);
        Ok(self.custom(&[x, w, b], v, move |g, vals, need| {
            let n_out = geom.ho * geom.wo;
            let patch = geom.patch();
            let gx = (need[0] && needs_x).then(|| {
                let mut dcols = vec![0.0; patch * n_out];
                gemm(patch, cout, n_out, vals[1].data(), true, g.data(), false, &mut dcols, false);
                Tensor::new(&[cin, h, wd], ops::col2im(&dcols, &geom)).unwrap()
            });
            let gw = match (&cols, need[1]) {
                (Some(cols), true) => {
                    let mut dw = vec![0.0; cout * patch];
                    gemm(cout, n_out, patch, g.data(), false, cols, true, &mut dw, false);
                    Some(Tensor::new(vals[1].shape(), dw).unwrap())
                }
                _ => None,
            };
            let gb = need[2].then(|| {
                Tensor::new(
                    &[cout],
                    g.data().chunks(n_out).map(|c| c.iter().sum()).collect(),
                )
                .unwrap()
            });
            vec![gx, gw, gb]
        }))
    }

    /// Nearest-neighbour upsampling of a `c×h×w` tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let &[c, h, w] = self.value(x).shape() else {
            return Err(invalid("upsample_nearest expects c×h×w"));
        };
        if factor == 0 {
            return Err(invalid("upsample factor must be positive"));
        }
        let v = Tensor::new(
            &[c, h * factor, w * factor],
            ops::upsample_nearest(self.value(x).data(), c, h, w, factor),
        )?;
        Ok(self.custom(&[x], v, move |g, _, _| {
            vec![Some(
                Tensor::new(&[c, h, w], ops::upsample_nearest_backward(g.data(), c, h, w, factor))
                    .unwrap(),
            )]
        }))
    }

    /// Spatial resize of a `c×h×w` tensor: area averaging along an axis that
    /// shrinks, bilinear along an axis that grows.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let &[c, h, w] = self.value(x).shape() else {
            return Err(invalid("resize expects c×h×w"));
        };
        if out_h == 0 || out_w == 0 {
            return Err(invalid("resize target must be non-empty"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let ry = ops::resample_matrix(h, out_h);
        let rx = ops::resample_matrix(w, out_w);
        let out = ops::resample(self.value(x).data(), c, (h, w), (out_h, out_w), &ry, &rx);
        let v = Tensor::new(&[c, out_h, out_w], out)?;
        Ok(self.custom(&[x], v, move |g, _, _| {
            vec![Some(
                Tensor::new(
                    &[c, h, w],
                    ops::resample_backward(g.data(), c, (h, w), (out_h, out_w), &ry, &rx),
                )
                .unwrap(),
            )]
        }))
    }

    /// Per-channel standardization over the spatial axes followed by a
    /// learned per-channel affine map. `x: c×h×w`, `scale, shift: c`.
    pub fn channel_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let &[c, h, w] = self.value(x).shape() else {
            return Err(invalid("channel_norm expects c×h×w"));
        };
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(shape_mismatch("channel_norm", self.value(x).shape(), self.value(scale).shape()));
        }
        let n = h * w;
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let plane = &xd[ch * n..(ch + 1) * n];
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            inv_std[ch] = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(plane) {
                *o = (v - mean) * inv_std[ch];
            }
        }
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * sc[i / n] + sh[i / n])
            .collect();
        let v = Tensor::new(&[c, h, w], out)?;
        Ok(self.custom(&[x, scale, shift], v, move |g, vals, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let sc = vals[1].data();
                let mut dx = vec![0.0; c * n];
                for ch in 0..c {
                    let r = ch * n..(ch + 1) * n;
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for (gi, xh) in gd[r.clone()].iter().zip(&xhat[r.clone()]) {
                        let d = gi * sc[ch];
                        s1 += d;
                        s2 += d * xh;
                    }
                    for ((o, gi), xh) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xhat[r]) {
                        let d = gi * sc[ch];
                        *o = inv_std[ch] * (d - s1 / n as f64 - xh * s2 / n as f64);
                    }
                }
                Tensor::new(&[c, h, w], dx).unwrap()
            });
            let gscale = need[1].then(|| {
                Tensor::from_fn(&[c], |ch| {
                    (ch * n..(ch + 1) * n).map(|i| gd[i] * xhat[i]).sum()
                })
            });
            let gshift = need[2].then(|| Tensor::from_fn(&[c], |ch| gd[ch * n..(ch + 1) * n].iter().sum()));
            vec![gx, gscale, gshift]
        }))
    }
}

pub(crate) const LOG_FLOOR: f64 = 1e-12;
const NORM_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
