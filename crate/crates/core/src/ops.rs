//! Raw kernels behind the spatial tape primitives: im2col convolution,
//! nearest upsampling and separable resampling.

use crate::tensor::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n_out = g.ho * g.wo;
    let mut cols = vec![0.0; g.patch() * n_out];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n_out = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. Returns the output and the im2col buffer used.
pub(crate) fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cout: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let n_out = g.ho * g.wo;
    let mut out = vec![0.0; cout * n_out];
    for (o, chunk) in out.chunks_mut(n_out).enumerate() {
        chunk.fill(b[o]);
    }
    gemm(cout, g.patch(), n_out, w, false, &cols, false, &mut out, true);
    (out, cols)
}

pub(crate) fn upsample_nearest(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            let src = &x[(ch * h + y / f) * w..(ch * h + y / f + 1) * w];
            let dst = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                out[(ch * h + y / f) * w + xo / f] += g[(ch * ho + y) * wo + xo];
            }
        }
    }
    out
}

/// One-axis resampling matrix of shape `n_out × n_in`: area averaging when
/// shrinking, bilinear (half-pixel centers) when growing, identity otherwise.
pub(crate) fn resample_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    if n_in == n_out {
        for i in 0..n_in {
            m[i * n_in + i] = 1.0;
        }
    } else if n_out < n_in {
        let scale = n_in as f64 / n_out as f64;
        for o in 0..n_out {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            for i in lo.floor() as usize..(hi.ceil() as usize).min(n_in) {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                m[o * n_in + i] = overlap / scale;
            }
        }
    } else {
        let scale = n_in as f64 / n_out as f64;
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            m[o * n_in + i0] += 1.0 - t;
            m[o * n_in + i1] += t;
        }
    }
    m
}

/// Applies `ry · X_c · rxᵀ` to every channel plane.
pub(crate) fn resample(
    x: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    ry: &[f64],
    rx: &[f64],
) -> Vec<f64> {
    let mut tmp = vec![0.0; ho * w];
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        gemm(ho, h, w, ry, false, &x[ch * h * w..(ch + 1) * h * w], false, &mut tmp, false);
        gemm(ho, w, wo, &tmp, false, rx, true, &mut out[ch * ho * wo..(ch + 1) * ho * wo], false);
    }
    out
}

/// Adjoint of [`resample`]: `ryᵀ · G_c · rx`.
pub(crate) fn resample_backward(
    g: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    ry: &[f64],
    rx: &[f64],
) -> Vec<f64> {
    let mut tmp = vec![0.0; h * wo];
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        gemm(h, ho, wo, ry, true, &g[ch * ho * wo..(ch + 1) * ho * wo], false, &mut tmp, false);
        gemm(h, wo, w, &tmp, false, rx, false, &mut out[ch * h * w..(ch + 1) * h * w], false);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_rows_sum_to_one() {
        for (n_in, n_out) in [(8, 4), (7, 3), (5, 5), (3, 7)] {
            let m = resample_matrix(n_in, n_out);
            for o in 0..n_out {
                let s: f64 = m[o * n_in..(o + 1) * n_in].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{n_in}->{n_out}");
            }
        }
    }

    #[test]
    fn halving_averages_pairs() {
        let m = resample_matrix(4, 2);
        assert_eq!(m, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn direct_conv_matches_im2col() {
        let g = ConvGeom::new(2, 5, 6, 3, 2);
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..3 * 18).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = [0.1, -0.2, 0.3];
        let (out, _) = conv_forward(&x, &w, &b, 3, &g);
        for o in 0..3 {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut s = b[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    s += w[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x[(c * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((s - out[(o * g.ho + oy) * g.wo + ox]).abs() < 1e-12);
                }
            }
        }
    }
}
