//! Slice-level kernels shared by the forward ops and their backward rules.

use crate::scalar::Scalar;

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 || stride == 0 {
            return None;
        }
        let (batch, in_ch, height, width) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (out_ch, w_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if w_in != in_ch || kh != kw || kh == 0 {
            return None;
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return None;
        }
        Some(Self {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: kh,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output columns whose input column `ox*stride + k - pad` is in bounds.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        valid_range(self.out_w, self.width, self.stride, self.pad, k)
    }

    fn valid_rows(&self, k: usize) -> (usize, usize) {
        valid_range(self.out_h, self.height, self.stride, self.pad, k)
    }
}

fn valid_range(out: usize, input: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // largest o with o*stride + k - pad < input  => o*stride < input + pad - k
    let hi = match (input + pad).checked_sub(k) {
        Some(limit) => limit.div_ceil(stride).min(out),
        None => 0,
    };
    (lo.min(hi), hi)
}

/// Lays out receptive fields as a `[C*k*k, N*Ho*Wo]` matrix.
fn im2col<S: Scalar>(g: &ConvGeom, x: &[S]) -> Vec<S> {
    let l = g.out_len();
    let cols_w = g.batch * l;
    let mut cols = vec![S::zero(); g.patch_len() * cols_w];
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..k {
            let (oy_lo, oy_hi) = g.valid_rows(ki);
            for kj in 0..k {
                let (ox_lo, ox_hi) = g.valid_cols(kj);
                let row = (c * k + ki) * k + kj;
                let row_base = row * cols_w;
                for n in 0..g.batch {
                    let x_base = (n * g.in_ch + c) * g.height * g.width;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let dst = row_base + n * l + oy * g.out_w;
                        let src = x_base + iy * g.width;
                        if g.stride == 1 {
                            let ix0 = ox_lo + kj - g.pad;
                            let len = ox_hi - ox_lo;
                            cols[dst + ox_lo..dst + ox_hi]
                                .copy_from_slice(&x[src + ix0..src + ix0 + len]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                cols[dst + ox] = x[src + ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `[C*k*k, N*Ho*Wo]` matrix back onto the input layout.
fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let l = g.out_len();
    let cols_w = g.batch * l;
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..k {
            let (oy_lo, oy_hi) = g.valid_rows(ki);
            for kj in 0..k {
                let (ox_lo, ox_hi) = g.valid_cols(kj);
                let row_base = ((c * k + ki) * k + kj) * cols_w;
                for n in 0..g.batch {
                    let x_base = (n * g.in_ch + c) * g.height * g.width;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let src = row_base + n * l + oy * g.out_w;
                        let dst = x_base + iy * g.width;
                        for ox in ox_lo..ox_hi {
                            dx[dst + ox * g.stride + kj - g.pad] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: Option<&[S]>) -> Vec<S> {
    let l = g.out_len();
    let nl = g.batch * l;
    let ckk = g.patch_len();
    let cols = im2col(g, x);
    let mut tmp = vec![S::zero(); g.out_ch * nl];
    S::gemm(
        g.out_ch,
        ckk,
        nl,
        w,
        (ckk as isize, 1),
        &cols,
        (nl as isize, 1),
        S::zero(),
        &mut tmp,
    );
    let mut out = if g.batch == 1 {
        tmp
    } else {
        let mut out = vec![S::zero(); g.batch * g.out_ch * l];
        for o in 0..g.out_ch {
            for n in 0..g.batch {
                let src = o * nl + n * l;
                let dst = (n * g.out_ch + o) * l;
                out[dst..dst + l].copy_from_slice(&tmp[src..src + l]);
            }
        }
        out
    };
    if let Some(b) = b {
        for n in 0..g.batch {
            for (o, &bo) in b.iter().enumerate() {
                let base = (n * g.out_ch + o) * l;
                out[base..base + l].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    out
}

pub struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Option<Vec<S>>,
    pub db: Option<Vec<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    dout: &[S],
    need: (bool, bool, bool),
) -> ConvGrads<S> {
    let l = g.out_len();
    let nl = g.batch * l;
    let ckk = g.patch_len();
    let dout_t: std::borrow::Cow<[S]> = if g.batch == 1 {
        std::borrow::Cow::Borrowed(dout)
    } else {
        let mut t = vec![S::zero(); g.out_ch * nl];
        for o in 0..g.out_ch {
            for n in 0..g.batch {
                let src = (n * g.out_ch + o) * l;
                let dst = o * nl + n * l;
                t[dst..dst + l].copy_from_slice(&dout[src..src + l]);
            }
        }
        std::borrow::Cow::Owned(t)
    };
    let dw = need.1.then(|| {
        let cols = im2col(g, x);
        let mut dw = vec![S::zero(); g.out_ch * ckk];
        S::gemm(
            g.out_ch,
            nl,
            ckk,
            &dout_t,
            (nl as isize, 1),
            &cols,
            (1, nl as isize),
            S::zero(),
            &mut dw,
        );
        dw
    });
    let dx = need.0.then(|| {
        let mut dcols = vec![S::zero(); ckk * nl];
        S::gemm(
            ckk,
            g.out_ch,
            nl,
            w,
            (1, ckk as isize),
            &dout_t,
            (nl as isize, 1),
            S::zero(),
            &mut dcols,
        );
        let mut dx = vec![S::zero(); x.len()];
        col2im(g, &dcols, &mut dx);
        dx
    });
    let db = need.2.then(|| {
        (0..g.out_ch)
            .map(|o| dout_t[o * nl..(o + 1) * nl].iter().copied().sum())
            .collect()
    });
    ConvGrads { dx, dw, db }
}

/// Per-(sample, group) statistics saved by the group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupStats<S> {
    pub mean: Vec<S>,
    pub rstd: Vec<S>,
}

pub fn group_norm_forward<S: Scalar>(
    shape: &[usize],
    groups: usize,
    eps: S,
    x: &[S],
    gamma: &[S],
    beta: &[S],
) -> (Vec<S>, GroupStats<S>) {
    let (n, c) = (shape[0], shape[1]);
    let l: usize = shape[2..].iter().product();
    let cg = c / groups;
    let m = S::from_f64((cg * l) as f64);
    let mut out = vec![S::zero(); x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(n * groups),
        rstd: Vec::with_capacity(n * groups),
    };
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * l;
            let seg = &x[start..start + cg * l];
            let mean = seg.iter().copied().sum::<S>() / m;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / m;
            let rstd = S::one() / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let base = start + ci * l;
                for j in 0..l {
                    out[base + j] = (x[base + j] - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (out, stats)
}

pub fn group_norm_backward<S: Scalar>(
    shape: &[usize],
    groups: usize,
    stats: &GroupStats<S>,
    x: &[S],
    gamma: &[S],
    dout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (n, c) = (shape[0], shape[1]);
    let l: usize = shape[2..].iter().product();
    let cg = c / groups;
    let m = S::from_f64((cg * l) as f64);
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ni in 0..n {
        for gi in 0..groups {
            let idx = ni * groups + gi;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let start = (ni * c + gi * cg) * l;
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let base = start + ci * l;
                for j in 0..l {
                    let xhat = (x[base + j] - mean) * rstd;
                    let dy = dout[base + j];
                    dgamma[ch] += dy * xhat;
                    dbeta[ch] += dy;
                    let dxhat = dy * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let base = start + ci * l;
                for j in 0..l {
                    let xhat = (x[base + j] - mean) * rstd;
                    let dxhat = dout[base + j] * gamma[ch];
                    dx[base + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn upsample2x_forward<S: Scalar>(shape: &[usize], x: &[S]) -> Vec<S> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut out = vec![S::zero(); x.len() * 4];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<S: Scalar>(shape: &[usize], dout: &[S]) -> Vec<S> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    dx
}
