use alloc::vec::Vec;

use crate::scalar::Real;
use crate::tensor::{numel, Tensor};

pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[C, H, W]` image into a `[C·K·K, Ho·Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Real>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [S],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into `[C, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<S: Real>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [S],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn planes(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [N, C, H, W], got {shape:?}");
    (shape[0] * shape[1], shape[2], shape[3])
}

pub fn upsample_nearest2x<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let (p, h, w) = planes(x.shape());
    let mut shape = x.shape().to_vec();
    shape[2] *= 2;
    shape[3] *= 2;
    let mut out = Tensor::zeros(&shape);
    let (src, dst) = (x.data(), out.data_mut());
    for pi in 0..p {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(pi * 2 * h + y) * 2 * w + xx] = src[(pi * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<S: Real>(g: &Tensor<S>, x_shape: &[usize]) -> Tensor<S> {
    let (p, h, w) = planes(x_shape);
    let mut out = Tensor::zeros(x_shape);
    let (src, dst) = (g.data(), out.data_mut());
    for pi in 0..p {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(pi * h + y / 2) * w + xx / 2] += src[(pi * 2 * h + y) * 2 * w + xx];
            }
        }
    }
    out
}

pub fn avg_pool2x<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let (_, h, w) = planes(x.shape());
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x: odd extent");
    let (ho, wo) = (h / 2, w / 2);
    let mut shape = x.shape().to_vec();
    shape[2] = ho;
    shape[3] = wo;
    let quarter = S::lit(0.25);
    let src = x.data();
    Tensor::from_fn(&shape, |i| {
        let pi = i / (ho * wo);
        let (y, xx) = ((i / wo) % ho, i % wo);
        let base = pi * h * w + 2 * y * w + 2 * xx;
        quarter * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1])
    })
}

pub fn avg_pool2x_backward<S: Real>(g: &Tensor<S>, x_shape: &[usize]) -> Tensor<S> {
    let (_, h, w) = planes(x_shape);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = S::lit(0.25);
    let src = g.data();
    Tensor::from_fn(x_shape, |i| {
        let pi = i / (h * w);
        let (y, xx) = ((i / w) % h, i % w);
        quarter * src[pi * ho * wo + (y / 2) * wo + xx / 2]
    })
}

/// Interpolation taps along one axis: for every output coordinate, the two
/// source indices and the weight of the second.
#[derive(Clone, Debug)]
pub struct BilinearAxis {
    pub taps: Vec<(usize, usize, f64)>,
}

impl BilinearAxis {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect();
        Self { taps }
    }
}

pub fn bilinear_forward<S: Real>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let (p, h, w) = planes(x.shape());
    let ay = BilinearAxis::new(h, oh);
    let ax = BilinearAxis::new(w, ow);
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    let mut out = Tensor::zeros(&shape);
    let (src, dst) = (x.data(), out.data_mut());
    for pi in 0..p {
        let plane = &src[pi * h * w..(pi + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ay.taps.iter().enumerate() {
            let fy = S::lit(fy);
            for (ox, &(x0, x1, fx)) in ax.taps.iter().enumerate() {
                let fx = S::lit(fx);
                let top = plane[y0 * w + x0] * (S::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (S::one() - fx) + plane[y1 * w + x1] * fx;
                dst[(pi * oh + oy) * ow + ox] = top * (S::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<S: Real>(g: &Tensor<S>, x_shape: &[usize]) -> Tensor<S> {
    let (p, h, w) = planes(x_shape);
    let (oh, ow) = (g.dim(2), g.dim(3));
    let ay = BilinearAxis::new(h, oh);
    let ax = BilinearAxis::new(w, ow);
    let mut out = Tensor::zeros(x_shape);
    let (src, dst) = (g.data(), out.data_mut());
    for pi in 0..p {
        let plane = &mut dst[pi * h * w..(pi + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ay.taps.iter().enumerate() {
            let fy = S::lit(fy);
            for (ox, &(x0, x1, fx)) in ax.taps.iter().enumerate() {
                let fx = S::lit(fx);
                let gv = src[(pi * oh + oy) * ow + ox];
                let gt = gv * (S::one() - fy);
                let gb = gv * fy;
                plane[y0 * w + x0] += gt * (S::one() - fx);
                plane[y0 * w + x1] += gt * fx;
                plane[y1 * w + x0] += gb * (S::one() - fx);
                plane[y1 * w + x1] += gb * fx;
            }
        }
    }
    out
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "softmax: rank >= 2 required");
    (shape[0], shape[1], numel(&shape[2..]))
}

pub fn softmax1<S: Real>(x: &Tensor<S>, log: bool) -> Tensor<S> {
    let (n, c, inner) = channel_layout(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let (src, dst) = (x.data(), out.data_mut());
    for b in 0..n {
        let base = b * c * inner;
        for p in 0..inner {
            let at = |ch: usize| base + ch * inner + p;
            let m = (0..c).map(|ch| src[at(ch)]).fold(S::neg_infinity(), S::max);
            let z: S = (0..c).map(|ch| (src[at(ch)] - m).exp()).sum();
            let lz = z.ln();
            for ch in 0..c {
                let v = src[at(ch)] - m - lz;
                dst[at(ch)] = if log { v } else { v.exp() };
            }
        }
    }
    out
}

pub fn log_softmax1_backward<S: Real>(y: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let (n, c, inner) = channel_layout(y.shape());
    let mut out = Tensor::zeros(y.shape());
    let (yv, gv, dst) = (y.data(), g.data(), out.data_mut());
    for b in 0..n {
        let base = b * c * inner;
        for p in 0..inner {
            let at = |ch: usize| base + ch * inner + p;
            let gs: S = (0..c).map(|ch| gv[at(ch)]).sum();
            for ch in 0..c {
                dst[at(ch)] = gv[at(ch)] - yv[at(ch)].exp() * gs;
            }
        }
    }
    out
}

pub fn softmax1_backward<S: Real>(y: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let (n, c, inner) = channel_layout(y.shape());
    let mut out = Tensor::zeros(y.shape());
    let (yv, gv, dst) = (y.data(), g.data(), out.data_mut());
    for b in 0..n {
        let base = b * c * inner;
        for p in 0..inner {
            let at = |ch: usize| base + ch * inner + p;
            let dot: S = (0..c).map(|ch| gv[at(ch)] * yv[at(ch)]).sum();
            for ch in 0..c {
                dst[at(ch)] = yv[at(ch)] * (gv[at(ch)] - dot);
            }
        }
    }
    out
}
