//! Forward and backward kernels over raw `C×H×W` buffers.
//!
//! These are shared by the recording [`Tape`](crate::autodiff::Tape) and the
//! eager inference path, so both produce bit-identical values. Every output
//! element is accumulated in a fixed order regardless of thread count.

use crate::tensor::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `out`.
pub(crate) fn for_each_chunk<F>(out: &mut [Scalar], chunk: usize, f: F)
where
    F: Fn(usize, &mut [Scalar]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk`] over two buffers split into the same number of pieces.
pub(crate) fn for_each_chunk2<F>(
    a: &mut [Scalar],
    chunk_a: usize,
    b: &mut [Scalar],
    chunk_b: usize,
    f: F,
) where
    F: Fn(usize, &mut [Scalar], &mut [Scalar]) + Send + Sync,
{
    if chunk_a == 0 || chunk_b == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(chunk_a)
        .zip(b.par_chunks_mut(chunk_b))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(chunk_a)
        .zip(b.chunks_mut(chunk_b))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Geometry of a per-channel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn is_valid(&self) -> bool {
        self.stride > 0
            && self.kernel > 0
            && self.height + 2 * self.padding >= self.kernel
            && self.width + 2 * self.padding >= self.kernel
    }

    /// Input coordinate hit by output `o` at kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Depthwise convolution: channel `c` of the output only sees channel `c` of
/// the input. `kernel` is `C×1×K×K`, `bias` is `C`.
pub fn depthwise_forward(
    x: &[Scalar],
    kernel: &[Scalar],
    bias: Option<&[Scalar]>,
    g: ConvGeometry,
) -> Vec<Scalar> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let kk = g.kernel * g.kernel;
    let mut out = vec![0.0; g.channels * oh * ow];
    for_each_chunk(&mut out, oh * ow, |c, out_c| {
        let xc = &x[c * plane..(c + 1) * plane];
        let wc = &kernel[c * kk..(c + 1) * kk];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.width) else {
                            continue;
                        };
                        acc += wc[ky * g.kernel + kx] * xc[iy * g.width + ix];
                    }
                }
                if let Some(b) = bias {
                    acc += b[c];
                }
                out_c[oy * ow + ox] = acc;
            }
        }
    });
    out
}

/// Gradients of [`depthwise_forward`] with respect to input, kernel and bias.
pub fn depthwise_backward(
    x: &[Scalar],
    kernel: &[Scalar],
    grad_out: &[Scalar],
    g: ConvGeometry,
) -> (Vec<Scalar>, Vec<Scalar>, Vec<Scalar>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let kk = g.kernel * g.kernel;
    let mut grad_x = vec![0.0; x.len()];
    let mut grad_k = vec![0.0; kernel.len()];
    for_each_chunk2(&mut grad_x, plane, &mut grad_k, kk, |c, gx, gk| {
        let xc = &x[c * plane..(c + 1) * plane];
        let wc = &kernel[c * kk..(c + 1) * kk];
        let go = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = go[oy * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.width) else {
                            continue;
                        };
                        let at = iy * g.width + ix;
                        gx[at] += wc[ky * g.kernel + kx] * gv;
                        gk[ky * g.kernel + kx] += xc[at] * gv;
                    }
                }
            }
        }
    });
    let grad_b = grad_out.chunks(oh * ow).map(|p| p.iter().sum()).collect();
    (grad_x, grad_k, grad_b)
}

/// 1×1 convolution: `out[o] = Σ_c kernel[o,c]·y[c] + bias[o]`, summed in
/// ascending `c` with the bias added last.
pub fn pointwise_forward(
    y: &[Scalar],
    kernel: &[Scalar],
    bias: Option<&[Scalar]>,
    c_in: usize,
    c_out: usize,
    plane: usize,
) -> Vec<Scalar> {
    let mut out = vec![0.0; c_out * plane];
    for_each_chunk(&mut out, plane, |o, out_o| {
        let row = &kernel[o * c_in..(o + 1) * c_in];
        for (c, &k) in row.iter().enumerate() {
            let yc = &y[c * plane..(c + 1) * plane];
            for (dst, &v) in out_o.iter_mut().zip(yc) {
                *dst += k * v;
            }
        }
        if let Some(b) = bias {
            let bo = b[o];
            out_o.iter_mut().for_each(|v| *v += bo);
        }
    });
    out
}

/// Gradients of [`pointwise_forward`] with respect to input, kernel and bias.
pub fn pointwise_backward(
    y: &[Scalar],
    kernel: &[Scalar],
    grad_out: &[Scalar],
    c_in: usize,
    c_out: usize,
    plane: usize,
) -> (Vec<Scalar>, Vec<Scalar>, Vec<Scalar>) {
    let mut grad_y = vec![0.0; c_in * plane];
    for_each_chunk(&mut grad_y, plane, |c, gy| {
        for o in 0..c_out {
            let k = kernel[o * c_in + c];
            let go = &grad_out[o * plane..(o + 1) * plane];
            for (dst, &v) in gy.iter_mut().zip(go) {
                *dst += k * v;
            }
        }
    });
    let mut grad_k = vec![0.0; c_out * c_in];
    for_each_chunk(&mut grad_k, c_in, |o, gk| {
        let go = &grad_out[o * plane..(o + 1) * plane];
        for (c, dst) in gk.iter_mut().enumerate() {
            let yc = &y[c * plane..(c + 1) * plane];
            *dst = go.iter().zip(yc).map(|(a, b)| a * b).sum();
        }
    });
    let grad_b = grad_out.chunks(plane).map(|p| p.iter().sum()).collect();
    (grad_y, grad_k, grad_b)
}

/// One axis of a bilinear resampling table: for every destination index the
/// two source taps and the weight of the second one.
#[derive(Clone, Debug)]
pub struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<Scalar>,
}

impl LerpAxis {
    /// Half-pixel-centred mapping (corners not aligned), clamped at the borders.
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as Scalar / dst as Scalar;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for d in 0..dst {
            let pos = ((d as Scalar + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { pos - i0 as Scalar });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of every channel from `h×w` to `oh×ow`.
///
/// Uses the lerp form `a + t·(b − a)` so constant inputs stay exactly constant.
pub fn resize_forward(
    x: &[Scalar],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<Scalar> {
    let ys = LerpAxis::new(h, oh);
    let xs = LerpAxis::new(w, ow);
    let mut out = vec![0.0; channels * oh * ow];
    for_each_chunk(&mut out, oh * ow, |c, out_c| {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            let r0 = &xc[ys.lo[oy] * w..(ys.lo[oy] + 1) * w];
            let r1 = &xc[ys.hi[oy] * w..(ys.hi[oy] + 1) * w];
            let ty = ys.frac[oy];
            for ox in 0..ow {
                let (i0, i1, tx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                let top = r0[i0] + tx * (r0[i1] - r0[i0]);
                let bot = r1[i0] + tx * (r1[i1] - r1[i0]);
                out_c[oy * ow + ox] = top + ty * (bot - top);
            }
        }
    });
    out
}

pub fn resize_backward(
    grad_out: &[Scalar],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<Scalar> {
    let ys = LerpAxis::new(h, oh);
    let xs = LerpAxis::new(w, ow);
    let mut grad_x = vec![0.0; channels * h * w];
    for_each_chunk(&mut grad_x, h * w, |c, gx| {
        let go = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let ty = ys.frac[oy];
            let (y0, y1) = (ys.lo[oy], ys.hi[oy]);
            for ox in 0..ow {
                let g = go[oy * ow + ox];
                let (x0, x1, tx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                let g_top = g * (1.0 - ty);
                let g_bot = g * ty;
                gx[y0 * w + x0] += g_top * (1.0 - tx);
                gx[y0 * w + x1] += g_top * tx;
                gx[y1 * w + x0] += g_bot * (1.0 - tx);
                gx[y1 * w + x1] += g_bot * tx;
            }
        }
    });
    grad_x
}

/// Non-overlapping `k×k` average pooling; trailing partial windows are dropped.
/// Recursive pairwise sum: error grows with `log n`, and power-of-two runs of
/// one value sum exactly.
pub fn pairwise_sum(v: &[Scalar]) -> Scalar {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

pub fn avg_pool_forward(x: &[Scalar], channels: usize, (h, w): (usize, usize), k: usize) -> Vec<Scalar> {
    let (oh, ow) = (h / k, w / k);
    let norm = (k * k) as Scalar;
    let mut out = vec![0.0; channels * oh * ow];
    for_each_chunk(&mut out, oh * ow, |c, out_c| {
        let xc = &x[c * h * w..(c + 1) * h * w];
        let mut window = Vec::with_capacity(k * k);
        for oy in 0..oh {
            for ox in 0..ow {
                window.clear();
                for dy in 0..k {
                    window.extend_from_slice(&xc[(oy * k + dy) * w + ox * k..][..k]);
                }
                out_c[oy * ow + ox] = pairwise_sum(&window) / norm;
            }
        }
    });
    out
}

pub fn avg_pool_backward(grad_out: &[Scalar], channels: usize, (h, w): (usize, usize), k: usize) -> Vec<Scalar> {
    let (oh, ow) = (h / k, w / k);
    let norm = (k * k) as Scalar;
    let mut grad_x = vec![0.0; channels * h * w];
    for_each_chunk(&mut grad_x, h * w, |c, gx| {
        let go = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[oy * ow + ox] / norm;
                for dy in 0..k {
                    gx[(oy * k + dy) * w + ox * k..][..k]
                        .iter_mut()
                        .for_each(|v| *v += g);
                }
            }
        }
    });
    grad_x
}

/// Valid (unpadded) correlation of every channel with one fixed `k×k` stencil.
pub fn stencil_forward(
    x: &[Scalar],
    channels: usize,
    (h, w): (usize, usize),
    stencil: &[Scalar],
    k: usize,
) -> Vec<Scalar> {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut out = vec![0.0; channels * oh * ow];
    for_each_chunk(&mut out, oh * ow, |c, out_c| {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for u in 0..k {
                    for v in 0..k {
                        let s = stencil[u * k + v];
                        if s != 0.0 {
                            acc += s * xc[(oy + u) * w + ox + v];
                        }
                    }
                }
                out_c[oy * ow + ox] = acc;
            }
        }
    });
    out
}

pub fn stencil_backward(
    grad_out: &[Scalar],
    channels: usize,
    (h, w): (usize, usize),
    stencil: &[Scalar],
    k: usize,
) -> Vec<Scalar> {
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut grad_x = vec![0.0; channels * h * w];
    for_each_chunk(&mut grad_x, h * w, |c, gx| {
        let go = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[oy * ow + ox];
                for u in 0..k {
                    for v in 0..k {
                        gx[(oy + u) * w + ox + v] += stencil[u * k + v] * g;
                    }
                }
            }
        }
    });
    grad_x
}
