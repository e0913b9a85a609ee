//! Per-sample forward/backward kernels. Every kernel processes one sample
//! at a time so a sample's result never depends on what else is in its batch.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[height, width]`
    pub kernel: [usize; 2],
    pub stride: usize,
    /// Symmetric zero padding `[rows, cols]`.
    pub padding: [usize; 2],
    /// One filter per input channel (`out_channels == in_channels`).
    pub depthwise: bool,
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Conv2dSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        window_output(h, self.kernel[0], self.stride, self.padding[0])
            .zip(window_output(w, self.kernel[1], self.stride, self.padding[1]))
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let cin = if self.depthwise { 1 } else { self.in_channels };
        vec![self.out_channels, cin, self.kernel[0], self.kernel[1]]
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.output_hw(h, w).expect("conv geometry validated at build time");
        Geometry {
            h,
            w,
            oh,
            ow,
            kh: self.kernel[0],
            kw: self.kernel[1],
            stride: self.stride,
            ph: self.padding[0],
            pw: self.padding[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.padding >= self.size {
            return None;
        }
        window_output(h, self.size, self.stride, self.padding)
            .zip(window_output(w, self.size, self.stride, self.padding))
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.output_hw(h, w).expect("pool geometry validated at build time");
        Geometry {
            h,
            w,
            oh,
            ow,
            kh: self.size,
            kw: self.size,
            stride: self.stride,
            ph: self.padding,
            pw: self.padding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: usize,
    pub bias: usize,
}

fn window_output(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || len + 2 * pad < k {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    /// Output columns `ox` whose input column `ox*stride + kx - pw` is in bounds.
    fn valid_ox(&self, kx: usize) -> std::ops::Range<usize> {
        valid_range(self.ow, self.w, kx, self.stride, self.pw)
    }

    fn valid_oy(&self, ky: usize) -> std::ops::Range<usize> {
        valid_range(self.oh, self.h, ky, self.stride, self.ph)
    }
}

fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    lo..hi.max(lo)
}

fn im2col(x: &[f64], channels: usize, g: &Geometry, col: &mut [f64]) {
    let p = g.oh * g.ow;
    col.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let ys = g.valid_oy(ky);
            for kx in 0..g.kw {
                let xs = g.valid_ox(kx);
                if xs.is_empty() {
                    continue;
                }
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let start = xs.start + kx - g.pw;
                        dst[xs.clone()].copy_from_slice(&src[start..start + xs.len()]);
                    } else {
                        for ox in xs.clone() {
                            dst[ox] = src[ox * g.stride + kx - g.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], channels: usize, g: &Geometry, dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let ys = g.valid_oy(ky);
            for kx in 0..g.kw {
                let xs = g.valid_ox(kx);
                let row = &col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.ph;
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xs.clone() {
                        plane[iy * g.w + ox * g.stride + kx - g.pw] += src[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &Conv2dSpec) -> bool {
    spec.kernel == [1, 1] && spec.stride == 1 && spec.padding == [0, 0]
}

/// Scratch buffer reused across samples of one conv call.
#[derive(Default)]
pub struct ConvScratch {
    col: Vec<f64>,
}

pub fn conv_forward(
    spec: &Conv2dSpec,
    x: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
    scratch: &mut ConvScratch,
) {
    let g = spec.geometry(h, w);
    let p = g.oh * g.ow;
    if spec.depthwise {
        depthwise_forward(spec.in_channels, &g, x, weight, out);
    } else {
        let k = spec.in_channels * g.kh * g.kw;
        if is_pointwise(spec) {
            gemm(spec.out_channels, k, p, 1.0, weight, false, x, false, 0.0, out);
        } else {
            scratch.col.resize(k * p, 0.0);
            im2col(x, spec.in_channels, &g, &mut scratch.col);
            gemm(spec.out_channels, k, p, 1.0, weight, false, &scratch.col, false, 0.0, out);
        }
    }
    if let Some(b) = bias {
        for (oc, row) in out.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v += b[oc]);
        }
    }
}

/// Accumulates weight/bias gradients and, when `dx` is given, writes the
/// input gradient (overwriting it).
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    spec: &Conv2dSpec,
    x: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    dy: &[f64],
    dweight: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
    scratch: &mut ConvScratch,
) {
    let g = spec.geometry(h, w);
    let p = g.oh * g.ow;
    if let Some(db) = dbias {
        for (oc, row) in dy.chunks_exact(p).enumerate() {
            db[oc] += row.iter().sum::<f64>();
        }
    }
    if spec.depthwise {
        depthwise_backward(spec.in_channels, &g, x, weight, dy, dweight, dx);
        return;
    }
    let k = spec.in_channels * g.kh * g.kw;
    let pointwise = is_pointwise(spec);
    if let Some(dw) = dweight {
        if pointwise {
            gemm(spec.out_channels, p, k, 1.0, dy, false, x, true, 1.0, dw);
        } else {
            scratch.col.resize(k * p, 0.0);
            im2col(x, spec.in_channels, &g, &mut scratch.col);
            gemm(spec.out_channels, p, k, 1.0, dy, false, &scratch.col, true, 1.0, dw);
        }
    }
    if let Some(dx) = dx {
        if pointwise {
            gemm(k, spec.out_channels, p, 1.0, weight, true, dy, false, 0.0, dx);
        } else {
            scratch.col.resize(k * p, 0.0);
            gemm(k, spec.out_channels, p, 1.0, weight, true, dy, false, 0.0, &mut scratch.col);
            dx.iter_mut().for_each(|v| *v = 0.0);
            col2im(&scratch.col, spec.in_channels, &g, dx);
        }
    }
}

fn depthwise_forward(channels: usize, g: &Geometry, x: &[f64], weight: &[f64], out: &mut [f64]) {
    let p = g.oh * g.ow;
    out.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let o = &mut out[c * p..(c + 1) * p];
        for ky in 0..g.kh {
            let ys = g.valid_oy(ky);
            for kx in 0..g.kw {
                let wv = weight[(c * g.kh + ky) * g.kw + kx];
                let xs = g.valid_ox(kx);
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut o[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xs.clone() {
                        dst[ox] += wv * src[ox * g.stride + kx - g.pw];
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    channels: usize,
    g: &Geometry,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    mut dweight: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
) {
    let p = g.oh * g.ow;
    if let Some(dx) = dx.as_deref_mut() {
        dx.iter_mut().for_each(|v| *v = 0.0);
    }
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let d = &dy[c * p..(c + 1) * p];
        for ky in 0..g.kh {
            let ys = g.valid_oy(ky);
            for kx in 0..g.kw {
                let widx = (c * g.kh + ky) * g.kw + kx;
                let wv = weight[widx];
                let xs = g.valid_ox(kx);
                let mut acc = 0.0;
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.ph;
                    let drow = &d[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xs.clone() {
                        let ix = iy * g.w + ox * g.stride + kx - g.pw;
                        acc += drow[ox] * plane[ix];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * g.h * g.w + ix] += wv * drow[ox];
                        }
                    }
                }
                if let Some(dw) = dweight.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}

/// Max pooling; padded cells never win. Records the flat in-plane index of
/// every winner for the backward pass.
pub fn max_pool_forward(spec: &PoolSpec, channels: usize, h: usize, w: usize, x: &[f64], out: &mut [f64], argmax: &mut [u32]) {
    let g = spec.geometry(h, w);
    let p = g.oh * g.ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = u32::MAX;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = plane[idx];
                        // NaN propagates so poisoned inputs surface as a non-finite loss
                        if v > best || best_idx == u32::MAX || v.is_nan() {
                            best = v;
                            best_idx = idx as u32;
                            if v.is_nan() {
                                break;
                            }
                        }
                    }
                }
                out[c * p + oy * g.ow + ox] = best;
                argmax[c * p + oy * g.ow + ox] = best_idx;
            }
        }
    }
}

pub fn max_pool_backward(spec: &PoolSpec, channels: usize, h: usize, w: usize, argmax: &[u32], dy: &[f64], dx: &mut [f64]) {
    let g = spec.geometry(h, w);
    let p = g.oh * g.ow;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..channels {
        for i in 0..p {
            let idx = argmax[c * p + i] as usize;
            dx[c * h * w + idx] += dy[c * p + i];
        }
    }
}

/// Average pooling that divides by the number of in-bounds cells.
pub fn avg_pool_forward(spec: &PoolSpec, channels: usize, h: usize, w: usize, x: &[f64], out: &mut [f64]) {
    let g = spec.geometry(h, w);
    let p = g.oh * g.ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (ys, xs) = pool_window(&g, oy, ox);
                let mut s = 0.0;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        s += plane[iy * w + ix];
                    }
                }
                out[c * p + oy * g.ow + ox] = s / (ys.len() * xs.len()) as f64;
            }
        }
    }
}

pub fn avg_pool_backward(spec: &PoolSpec, channels: usize, h: usize, w: usize, dy: &[f64], dx: &mut [f64]) {
    let g = spec.geometry(h, w);
    let p = g.oh * g.ow;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..channels {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (ys, xs) = pool_window(&g, oy, ox);
                let share = dy[c * p + oy * g.ow + ox] / (ys.len() * xs.len()) as f64;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        dx[c * h * w + iy * w + ix] += share;
                    }
                }
            }
        }
    }
}

fn pool_window(g: &Geometry, oy: usize, ox: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let y0 = (oy * g.stride).saturating_sub(g.ph);
    let y1 = (oy * g.stride + g.kh).saturating_sub(g.ph).min(g.h);
    let x0 = (ox * g.stride).saturating_sub(g.pw);
    let x1 = (ox * g.stride + g.kw).saturating_sub(g.pw).min(g.w);
    (y0..y1, x0..x1)
}

/// Per-channel batch statistics over (N, H, W). Variance is the biased
/// estimate used for normalisation.
pub fn batch_moments(x: &[f64], n: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
        mean[c] = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * channels + c) * plane..][..plane]
                .iter()
                .map(|&t| (t - mean[c]) * (t - mean[c]))
                .sum::<f64>();
        }
        var[c] = v / count;
    }
    (mean, var)
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
