//! Per-sample layer kernels with hand-written backward passes.
//!
//! Every tensor here is a single sample in channel-major `(C, H, W)` layout.
//! Layers do not own weights: they hold ranges into the model's flat
//! parameter vector, and backward passes accumulate into a gradient vector
//! with the same layout.

use std::ops::Range;

use super::mish::{mish_fast, mish_grad_fast};

/// Upper bound (in floats) on the scratch buffer used for one im2col chunk.
const IM2COL_CHUNK_FLOATS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Feature {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Feature {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Feature { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Feature) -> Feature {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Feature::from_vec(self.c + other.c, self.h, self.w, data)
    }

    /// Inverse of [`Feature::concat`]: split after the first `c` channels.
    pub fn split_channels(self, c: usize) -> (Feature, Feature) {
        let at = c * self.plane();
        let mut head = self.data;
        let tail = head.split_off(at);
        (
            Feature::from_vec(c, self.h, self.w, head),
            Feature::from_vec(self.c - c, self.h, self.w, tail),
        )
    }
}

/// Hands out contiguous parameter ranges and remembers their names.
#[derive(Debug, Default, Clone)]
pub struct ParamLayout {
    pub groups: Vec<(String, Range<usize>)>,
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let r = self.len..self.len + len;
        self.len += len;
        self.groups.push((name.into(), r.clone()));
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// `C = alpha * A * B + beta * C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches by the
    // lengths of the borrowed slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Square convolution, stride 1, "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernel sizes only");
        let weight = layout.alloc(format!("{name}.weight"), out_c * in_c * k * k);
        let bias = layout.alloc(format!("{name}.bias"), out_c);
        Conv2d {
            in_c,
            out_c,
            k,
            weight,
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn rows_per_chunk(&self, w: usize) -> usize {
        (IM2COL_CHUNK_FLOATS / (self.fan_in() * w).max(1)).max(1)
    }

    /// Unfolds rows `r0..r1` of `x` into a `(Cin*k*k, (r1-r0)*W)` matrix.
    fn im2col(&self, x: &Feature, r0: usize, r1: usize, col: &mut Vec<f32>) {
        let (h, w, k) = (x.h as isize, x.w, self.k);
        let pad = (k / 2) as isize;
        let n = (r1 - r0) * w;
        col.clear();
        col.resize(self.fan_in() * n, 0.0);
        for ci in 0..self.in_c {
            let src = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let dx = kx as isize - pad;
                    for (ri, y) in (r0..r1).enumerate() {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[ri * w..(ri + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        if x0 < x1 {
                            let s0 = (x0 as isize + dx) as usize;
                            drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto rows `r0..r1` of `dx`.
    fn col2im(&self, col: &[f32], r0: usize, r1: usize, dx: &mut Feature) {
        let (h, w, k) = (dx.h as isize, dx.w, self.k);
        let pad = (k / 2) as isize;
        let n = (r1 - r0) * w;
        let plane = dx.plane();
        for ci in 0..self.in_c {
            let dst = &mut dx.data[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    let ox = kx as isize - pad;
                    for (ri, y) in (r0..r1).enumerate() {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x0 = (-ox).max(0) as usize;
                        let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let s0 = (x0 as isize + ox) as usize;
                        let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                        let srow = &src[ri * w + x0..ri * w + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f32], x: &Feature) -> Feature {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let mut out = Feature::zeros(self.out_c, h, w);
        let weight = &params[self.weight.clone()];
        let kk = self.fan_in();
        if self.k == 1 {
            gemm(
                self.out_c,
                kk,
                plane,
                weight,
                (kk, 1),
                &x.data,
                (plane, 1),
                0.0,
                &mut out.data,
                (plane, 1),
            );
        } else {
            let rows = self.rows_per_chunk(w);
            let mut col = Vec::new();
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + rows).min(h);
                self.im2col(x, r0, r1, &mut col);
                let n = (r1 - r0) * w;
                gemm(
                    self.out_c,
                    kk,
                    n,
                    weight,
                    (kk, 1),
                    &col,
                    (n, 1),
                    0.0,
                    &mut out.data[r0 * w..],
                    (plane, 1),
                );
                r0 = r1;
            }
        }
        let bias = &params[self.bias.clone()];
        for (co, b) in bias.iter().enumerate() {
            for v in &mut out.data[co * plane..(co + 1) * plane] {
                *v += *b;
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grads`; returns the input
    /// gradient when `need_dx`.
    pub fn backward(
        &self,
        params: &[f32],
        x: &Feature,
        dy: &Feature,
        grads: &mut [f32],
        need_dx: bool,
    ) -> Option<Feature> {
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let kk = self.fan_in();
        {
            let db = &mut grads[self.bias.clone()];
            for (co, g) in db.iter_mut().enumerate() {
                let s: f32 = dy.data[co * plane..(co + 1) * plane].iter().sum();
                *g += s;
            }
        }
        let weight = &params[self.weight.clone()];
        let mut dx = need_dx.then(|| Feature::zeros(self.in_c, h, w));
        if self.k == 1 {
            gemm(
                self.out_c,
                plane,
                kk,
                &dy.data,
                (plane, 1),
                &x.data,
                (1, plane),
                1.0,
                &mut grads[self.weight.clone()],
                (kk, 1),
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    kk,
                    self.out_c,
                    plane,
                    weight,
                    (1, kk),
                    &dy.data,
                    (plane, 1),
                    0.0,
                    &mut dx.data,
                    (plane, 1),
                );
            }
            return dx;
        }
        let rows = self.rows_per_chunk(w);
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + rows).min(h);
            let n = (r1 - r0) * w;
            self.im2col(x, r0, r1, &mut col);
            gemm(
                self.out_c,
                n,
                kk,
                &dy.data[r0 * w..],
                (plane, 1),
                &col,
                (1, n),
                1.0,
                &mut grads[self.weight.clone()],
                (kk, 1),
            );
            if let Some(dx) = dx.as_mut() {
                dcol.clear();
                dcol.resize(kk * n, 0.0);
                gemm(
                    kk,
                    self.out_c,
                    n,
                    weight,
                    (1, kk),
                    &dy.data[r0 * w..],
                    (plane, 1),
                    0.0,
                    &mut dcol,
                    (n, 1),
                );
                self.col2im(&dcol, r0, r1, dx);
            }
            r0 = r1;
        }
        dx
    }
}

/// 2x2, stride-2 transposed convolution (learned upsampling).
#[derive(Debug, Clone)]
pub struct UpConv2x2 {
    pub in_c: usize,
    pub out_c: usize,
    /// Stored as `(out_c * 4, in_c)`; row `co*4 + dy*2 + dx`.
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl UpConv2x2 {
    pub fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize) -> Self {
        let weight = layout.alloc(format!("{name}.weight"), out_c * 4 * in_c);
        let bias = layout.alloc(format!("{name}.bias"), out_c);
        UpConv2x2 {
            in_c,
            out_c,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &[f32], x: &Feature) -> Feature {
        assert_eq!(x.c, self.in_c, "upconv input channels");
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let rows = self.out_c * 4;
        let mut tmp = vec![0.0f32; rows * plane];
        gemm(
            rows,
            self.in_c,
            plane,
            &params[self.weight.clone()],
            (self.in_c, 1),
            &x.data,
            (plane, 1),
            0.0,
            &mut tmp,
            (plane, 1),
        );
        let bias = &params[self.bias.clone()];
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Feature::zeros(self.out_c, oh, ow);
        for co in 0..self.out_c {
            let dst = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
            for q in 0..4 {
                let (qy, qx) = (q / 2, q % 2);
                let src = &tmp[(co * 4 + q) * plane..(co * 4 + q + 1) * plane];
                for y in 0..h {
                    let drow = &mut dst[(2 * y + qy) * ow..(2 * y + qy + 1) * ow];
                    for x in 0..w {
                        drow[2 * x + qx] = src[y * w + x] + bias[co];
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, params: &[f32], x: &Feature, dy: &Feature, grads: &mut [f32]) -> Feature {
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let rows = self.out_c * 4;
        let mut dtmp = vec![0.0f32; rows * plane];
        {
            let db = &mut grads[self.bias.clone()];
            for co in 0..self.out_c {
                let src = &dy.data[co * oh * ow..(co + 1) * oh * ow];
                db[co] += src.iter().sum::<f32>();
                for q in 0..4 {
                    let (qy, qx) = (q / 2, q % 2);
                    let dst = &mut dtmp[(co * 4 + q) * plane..(co * 4 + q + 1) * plane];
                    for y in 0..h {
                        let srow = &src[(2 * y + qy) * ow..(2 * y + qy + 1) * ow];
                        for x in 0..w {
                            dst[y * w + x] = srow[2 * x + qx];
                        }
                    }
                }
            }
        }
        gemm(
            rows,
            plane,
            self.in_c,
            &dtmp,
            (plane, 1),
            &x.data,
            (1, plane),
            1.0,
            &mut grads[self.weight.clone()],
            (self.in_c, 1),
        );
        let mut dx = Feature::zeros(self.in_c, h, w);
        gemm(
            self.in_c,
            rows,
            plane,
            &params[self.weight.clone()],
            (1, self.in_c),
            &dtmp,
            (plane, 1),
            0.0,
            &mut dx.data,
            (plane, 1),
        );
        dx
    }
}

/// Group normalisation with a per-channel affine transform.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct GroupNormTrace {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, max_groups: usize) -> Self {
        let gamma = layout.alloc(format!("{name}.gamma"), channels);
        let beta = layout.alloc(format!("{name}.beta"), channels);
        GroupNorm {
            channels,
            groups: group_count(channels, max_groups),
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, params: &[f32], x: &Feature) -> (Feature, GroupNormTrace) {
        assert_eq!(x.c, self.channels, "groupnorm channels");
        let plane = x.plane();
        let per_group = self.channels / self.groups * plane;
        let gamma = &params[self.gamma.clone()];
        let beta = &params[self.beta.clone()];
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut out = Feature::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = g * per_group..(g + 1) * per_group;
            let xs = &x.data[span.clone()];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
            let var = xs
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / per_group as f64;
            let istd = (1.0 / (var + self.eps as f64).sqrt()) as f32;
            let mean = mean as f32;
            inv_std.push(istd);
            for (o, &v) in xhat[span].iter_mut().zip(xs) {
                *o = (v - mean) * istd;
            }
        }
        for c in 0..self.channels {
            let span = c * plane..(c + 1) * plane;
            for (o, &xh) in out.data[span.clone()].iter_mut().zip(&xhat[span]) {
                *o = xh * gamma[c] + beta[c];
            }
        }
        (out, GroupNormTrace { xhat, inv_std })
    }

    pub fn backward(
        &self,
        params: &[f32],
        trace: &GroupNormTrace,
        dy: &Feature,
        grads: &mut [f32],
    ) -> Feature {
        let plane = dy.plane();
        let cpg = self.channels / self.groups;
        let per_group = cpg * plane;
        let gamma = &params[self.gamma.clone()];
        let mut dxhat = vec![0.0f32; dy.data.len()];
        for c in 0..self.channels {
            let span = c * plane..(c + 1) * plane;
            let mut dg = 0.0f64;
            let mut db = 0.0f64;
            for ((d, &g), &xh) in dxhat[span.clone()]
                .iter_mut()
                .zip(&dy.data[span.clone()])
                .zip(&trace.xhat[span])
            {
                *d = g * gamma[c];
                dg += (g * xh) as f64;
                db += g as f64;
            }
            grads[self.gamma.start + c] += dg as f32;
            grads[self.beta.start + c] += db as f32;
        }
        let mut dx = Feature::zeros(dy.c, dy.h, dy.w);
        let n = per_group as f64;
        for g in 0..self.groups {
            let span = g * per_group..(g + 1) * per_group;
            let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
            for (&d, &xh) in dxhat[span.clone()].iter().zip(&trace.xhat[span.clone()]) {
                sum_d += d as f64;
                sum_dx += (d * xh) as f64;
            }
            let mean_d = (sum_d / n) as f32;
            let mean_dx = (sum_dx / n) as f32;
            let istd = trace.inv_std[g];
            for ((o, &d), &xh) in dx.data[span.clone()]
                .iter_mut()
                .zip(&dxhat[span.clone()])
                .zip(&trace.xhat[span])
            {
                *o = istd * (d - mean_d - xh * mean_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Mish,
    Relu,
}

impl Act {
    pub fn apply(self, x: &Feature) -> Feature {
        let data = match self {
            Act::Mish => x.data.iter().map(|&v| mish_fast(v)).collect(),
            Act::Relu => x.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        Feature::from_vec(x.c, x.h, x.w, data)
    }

    /// `dy * act'(x)` where `x` is the pre-activation input.
    pub fn backward(self, x: &Feature, dy: &Feature) -> Feature {
        let data = match self {
            Act::Mish => x
                .data
                .iter()
                .zip(&dy.data)
                .map(|(&v, &g)| g * mish_grad_fast(v))
                .collect(),
            Act::Relu => x
                .data
                .iter()
                .zip(&dy.data)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
        };
        Feature::from_vec(x.c, x.h, x.w, data)
    }
}

/// 2x2 max pooling; the trace records which of the four inputs won.
pub fn maxpool2(x: &Feature) -> (Feature, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Feature::zeros(x.c, oh, ow);
    let mut arg = vec![0u8; x.c * oh * ow];
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_q = 0u8;
                for q in 0..4u8 {
                    let v = src[(2 * y + (q / 2) as usize) * x.w + 2 * xx + (q % 2) as usize];
                    if v > best {
                        best = v;
                        best_q = q;
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = best;
                arg[o] = best_q;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(arg: &[u8], dy: &Feature) -> Feature {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Feature::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for x in 0..dy.w {
                let o = (c * dy.h + y) * dy.w + x;
                let q = arg[o] as usize;
                dx.data[(c * h + 2 * y + q / 2) * w + 2 * x + q % 2] += dy.data[o];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feature(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Feature {
        Feature::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_params(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(conv: &Conv2d, p: &[f32], x: &Feature) -> Feature {
        let pad = (conv.k / 2) as isize;
        let mut out = Feature::zeros(conv.out_c, x.h, x.w);
        let w = &p[conv.weight.clone()];
        for co in 0..conv.out_c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = p[conv.bias.start + co] as f64;
                    for ci in 0..conv.in_c {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wv = w[((co * conv.in_c + ci) * conv.k + ky) * conv.k + kx];
                                acc += (wv * x.data[(ci * x.h + sy as usize) * x.w + sx as usize]) as f64;
                            }
                        }
                    }
                    out.data[(co * x.h + y) * x.w + xx] = acc as f32;
                }
            }
        }
        out
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, cin, cout, h, w) in [(3, 2, 3, 5, 7), (1, 4, 2, 3, 3), (3, 1, 1, 1, 1)] {
            let mut layout = ParamLayout::default();
            let conv = Conv2d::new(&mut layout, "c", cin, cout, k);
            let p = random_params(&mut rng, layout.len());
            let x = random_feature(&mut rng, cin, h, w);
            let fast = conv.forward(&p, &x);
            let slow = naive_conv(&conv, &p, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    /// Checks backward passes with the scalar probe L = <dy, f(x)>, whose
    /// derivative in any direction is estimated by central differences.
    fn check_conv_grads(k: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 2, 3, k);
        let p = random_params(&mut rng, layout.len());
        let x = random_feature(&mut rng, 2, 4, 5);
        let dy = random_feature(&mut rng, 3, 4, 5);
        let mut g = vec![0.0; layout.len()];
        let dx = conv.backward(&p, &x, &dy, &mut g, true).unwrap();
        let h = 1e-2f32;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let up = dot(&dy.data, &conv.forward(&pp, &x).data);
            pp[i] -= 2.0 * h;
            let dn = dot(&dy.data, &conv.forward(&pp, &x).data);
            let fd = (up - dn) / (2.0 * h as f64);
            assert!((fd - g[i] as f64).abs() < 2e-3, "param {i}: fd {fd} vs {}", g[i]);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = dot(&dy.data, &conv.forward(&p, &xp).data);
            xp.data[i] -= 2.0 * h;
            let dn = dot(&dy.data, &conv.forward(&p, &xp).data);
            let fd = (up - dn) / (2.0 * h as f64);
            assert!((fd - dx.data[i] as f64).abs() < 2e-3);
        }
    }

    #[test]
    fn conv3_gradients_match_finite_differences() {
        check_conv_grads(3);
    }

    #[test]
    fn conv1_gradients_match_finite_differences() {
        check_conv_grads(1);
    }

    #[test]
    fn chunked_im2col_matches_single_chunk() {
        // Wide enough rows that the chunker splits the image.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 64, 2, 3);
        let p = random_params(&mut rng, layout.len());
        let x = random_feature(&mut rng, 64, 6, 2048);
        assert!(conv.rows_per_chunk(2048) < 6);
        let fast = conv.forward(&p, &x);
        let slow = naive_conv(&conv, &p, &x);
        let worst = fast
            .data
            .iter()
            .zip(&slow.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn upconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layout = ParamLayout::default();
        let up = UpConv2x2::new(&mut layout, "u", 3, 2);
        let p = random_params(&mut rng, layout.len());
        let x = random_feature(&mut rng, 3, 2, 3);
        let dy = random_feature(&mut rng, 2, 4, 6);
        let mut g = vec![0.0; layout.len()];
        let dx = up.backward(&p, &x, &dy, &mut g);
        let h = 1e-2f32;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let a = dot(&dy.data, &up.forward(&pp, &x).data);
            pp[i] -= 2.0 * h;
            let b = dot(&dy.data, &up.forward(&pp, &x).data);
            assert!(((a - b) / (2.0 * h as f64) - g[i] as f64).abs() < 2e-3);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let a = dot(&dy.data, &up.forward(&p, &xp).data);
            xp.data[i] -= 2.0 * h;
            let b = dot(&dy.data, &up.forward(&p, &xp).data);
            assert!(((a - b) / (2.0 * h as f64) - dx.data[i] as f64).abs() < 2e-3);
        }
    }

    #[test]
    fn groupnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layout = ParamLayout::default();
        let gn = GroupNorm::new(&mut layout, "n", 4, 2);
        assert_eq!(gn.groups, 2);
        let p = random_params(&mut rng, layout.len());
        let x = random_feature(&mut rng, 4, 3, 3);
        let dy = random_feature(&mut rng, 4, 3, 3);
        let (_, trace) = gn.forward(&p, &x);
        let mut g = vec![0.0; layout.len()];
        let dx = gn.backward(&p, &trace, &dy, &mut g);
        let probe = |p: &[f32], x: &Feature| dot(&dy.data, &gn.forward(p, x).0.data);
        let h = 1e-3f32;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let a = probe(&pp, &x);
            pp[i] -= 2.0 * h;
            let b = probe(&pp, &x);
            assert!(((a - b) / (2.0 * h as f64) - g[i] as f64).abs() < 2e-3);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let a = probe(&p, &xp);
            xp.data[i] -= 2.0 * h;
            let b = probe(&p, &xp);
            assert!(((a - b) / (2.0 * h as f64) - dx.data[i] as f64).abs() < 5e-3);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Feature::from_vec(1, 2, 2, vec![0.1, 0.9, -1.0, 0.3]);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data, vec![0.9]);
        let dx = maxpool2_backward(&arg, &Feature::from_vec(1, 1, 1, vec![2.0]));
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn group_count_divides_channels() {
        assert_eq!(group_count(64, 8), 8);
        assert_eq!(group_count(12, 8), 6);
        assert_eq!(group_count(4, 8), 4);
        assert_eq!(group_count(7, 8), 7);
        assert_eq!(group_count(1, 8), 1);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Feature::from_vec(1, 1, 2, vec![1.0, 2.0]);
        let b = Feature::from_vec(2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let (a2, b2) = a.concat(&b).split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
