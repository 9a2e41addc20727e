//! Rank-4 tensors and the convolution/upsampling primitives of the
//! segmentation core, with hand-rolled backward passes.
//!
//! Convolutions are "same"-padded cross-correlations with per-axis dilation.
//! The inner loops run axpy-style over contiguous rows so the accumulation
//! order per output pixel is the fixed (channel, ky, kx) sequence.

use crate::{Error, Result};

/// (batch, channels, height, width) tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::InvalidParam(format!(
                "tensor data length {} != {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("tensor holds non-finite values".into()));
        }
        Ok(Self { n, c, h, w, data })
    }

    #[inline]
    pub fn plane(&self, b: usize, ch: usize) -> &[f32] {
        let start = (b * self.c + ch) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, ch: usize) -> &mut [f32] {
        let start = (b * self.c + ch) * self.h * self.w;
        &mut self.data[start..start + self.h * self.w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution geometry; stride is fixed at (1, 1), padding is always "same"
/// (`dilation * (kernel - 1) / 2` per side).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: (usize, usize), dilation: (usize, usize)) -> Result<Self> {
        let spec = Self {
            in_ch,
            out_ch,
            kernel,
            dilation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2) {
            return Err(Error::InvalidParam("conv kernel must be odd".into()));
        }
        if self.dilation.0 < 1 || self.dilation.1 < 1 {
            return Err(Error::InvalidParam("conv dilation must be >= 1".into()));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::InvalidParam("conv channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel.0 * self.kernel.1
    }

    /// "Same" padding per side.
    pub fn padding(&self) -> (usize, usize) {
        (
            self.dilation.0 * (self.kernel.0 - 1) / 2,
            self.dilation.1 * (self.kernel.1 - 1) / 2,
        )
    }
}

fn check_conv_args(x: &Tensor4, weights: &[f32], bias: &[f32], spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if x.c != spec.in_ch {
        return Err(Error::InvalidParam(format!(
            "conv input has {} channels, spec expects {}",
            x.c, spec.in_ch
        )));
    }
    if weights.len() != spec.weight_len() {
        return Err(Error::InvalidParam(format!(
            "conv weight length {} != {}",
            weights.len(),
            spec.weight_len()
        )));
    }
    if bias.len() != spec.out_ch {
        return Err(Error::InvalidParam(format!(
            "conv bias length {} != {}",
            bias.len(),
            spec.out_ch
        )));
    }
    Ok(())
}

/// Dilated "same" convolution with stride 1:
/// `y[b,o,i,j] = bias[o] + sum x[b,c, i + dh*(u - kh/2), j + dw*(v - kw/2)] * w[o,c,u,v]`
/// with zero padding outside the input.
pub fn conv2d_dilated(x: &Tensor4, weights: &[f32], bias: &[f32], spec: &ConvSpec) -> Result<Tensor4> {
    check_conv_args(x, weights, bias, spec)?;
    Ok(conv_forward(x, weights, bias, spec, 1))
}

/// Output spatial side for a given stride (same padding): `(in-1)/stride + 1`.
pub fn conv_out_side(side: usize, stride: usize) -> usize {
    (side - 1) / stride + 1
}

/// Stride-aware forward used by both the public op (stride 1) and the
/// encoder's downsampling convolutions (stride 2).
pub(crate) fn conv_forward(
    x: &Tensor4,
    weights: &[f32],
    bias: &[f32],
    spec: &ConvSpec,
    stride: usize,
) -> Tensor4 {
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding();
    let oh = conv_out_side(x.h, stride);
    let ow = conv_out_side(x.w, stride);
    let mut y = Tensor4::zeros(x.n, spec.out_ch, oh, ow);

    for b in 0..x.n {
        for o in 0..spec.out_ch {
            y.plane_mut(b, o).fill(bias[o]);
            for c in 0..spec.in_ch {
                let xp = x.plane(b, c);
                let (xh, xw) = (x.h, x.w);
                let yp = y.plane_mut(b, o);
                for u in 0..kh {
                    let di = (dh * u) as i64 - ph as i64;
                    for v in 0..kw {
                        let dj = (dw * v) as i64 - pw as i64;
                        let wv = weights[((o * spec.in_ch + c) * kh + u) * kw + v];
                        if stride == 1 {
                            // Row overlap: i + di in [0, xh), j + dj in [0, xw).
                            let i_lo = (-di).max(0) as usize;
                            let i_hi = ((xh as i64 - di).min(oh as i64)).max(0) as usize;
                            let j_lo = (-dj).max(0) as usize;
                            let j_hi = ((xw as i64 - dj).min(ow as i64)).max(0) as usize;
                            if j_lo >= j_hi {
                                continue;
                            }
                            for i in i_lo..i_hi {
                                let xi = (i as i64 + di) as usize;
                                let yr = &mut yp[i * ow + j_lo..i * ow + j_hi];
                                let xr = &xp[xi * xw + (j_lo as i64 + dj) as usize
                                    ..xi * xw + (j_hi as i64 + dj) as usize];
                                for (a, &bv) in yr.iter_mut().zip(xr) {
                                    *a += wv * bv;
                                }
                            }
                        } else {
                            for i in 0..oh {
                                let xi = (stride * i) as i64 + di;
                                if xi < 0 || xi >= xh as i64 {
                                    continue;
                                }
                                let xrow = &xp[xi as usize * xw..(xi as usize + 1) * xw];
                                let yr = &mut yp[i * ow..(i + 1) * ow];
                                for (j, a) in yr.iter_mut().enumerate() {
                                    let xj = (stride * j) as i64 + dj;
                                    if xj >= 0 && xj < xw as i64 {
                                        *a += wv * xrow[xj as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of the convolution with respect to its input.
pub(crate) fn conv_backward_input(
    dy: &Tensor4,
    weights: &[f32],
    spec: &ConvSpec,
    stride: usize,
    in_h: usize,
    in_w: usize,
) -> Tensor4 {
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding();
    let mut dx = Tensor4::zeros(dy.n, spec.in_ch, in_h, in_w);
    for b in 0..dy.n {
        for o in 0..spec.out_ch {
            let dyp = dy.plane(b, o);
            for c in 0..spec.in_ch {
                let dxp = dx.plane_mut(b, c);
                for u in 0..kh {
                    let di = (dh * u) as i64 - ph as i64;
                    for v in 0..kw {
                        let dj = (dw * v) as i64 - pw as i64;
                        let wv = weights[((o * spec.in_ch + c) * kh + u) * kw + v];
                        if stride == 1 {
                            // dx[i+di, j+dj] += wv * dy[i, j] over the overlap.
                            let i_lo = (-di).max(0) as usize;
                            let i_hi = ((in_h as i64 - di).min(dy.h as i64)).max(0) as usize;
                            let j_lo = (-dj).max(0) as usize;
                            let j_hi = ((in_w as i64 - dj).min(dy.w as i64)).max(0) as usize;
                            if j_lo >= j_hi {
                                continue;
                            }
                            for i in i_lo..i_hi {
                                let xi = (i as i64 + di) as usize;
                                let dxr = &mut dxp[xi * in_w + (j_lo as i64 + dj) as usize
                                    ..xi * in_w + (j_hi as i64 + dj) as usize];
                                let dyr = &dyp[i * dy.w + j_lo..i * dy.w + j_hi];
                                for (a, &g) in dxr.iter_mut().zip(dyr) {
                                    *a += wv * g;
                                }
                            }
                        } else {
                            for i in 0..dy.h {
                                let xi = (stride * i) as i64 + di;
                                if xi < 0 || xi >= in_h as i64 {
                                    continue;
                                }
                                for j in 0..dy.w {
                                    let xj = (stride * j) as i64 + dj;
                                    if xj >= 0 && xj < in_w as i64 {
                                        dxp[xi as usize * in_w + xj as usize] +=
                                            wv * dyp[i * dy.w + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of the convolution with respect to weights and bias.
pub(crate) fn conv_backward_params(
    x: &Tensor4,
    dy: &Tensor4,
    spec: &ConvSpec,
    stride: usize,
) -> (Vec<f32>, Vec<f32>) {
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding();
    let mut dweights = vec![0.0f32; spec.weight_len()];
    let mut dbias = vec![0.0f32; spec.out_ch];
    for b in 0..x.n {
        for o in 0..spec.out_ch {
            let dyp = dy.plane(b, o);
            for val in dyp {
                dbias[o] += val;
            }
            for c in 0..spec.in_ch {
                let xp = x.plane(b, c);
                for u in 0..kh {
                    let di = (dh * u) as i64 - ph as i64;
                    for v in 0..kw {
                        let dj = (dw * v) as i64 - pw as i64;
                        let mut acc = 0.0f32;
                        if stride == 1 {
                            // Row dot products over the overlap region.
                            let i_lo = (-di).max(0) as usize;
                            let i_hi = ((x.h as i64 - di).min(dy.h as i64)).max(0) as usize;
                            let j_lo = (-dj).max(0) as usize;
                            let j_hi = ((x.w as i64 - dj).min(dy.w as i64)).max(0) as usize;
                            if j_lo >= j_hi {
                                continue;
                            }
                            // Four-lane accumulation keeps the reduction
                            // vectorizable; lane order is fixed, so results
                            // stay deterministic.
                            let mut lanes = [0.0f32; 4];
                            for i in i_lo..i_hi {
                                let xi = (i as i64 + di) as usize;
                                let xr = &xp[xi * x.w + (j_lo as i64 + dj) as usize
                                    ..xi * x.w + (j_hi as i64 + dj) as usize];
                                let dyr = &dyp[i * dy.w + j_lo..i * dy.w + j_hi];
                                let chunks = xr.len() / 4;
                                for k in 0..chunks {
                                    for l in 0..4 {
                                        lanes[l] += xr[4 * k + l] * dyr[4 * k + l];
                                    }
                                }
                                for k in 4 * chunks..xr.len() {
                                    acc += xr[k] * dyr[k];
                                }
                            }
                            acc += (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
                        } else {
                            for i in 0..dy.h {
                                let xi = (stride * i) as i64 + di;
                                if xi < 0 || xi >= x.h as i64 {
                                    continue;
                                }
                                for j in 0..dy.w {
                                    let xj = (stride * j) as i64 + dj;
                                    if xj >= 0 && xj < x.w as i64 {
                                        acc +=
                                            xp[xi as usize * x.w + xj as usize] * dyp[i * dy.w + j];
                                    }
                                }
                            }
                        }
                        dweights[((o * spec.in_ch + c) * kh + u) * kw + v] += acc;
                    }
                }
            }
        }
    }
    (dweights, dbias)
}

/// 2x nearest-neighbor upsampling.
pub fn upsample_nearest2(x: &Tensor4) -> Tensor4 {
    let mut y = Tensor4::zeros(x.n, x.c, x.h * 2, x.w * 2);
    for b in 0..x.n {
        for c in 0..x.c {
            let xp = x.plane(b, c);
            let yw = x.w * 2;
            let yp = y.plane_mut(b, c);
            for i in 0..x.h * 2 {
                for j in 0..yw {
                    yp[i * yw + j] = xp[(i / 2) * x.w + j / 2];
                }
            }
        }
    }
    y
}

pub(crate) fn upsample_nearest2_backward(dy: &Tensor4) -> Tensor4 {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    for b in 0..dy.n {
        for c in 0..dy.c {
            let dyp = dy.plane(b, c);
            let dxp = dx.plane_mut(b, c);
            for i in 0..dy.h {
                for j in 0..dy.w {
                    dxp[(i / 2) * w + j / 2] += dyp[i * dy.w + j];
                }
            }
        }
    }
    dx
}

/// Channel concatenation of two tensors with matching batch/spatial dims.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(Error::DimensionMismatch {
            expected_w: a.w,
            expected_h: a.h,
            got_w: b.w,
            got_h: b.h,
        });
    }
    let mut y = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
    for bi in 0..a.n {
        for c in 0..a.c {
            y.plane_mut(bi, c).copy_from_slice(a.plane(bi, c));
        }
        for c in 0..b.c {
            y.plane_mut(bi, a.c + c).copy_from_slice(b.plane(bi, c));
        }
    }
    Ok(y)
}

pub(crate) fn split_channels_grad(d: &Tensor4, c_first: usize) -> (Tensor4, Tensor4) {
    let mut da = Tensor4::zeros(d.n, c_first, d.h, d.w);
    let mut db = Tensor4::zeros(d.n, d.c - c_first, d.h, d.w);
    for b in 0..d.n {
        for c in 0..c_first {
            da.plane_mut(b, c).copy_from_slice(d.plane(b, c));
        }
        for c in c_first..d.c {
            db.plane_mut(b, c - c_first).copy_from_slice(d.plane(b, c));
        }
    }
    (da, db)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    Tensor4 {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Backward through ReLU given the forward *output*.
pub(crate) fn relu_backward(dy: &Tensor4, y: &Tensor4) -> Tensor4 {
    Tensor4 {
        n: dy.n,
        c: dy.c,
        h: dy.h,
        w: dy.w,
        data: dy
            .data
            .iter()
            .zip(&y.data)
            .map(|(&d, &o)| if o > 0.0 { d } else { 0.0 })
            .collect(),
    }
}

/// Per-pixel two-class softmax over a 2-channel logits tensor.
pub fn softmax2(logits: &Tensor4) -> Result<Tensor4> {
    if logits.c != 2 {
        return Err(Error::InvalidParam(format!(
            "softmax2 expects 2 channels, got {}",
            logits.c
        )));
    }
    let mut probs = Tensor4::zeros(logits.n, 2, logits.h, logits.w);
    let plane = logits.h * logits.w;
    for b in 0..logits.n {
        for k in 0..plane {
            let z0 = logits.plane(b, 0)[k];
            let z1 = logits.plane(b, 1)[k];
            let m = z0.max(z1);
            let e0 = (z0 - m).exp();
            let e1 = (z1 - m).exp();
            let sum = e0 + e1;
            probs.plane_mut(b, 0)[k] = e0 / sum;
            probs.plane_mut(b, 1)[k] = e1 / sum;
        }
    }
    Ok(probs)
}
