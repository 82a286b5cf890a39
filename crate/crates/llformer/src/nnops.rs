//! Neural-net building blocks on top of the tensor engine. All spatial ops
//! take `[B, C, H, W]` tensors; convolutions are stride-1 with zero padding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{record_op, Tensor};

#[derive(Clone)]
pub struct ConvWeights<T: Scalar> {
    /// `[c_out, c_in / groups, k, k]`
    pub kernel: Tensor<T>,
    /// `[c_out]`
    pub bias: Option<Tensor<T>>,
    pub groups: usize,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Tensor<T>>, groups: usize) -> Result<Self> {
        let ks = kernel.shape().to_vec();
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::Dimension {
                op: "conv_weights",
                detail: format!("kernel must be [c_out, c_in/groups, k, k], got {ks:?}"),
            });
        }
        if groups == 0 || ks[0] % groups != 0 {
            return Err(Error::Contract {
                op: "conv_weights",
                detail: format!("groups {groups} must divide c_out {}", ks[0]),
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [ks[0]] {
                return Err(Error::Dimension {
                    op: "conv_weights",
                    detail: format!("bias shape {:?} vs c_out {}", b.shape(), ks[0]),
                });
            }
        }
        Ok(ConvWeights { kernel, bias, groups })
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[1] * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

struct ConvDims {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    groups: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Stride-1 grouped 2D convolution with symmetric zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>, padding: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dimension {
            op: "conv2d",
            detail: format!("input must be [B, C, H, W], got {xs:?}"),
        });
    }
    let (b, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    if c_in != w.c_in() {
        return Err(Error::Dimension {
            op: "conv2d",
            detail: format!(
                "input has {c_in} channels, kernel expects {} ({} groups x {})",
                w.c_in(),
                w.groups,
                w.kernel.shape()[1]
            ),
        });
    }
    let k = w.kernel_size();
    if h + 2 * padding < k || wd + 2 * padding < k {
        return Err(Error::Dimension {
            op: "conv2d",
            detail: format!("{h}x{wd} input too small for {k}x{k} kernel with padding {padding}"),
        });
    }
    let dims = ConvDims {
        b,
        c_in,
        h,
        w: wd,
        c_out: w.c_out(),
        k,
        groups: w.groups,
        pad: padding,
        oh: h + 2 * padding - k + 1,
        ow: wd + 2 * padding - k + 1,
    };
    let out = conv_forward(x.data(), w.kernel.data(), w.bias.as_ref().map(|b| b.data()), &dims);
    let out = Tensor::from_vec(vec![dims.b, dims.c_out, dims.oh, dims.ow], out);

    let mut inputs: Vec<&Tensor<T>> = vec![x, &w.kernel];
    let has_bias = w.bias.is_some();
    if let Some(bias) = &w.bias {
        inputs.push(bias);
    }
    let (xd, kd) = (x.detach(), w.kernel.detach());
    Ok(record_op("conv2d", &inputs, out, move |g, need| {
        let mut grads = vec![
            need[0].then(|| conv_grad_x(g.data(), kd.data(), &dims)),
            need[1].then(|| conv_grad_kernel(g.data(), xd.data(), &dims)),
        ];
        if has_bias {
            grads.push(need[2].then(|| conv_grad_bias::<T>(g.data(), &dims)));
        }
        grads
    }))
}

fn conv_forward<T: Scalar>(x: &[T], kernel: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let mut out = vec![T::zero(); d.b * d.c_out * d.oh * d.ow];
    for bi in 0..d.b {
        for o in 0..d.c_out {
            let obase = (bi * d.c_out + o) * d.oh * d.ow;
            if let Some(bias) = bias {
                out[obase..obase + d.oh * d.ow].fill(bias[o]);
            }
            let g = o / cout_g;
            for ig in 0..cin_g {
                let ci = g * cin_g + ig;
                let xbase = (bi * d.c_in + ci) * d.h * d.w;
                let kbase = (o * cin_g + ig) * d.k * d.k;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        // No shortcut for zero weights: 0 × NaN must stay
                        // NaN so a poisoned activation reaches the loss and
                        // trips the non-finite abort.
                        let kv = kernel[kbase + ky * d.k + kx];
                        // out[oy, ox] += kv * x[oy + ky - pad, ox + kx - pad]
                        let (oy0, oy1) = row_range(d.oh, d.h, ky, d.pad);
                        let (ox0, ox1) = row_range(d.ow, d.w, kx, d.pad);
                        for oy in oy0..oy1 {
                            let iy = oy + ky - d.pad;
                            let orow = obase + oy * d.ow;
                            let xrow = xbase + iy * d.w + (ox0 + kx - d.pad);
                            let (dst, src) =
                                (&mut out[orow + ox0..orow + ox1], &x[xrow..xrow + (ox1 - ox0)]);
                            for (dv, &sv) in dst.iter_mut().zip(src) {
                                *dv += kv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions `o` where `o + k_off - pad` lands inside `[0, input)`.
fn row_range(out: usize, input: usize, k_off: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off);
    let hi = (input + pad).saturating_sub(k_off).min(out);
    (lo.min(hi), hi)
}

fn conv_grad_x<T: Scalar>(g: &[T], kernel: &[T], d: &ConvDims) -> Tensor<T> {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let mut gx = vec![T::zero(); d.b * d.c_in * d.h * d.w];
    for bi in 0..d.b {
        for o in 0..d.c_out {
            let obase = (bi * d.c_out + o) * d.oh * d.ow;
            let grp = o / cout_g;
            for ig in 0..cin_g {
                let ci = grp * cin_g + ig;
                let xbase = (bi * d.c_in + ci) * d.h * d.w;
                let kbase = (o * cin_g + ig) * d.k * d.k;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let kv = kernel[kbase + ky * d.k + kx];
                        let (oy0, oy1) = row_range(d.oh, d.h, ky, d.pad);
                        let (ox0, ox1) = row_range(d.ow, d.w, kx, d.pad);
                        for oy in oy0..oy1 {
                            let iy = oy + ky - d.pad;
                            let grow = obase + oy * d.ow;
                            let xrow = xbase + iy * d.w + (ox0 + kx - d.pad);
                            let (dst, src) =
                                (&mut gx[xrow..xrow + (ox1 - ox0)], &g[grow + ox0..grow + ox1]);
                            for (dv, &gv) in dst.iter_mut().zip(src) {
                                *dv += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![d.b, d.c_in, d.h, d.w], gx)
}

fn conv_grad_kernel<T: Scalar>(g: &[T], x: &[T], d: &ConvDims) -> Tensor<T> {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let mut gk = vec![T::zero(); d.c_out * cin_g * d.k * d.k];
    for bi in 0..d.b {
        for o in 0..d.c_out {
            let obase = (bi * d.c_out + o) * d.oh * d.ow;
            let grp = o / cout_g;
            for ig in 0..cin_g {
                let ci = grp * cin_g + ig;
                let xbase = (bi * d.c_in + ci) * d.h * d.w;
                let kbase = (o * cin_g + ig) * d.k * d.k;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let (oy0, oy1) = row_range(d.oh, d.h, ky, d.pad);
                        let (ox0, ox1) = row_range(d.ow, d.w, kx, d.pad);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy + ky - d.pad;
                            let grow = obase + oy * d.ow;
                            let xrow = xbase + iy * d.w + (ox0 + kx - d.pad);
                            let (gs, xs) = (&g[grow + ox0..grow + ox1], &x[xrow..xrow + (ox1 - ox0)]);
                            for (&gv, &xv) in gs.iter().zip(xs) {
                                acc += gv * xv;
                            }
                        }
                        gk[kbase + ky * d.k + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![d.c_out, cin_g, d.k, d.k], gk)
}

fn conv_grad_bias<T: Scalar>(g: &[T], d: &ConvDims) -> Tensor<T> {
    let plane = d.oh * d.ow;
    let mut gb = vec![T::zero(); d.c_out];
    for bi in 0..d.b {
        for o in 0..d.c_out {
            let base = (bi * d.c_out + o) * plane;
            let mut acc = T::zero();
            for &v in &g[base..base + plane] {
                acc += v;
            }
            gb[o] += acc;
        }
    }
    Tensor::from_vec(vec![d.c_out], gb)
}

// ── Layer norm ──────────────────────────────────────────────────────────

/// Default ε used by every layer norm in the network.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone)]
pub struct LayerNormParams<T: Scalar> {
    /// `[C]`
    pub gamma: Tensor<T>,
    /// `[C]`
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(c: usize) -> Self {
        LayerNormParams { gamma: Tensor::ones(&[c]), beta: Tensor::zeros(&[c]), eps: LN_EPS }
    }
}

/// Normalise over the channel axis of `[B, C, H, W]`, independently at each
/// spatial position. Variance is the biased (1/C) estimator; ε sits inside
/// the square root.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dimension {
            op: "layer_norm",
            detail: format!("input must be [B, C, H, W], got {xs:?}"),
        });
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if p.gamma.shape() != [c] || p.beta.shape() != [c] {
        return Err(Error::Dimension {
            op: "layer_norm",
            detail: format!(
                "gamma {:?} / beta {:?} vs {c} channels",
                p.gamma.shape(),
                p.beta.shape()
            ),
        });
    }
    let plane = h * w;
    let inv_c = T::one() / T::from_f64(c as f64);
    let eps = T::from_f64(p.eps);
    let (xd, gd, bd) = (x.data(), p.gamma.data(), p.beta.data());
    let mut out = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); b * plane];
    for bi in 0..b {
        let base = bi * c * plane;
        for s in 0..plane {
            let mut mean = T::zero();
            for ci in 0..c {
                mean += xd[base + ci * plane + s];
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for ci in 0..c {
                let d = xd[base + ci * plane + s] - mean;
                var += d * d;
            }
            var = var * inv_c;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[bi * plane + s] = inv;
            for ci in 0..c {
                let idx = base + ci * plane + s;
                let xh = (xd[idx] - mean) * inv;
                xhat[idx] = xh;
                out[idx] = gd[ci] * xh + bd[ci];
            }
        }
    }
    let out = Tensor::from_vec(xs.to_vec(), out);
    let xhat = Tensor::from_vec(xs.to_vec(), xhat);
    let gamma = p.gamma.detach();
    Ok(record_op("layer_norm", &[x, &p.gamma, &p.beta], out, move |g, need| {
        let gdat = g.data();
        let xh = xhat.data();
        let gam = gamma.data();
        let gx = need[0].then(|| {
            let mut gx = vec![T::zero(); xh.len()];
            for bi in 0..b {
                let base = bi * c * plane;
                for s in 0..plane {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for ci in 0..c {
                        let idx = base + ci * plane + s;
                        let gh = gdat[idx] * gam[ci];
                        m1 += gh;
                        m2 += gh * xh[idx];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    let inv = inv_std[bi * plane + s];
                    for ci in 0..c {
                        let idx = base + ci * plane + s;
                        let gh = gdat[idx] * gam[ci];
                        gx[idx] = (gh - m1 - xh[idx] * m2) * inv;
                    }
                }
            }
            Tensor::from_vec(vec![b, c, h, w], gx)
        });
        let ggamma = need[1].then(|| {
            let mut gg = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let mut acc = T::zero();
                    for s in 0..plane {
                        acc += gdat[base + s] * xh[base + s];
                    }
                    gg[ci] += acc;
                }
            }
            Tensor::from_vec(vec![c], gg)
        });
        let gbeta = need[2].then(|| {
            let mut gb = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let mut acc = T::zero();
                    for s in 0..plane {
                        acc += gdat[base + s];
                    }
                    gb[ci] += acc;
                }
            }
            Tensor::from_vec(vec![c], gb)
        });
        vec![gx, ggamma, gbeta]
    }))
}

// ── Pointwise nonlinearities ────────────────────────────────────────────

/// Exact (erf-based) GELU: `x · Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let phi_cdf = move |v: T| half * (T::one() + (v * inv_sqrt2).erf());
    let data = x.data().iter().map(|&v| v * phi_cdf(v)).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data);
    let saved = x.detach();
    record_op("gelu", &[x], out, move |g, _| {
        let inv_sqrt2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let gd = g.data();
        let xd = saved.data();
        let data = gd
            .iter()
            .zip(xd)
            .map(|(&gv, &xv)| {
                let pdf = inv_sqrt2pi * (-xv * xv * half).exp();
                gv * (phi_cdf(xv) + xv * pdf)
            })
            .collect();
        vec![Some(Tensor::from_vec(saved.shape().to_vec(), data))]
    })
}

/// Numerically-stable softmax over the last axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape().to_vec();
    let l = *shape.last().expect("softmax_lastdim: rank must be >= 1");
    assert!(l > 0, "softmax_lastdim: empty last axis");
    let rows = x.numel() / l;
    let xd = x.data();
    let mut data = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &xd[r * l..(r + 1) * l];
        let mut mx = row[0];
        for &v in row {
            mx = mx.max(v);
        }
        let out_row = &mut data[r * l..(r + 1) * l];
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for o in out_row.iter_mut() {
            *o = *o * inv;
        }
    }
    let out = Tensor::from_vec(shape.clone(), data);
    let y = out.clone();
    record_op("softmax", &[x], out, move |g, _| {
        let gd = g.data();
        let yd = y.data();
        let mut gx = vec![T::zero(); yd.len()];
        for r in 0..rows {
            let (gs, ys) = (&gd[r * l..(r + 1) * l], &yd[r * l..(r + 1) * l]);
            let mut dot = T::zero();
            for (&gv, &yv) in gs.iter().zip(ys) {
                dot += gv * yv;
            }
            for ((o, &gv), &yv) in gx[r * l..(r + 1) * l].iter_mut().zip(gs).zip(ys) {
                *o = yv * (gv - dot);
            }
        }
        vec![Some(Tensor::from_vec(y.shape().to_vec(), gx))]
    })
}

// ── Pixel shuffle / unshuffle ───────────────────────────────────────────

/// `[B, C, H, W] → [B, C/r², H·r, W·r]`;
/// `out[b, c, y·r+dy, x·r+dx] = in[b, c·r² + dy·r + dx, y, x]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dimension {
            op: "pixel_shuffle",
            detail: format!("input must be [B, C, H, W], got {xs:?}"),
        });
    }
    if r == 0 || xs[1] % (r * r) != 0 {
        return Err(Error::Contract {
            op: "pixel_shuffle",
            detail: format!("channels {} not divisible by r²={}", xs[1], r * r),
        });
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let co = c / (r * r);
    let data = shuffle_kernel(x.data(), b, co, h, w, r, true);
    let out = Tensor::from_vec(vec![b, co, h * r, w * r], data);
    Ok(record_op("pixel_shuffle", &[x], out, move |g, _| {
        vec![Some(Tensor::from_vec(
            vec![b, c, h, w],
            shuffle_kernel(g.data(), b, co, h, w, r, false),
        ))]
    }))
}

/// `[B, C, H, W] → [B, C·r², H/r, W/r]`; exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dimension {
            op: "pixel_unshuffle",
            detail: format!("input must be [B, C, H, W], got {xs:?}"),
        });
    }
    if r == 0 || xs[2] % r != 0 || xs[3] % r != 0 {
        return Err(Error::Contract {
            op: "pixel_unshuffle",
            detail: format!("spatial {}x{} not divisible by r={r}", xs[2], xs[3]),
        });
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (h / r, w / r);
    let data = shuffle_kernel(x.data(), b, c, ho, wo, r, false);
    let out = Tensor::from_vec(vec![b, c * r * r, ho, wo], data);
    Ok(record_op("pixel_unshuffle", &[x], out, move |g, _| {
        vec![Some(Tensor::from_vec(
            vec![b, c, h, w],
            shuffle_kernel(g.data(), b, c, ho, wo, r, true),
        ))]
    }))
}

/// Shared mover. `c`, `h`, `w` describe the *coarse* side (fewer pixels,
/// more channels is `c·r²` at `h×w`; the fine side is `c` at `hr×wr`).
/// `to_fine` selects direction.
fn shuffle_kernel<T: Scalar>(
    src: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    to_fine: bool,
) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    let (hr, wr) = (h * r, w * r);
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let coarse_c = ci * r * r + dy * r + dx;
                    let coarse_base = ((bi * c * r * r) + coarse_c) * h * w;
                    let fine_base = (bi * c + ci) * hr * wr;
                    for y in 0..h {
                        for x in 0..w {
                            let coarse = coarse_base + y * w + x;
                            let fine = fine_base + (y * r + dy) * wr + (x * r + dx);
                            if to_fine {
                                dst[fine] = src[coarse];
                            } else {
                                dst[coarse] = src[fine];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}
