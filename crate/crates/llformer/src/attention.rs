//! Multi-head self-attention variants. The workhorse is *axis* attention:
//! instead of attending over all H·W positions at once (quadratic in the
//! pixel count), it attends along the height axis — every (batch, head,
//! column) slice is its own sequence of length H — and then along the width
//! axis. A full-spatial baseline is kept for equivalence tests and
//! complexity comparison, plus a cross-layer fusion block that attends over
//! N whole feature maps.

use crate::error::{Error, Result};
use crate::nnops::{conv2d, softmax_lastdim, ConvWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 1×1 pointwise conv followed by a 3×3 depthwise conv, both bias-free.
#[derive(Clone)]
pub struct PwDwProj<T: Scalar> {
    pub point: ConvWeights<T>,
    pub depth: ConvWeights<T>,
}

impl<T: Scalar> PwDwProj<T> {
    pub fn new(point: ConvWeights<T>, depth: ConvWeights<T>) -> Result<Self> {
        let c = point.c_out();
        let ok = point.kernel_size() == 1
            && point.groups == 1
            && point.bias.is_none()
            && depth.kernel_size() == 3
            && depth.groups == c
            && depth.c_in() == c
            && depth.c_out() == c
            && depth.bias.is_none();
        if !ok {
            return Err(Error::Contract {
                op: "pw_dw_proj",
                detail: format!(
                    "need bias-free 1x1 (groups 1) then 3x3 depthwise over {c} channels; got \
                     point {:?} groups {} bias {}, depth {:?} groups {} bias {}",
                    point.kernel.shape(),
                    point.groups,
                    point.bias.is_some(),
                    depth.kernel.shape(),
                    depth.groups,
                    depth.bias.is_some(),
                ),
            });
        }
        Ok(PwDwProj { point, depth })
    }

    pub fn channels(&self) -> usize {
        self.point.c_out()
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(&conv2d(x, &self.point, 0)?, &self.depth, 1)
    }
}

#[derive(Clone)]
pub struct AxisAttentionParams<T: Scalar> {
    pub query: PwDwProj<T>,
    pub key: PwDwProj<T>,
    pub value: PwDwProj<T>,
    /// 1×1 output projection, with bias.
    pub output: ConvWeights<T>,
    pub heads: usize,
    /// Single-element softmax temperature; pass a tracked tensor to learn it.
    pub alpha: Tensor<T>,
}

impl<T: Scalar> AxisAttentionParams<T> {
    pub fn new(
        query: PwDwProj<T>,
        key: PwDwProj<T>,
        value: PwDwProj<T>,
        output: ConvWeights<T>,
        heads: usize,
        alpha: Tensor<T>,
    ) -> Result<Self> {
        let c = query.channels();
        if key.channels() != c || value.channels() != c {
            return Err(Error::Dimension {
                op: "axis_attention",
                detail: format!(
                    "q/k/v widths differ: {c}/{}/{}",
                    key.channels(),
                    value.channels()
                ),
            });
        }
        if output.kernel_size() != 1 || output.c_in() != c || output.c_out() != c
            || output.groups != 1 || output.bias.is_none()
        {
            return Err(Error::Contract {
                op: "axis_attention",
                detail: format!(
                    "output must be a biased 1x1 {c}->{c} conv, got {:?} bias {}",
                    output.kernel.shape(),
                    output.bias.is_some()
                ),
            });
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Contract {
                op: "axis_attention",
                detail: format!("heads {heads} must divide {c} channels"),
            });
        }
        if alpha.numel() != 1 || alpha.data()[0] <= T::zero() {
            return Err(Error::Contract {
                op: "axis_attention",
                detail: "alpha must be a single positive value".into(),
            });
        }
        Ok(AxisAttentionParams { query, key, value, output, heads, alpha })
    }

    /// The pinned default temperature √(C/heads).
    pub fn default_alpha(c: usize, heads: usize) -> Tensor<T> {
        Tensor::scalar(T::from_f64((c as f64 / heads as f64).sqrt()))
    }

    pub fn channels(&self) -> usize {
        self.query.channels()
    }
}

enum AttentionAxis {
    Height,
    Width,
    Full,
}

/// q/k/v are projected `[B, C, H, W]` maps; returns the attended map in the
/// same layout (before the output projection).
fn attention_core<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    alpha: &Tensor<T>,
    axis: AttentionAxis,
) -> Result<Tensor<T>> {
    let [b, c, h, w]: [usize; 4] = q.shape().try_into().expect("attention: 4D input");
    let d = c / heads;
    let split = |t: &Tensor<T>| t.reshape(&[b, heads, d, h, w]);

    // Move to [batch..., seq, d] where seq is the attended axis.
    let (to_seq, from_seq): (Vec<usize>, Vec<usize>) = match axis {
        AttentionAxis::Height => (vec![0, 1, 4, 3, 2], vec![0, 1, 4, 3, 2]),
        AttentionAxis::Width => (vec![0, 1, 3, 4, 2], vec![0, 1, 4, 2, 3]),
        AttentionAxis::Full => (vec![0, 1, 3, 2], vec![0, 1, 3, 2]),
    };
    let seq = |t: &Tensor<T>| -> Tensor<T> {
        match axis {
            AttentionAxis::Full => split(t).reshape(&[b, heads, d, h * w]).permute(&to_seq),
            _ => split(t).permute(&to_seq),
        }
    };

    let (qs, ks, vs) = (seq(q), seq(k), seq(v));
    let logits = qs.matmul_batched(&ks.transpose_last2())?.scale(&alpha.recip());
    let probs = softmax_lastdim(&logits);
    let attended = probs.matmul_batched(&vs)?;
    let merged = match axis {
        AttentionAxis::Full => attended.permute(&from_seq).reshape(&[b, heads, d, h, w]),
        _ => attended.permute(&from_seq),
    };
    Ok(merged.reshape(&[b, c, h, w]))
}

fn run_attention<T: Scalar>(
    x: &Tensor<T>,
    p: &AxisAttentionParams<T>,
    axis: AttentionAxis,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != p.channels() {
        return Err(Error::Dimension {
            op: "attention",
            detail: format!("input {xs:?} vs {} channels", p.channels()),
        });
    }
    let q = p.query.apply(x)?;
    let k = p.key.apply(x)?;
    let v = p.value.apply(x)?;
    let core = attention_core(&q, &k, &v, p.heads, &p.alpha, axis)?;
    conv2d(&core, &p.output, 0)
}

/// MSA along the height axis: each (batch, head, column) is a sequence of H
/// positions with C/heads features.
pub fn height_attention<T: Scalar>(x: &Tensor<T>, p: &AxisAttentionParams<T>) -> Result<Tensor<T>> {
    run_attention(x, p, AttentionAxis::Height)
}

/// MSA along the width axis (height's mirror).
pub fn width_attention<T: Scalar>(x: &Tensor<T>, p: &AxisAttentionParams<T>) -> Result<Tensor<T>> {
    run_attention(x, p, AttentionAxis::Width)
}

/// Axis-based MSA: height pass, then width pass on its output.
pub fn a_msa<T: Scalar>(
    x: &Tensor<T>,
    height: &AxisAttentionParams<T>,
    width: &AxisAttentionParams<T>,
) -> Result<Tensor<T>> {
    width_attention(&height_attention(x, height)?, width)
}

/// Full-spatial MSA over all H·W positions; quadratic in pixel count. Kept
/// as the reference the axis variants are measured against.
pub fn full_msa<T: Scalar>(x: &Tensor<T>, p: &AxisAttentionParams<T>) -> Result<Tensor<T>> {
    run_attention(x, p, AttentionAxis::Full)
}

// ── Cross-layer attention fusion ────────────────────────────────────────

#[derive(Clone)]
pub struct CafbParams<T: Scalar> {
    /// Projections over the stacked N·C channels.
    pub query: PwDwProj<T>,
    pub key: PwDwProj<T>,
    pub value: PwDwProj<T>,
    /// 1×1 N·C → N·C output projection, with bias.
    pub output: ConvWeights<T>,
    /// Number of fused feature maps N.
    pub layers: usize,
    pub alpha: Tensor<T>,
}

impl<T: Scalar> CafbParams<T> {
    pub fn new(
        query: PwDwProj<T>,
        key: PwDwProj<T>,
        value: PwDwProj<T>,
        output: ConvWeights<T>,
        layers: usize,
        alpha: Tensor<T>,
    ) -> Result<Self> {
        if layers < 2 {
            return Err(Error::Contract {
                op: "cafb",
                detail: format!("needs at least 2 layers, got {layers}"),
            });
        }
        let nc = query.channels();
        if nc % layers != 0 || key.channels() != nc || value.channels() != nc {
            return Err(Error::Dimension {
                op: "cafb",
                detail: format!(
                    "projections must cover layers*C channels: q/k/v {nc}/{}/{} for {layers} layers",
                    key.channels(),
                    value.channels()
                ),
            });
        }
        if output.kernel_size() != 1 || output.c_in() != nc || output.c_out() != nc
            || output.bias.is_none()
        {
            return Err(Error::Contract {
                op: "cafb",
                detail: format!("output must be a biased 1x1 {nc}->{nc} conv"),
            });
        }
        if alpha.numel() != 1 || alpha.data()[0] <= T::zero() {
            return Err(Error::Contract {
                op: "cafb",
                detail: "alpha must be a single positive value".into(),
            });
        }
        Ok(CafbParams { query, key, value, output, layers, alpha })
    }
}

/// Fuse N same-shaped `[B, C, H, W]` maps by attending across the layer
/// axis: each flattened map is one token, the N×N attention matrix mixes
/// them, and the stacked input is added back as a residual. Returns
/// `[B, N, C, H, W]`.
pub fn cafb<T: Scalar>(features: &[Tensor<T>], p: &CafbParams<T>) -> Result<Tensor<T>> {
    if features.len() != p.layers {
        return Err(Error::Contract {
            op: "cafb",
            detail: format!("got {} feature maps, params expect {}", features.len(), p.layers),
        });
    }
    let first = features[0].shape();
    if first.len() != 4 {
        return Err(Error::Dimension {
            op: "cafb",
            detail: format!("features must be [B, C, H, W], got {first:?}"),
        });
    }
    for f in features {
        if f.shape() != first {
            return Err(Error::Dimension {
                op: "cafb",
                detail: format!("feature shapes differ: {:?} vs {first:?}", f.shape()),
            });
        }
    }
    let (b, c, h, w) = (first[0], first[1], first[2], first[3]);
    let n = p.layers;
    if n * c != p.query.channels() {
        return Err(Error::Dimension {
            op: "cafb",
            detail: format!(
                "{n} layers of {c} channels vs projections over {}",
                p.query.channels()
            ),
        });
    }

    let refs: Vec<&Tensor<T>> = features.iter().collect();
    let stack = Tensor::cat(&refs, 1); // [B, N·C, H, W]
    let q = p.query.apply(&stack)?;
    let k = p.key.apply(&stack)?;
    let v = p.value.apply(&stack)?;

    let chw = c * h * w;
    let qm = q.reshape(&[b, n, chw]);
    let km = k.reshape(&[b, n, chw]);
    let vm = v.reshape(&[b, n, chw]);
    let logits = qm.matmul_batched(&km.transpose_last2())?.scale(&p.alpha.recip());
    let probs = softmax_lastdim(&logits); // [B, N, N], rows sum to 1
    let fused = probs.matmul_batched(&vm)?.reshape(&[b, n * c, h, w]);
    let out = conv2d(&fused, &p.output, 0)?.add(&stack);
    Ok(out.reshape(&[b, n, c, h, w]))
}

// ── Complexity accounting ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Height pass plus width pass.
    Axis,
    /// Full spatial attention.
    Full,
}

/// Multiply-accumulates spent on attention score and apply matmuls (the
/// surrounding projections are ordinary convs, counted separately). The
/// count is independent of the head split: per head both matmuls cost
/// 2·L²·d per sequence, and d·heads = C.
pub fn attention_mac_count(kind: AttentionKind, b: usize, c: usize, h: usize, w: usize) -> u128 {
    let (b, c, h, w) = (b as u128, c as u128, h as u128, w as u128);
    match kind {
        AttentionKind::Full => 2 * b * c * (h * w) * (h * w),
        AttentionKind::Axis => 2 * b * c * (h * h * w + w * w * h),
    }
}
