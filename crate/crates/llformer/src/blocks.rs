//! Composite blocks: the dual-gated feed-forward network, the axis
//! transformer block, and the resolution/skip plumbing between stages.

use crate::attention::{a_msa, AxisAttentionParams, PwDwProj};
use crate::error::{Error, Result};
use crate::nnops::{conv2d, gelu, layer_norm, pixel_shuffle, pixel_unshuffle, ConvWeights, LayerNormParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── Dual-gated feed-forward ─────────────────────────────────────────────

#[derive(Clone)]
pub struct DgfnParams<T: Scalar> {
    /// C → E expansion, E = expansion·C.
    pub branch1: PwDwProj<T>,
    pub branch2: PwDwProj<T>,
    /// 1×1 E → C projection back, with bias.
    pub output: ConvWeights<T>,
}

impl<T: Scalar> DgfnParams<T> {
    pub fn new(branch1: PwDwProj<T>, branch2: PwDwProj<T>, output: ConvWeights<T>) -> Result<Self> {
        let e = branch1.channels();
        if branch2.channels() != e {
            return Err(Error::Dimension {
                op: "dgfn",
                detail: format!("branch widths differ: {e} vs {}", branch2.channels()),
            });
        }
        if output.kernel_size() != 1 || output.c_in() != e || output.bias.is_none() {
            return Err(Error::Contract {
                op: "dgfn",
                detail: format!(
                    "output must be a biased 1x1 conv from {e} channels, got {:?} bias {}",
                    output.kernel.shape(),
                    output.bias.is_some()
                ),
            });
        }
        Ok(DgfnParams { branch1, branch2, output })
    }
}

/// Gate and project, no residual: `out_conv(φ(b1)⊙b2 + b1⊙φ(b2))` where
/// b1/b2 are the two expanded branches and φ is GELU. The transformer block
/// uses this directly and adds its own residual.
pub fn dgfn_core<T: Scalar>(x: &Tensor<T>, p: &DgfnParams<T>) -> Result<Tensor<T>> {
    let b1 = p.branch1.apply(x)?;
    let b2 = p.branch2.apply(x)?;
    let gated = gelu(&b1).mul(&b2).add(&b1.mul(&gelu(&b2)));
    conv2d(&gated, &p.output, 0)
}

/// Dual-gated feed-forward with residual: `dgfn_core(x) + x`.
pub fn dgfn<T: Scalar>(x: &Tensor<T>, p: &DgfnParams<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 4 || x.shape()[1] != p.output.c_out() {
        return Err(Error::Dimension {
            op: "dgfn",
            detail: format!("input {:?} vs output width {}", x.shape(), p.output.c_out()),
        });
    }
    Ok(dgfn_core(x, p)?.add(x))
}

// ── Axis transformer block ──────────────────────────────────────────────

#[derive(Clone)]
pub struct AtbParams<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub height: AxisAttentionParams<T>,
    pub width: AxisAttentionParams<T>,
    pub norm2: LayerNormParams<T>,
    pub dgfn: DgfnParams<T>,
}

/// Pre-norm transformer block:
/// `f = a_msa(LN(x)) + x; out = dgfn_core(LN(f)) + f`.
///
/// With every output projection zeroed both residual branches contribute
/// exactly nothing, so the block is the identity — a property the test
/// suite pins down bit-for-bit.
pub fn atb<T: Scalar>(x: &Tensor<T>, p: &AtbParams<T>) -> Result<Tensor<T>> {
    let attended = a_msa(&layer_norm(x, &p.norm1)?, &p.height, &p.width)?;
    let f = attended.add(x);
    let ff = dgfn_core(&layer_norm(&f, &p.norm2)?, &p.dgfn)?;
    Ok(ff.add(&f))
}

// ── Stage plumbing ──────────────────────────────────────────────────────

/// Halve resolution, double channels: 3×3 conv C → C/2, then 2×2
/// pixel-unshuffle (C/2 · 4 = 2C channels at H/2 × W/2). H and W must be
/// even.
pub fn downsample<T: Scalar>(x: &Tensor<T>, conv: &ConvWeights<T>) -> Result<Tensor<T>> {
    let c = check_4d("downsample", x)?;
    if c % 2 != 0 || conv.c_in() != c || conv.c_out() != c / 2 || conv.kernel_size() != 3 {
        return Err(Error::Contract {
            op: "downsample",
            detail: format!(
                "need a 3x3 {c}->{} conv on even channels, got {:?}",
                c / 2,
                conv.kernel.shape()
            ),
        });
    }
    pixel_unshuffle(&conv2d(x, conv, 1)?, 2)
}

/// Double resolution, halve channels: 3×3 conv C → 2C, then 2×2
/// pixel-shuffle (2C / 4 = C/2 channels at 2H × 2W).
pub fn upsample<T: Scalar>(x: &Tensor<T>, conv: &ConvWeights<T>) -> Result<Tensor<T>> {
    let c = check_4d("upsample", x)?;
    if conv.c_in() != c || conv.c_out() != 2 * c || conv.kernel_size() != 3 {
        return Err(Error::Contract {
            op: "upsample",
            detail: format!("need a 3x3 {c}->{} conv, got {:?}", 2 * c, conv.kernel.shape()),
        });
    }
    pixel_shuffle(&conv2d(x, conv, 1)?, 2)
}

/// Fuse a decoder map with its encoder skip: channel-concat then 1×1 conv.
pub fn skip_fuse<T: Scalar>(
    dec: &Tensor<T>,
    skip: &Tensor<T>,
    conv: &ConvWeights<T>,
) -> Result<Tensor<T>> {
    let cd = check_4d("skip_fuse", dec)?;
    let cs = check_4d("skip_fuse", skip)?;
    if dec.shape()[0] != skip.shape()[0]
        || dec.shape()[2..] != skip.shape()[2..]
    {
        return Err(Error::Dimension {
            op: "skip_fuse",
            detail: format!("maps disagree: {:?} vs {:?}", dec.shape(), skip.shape()),
        });
    }
    if conv.c_in() != cd + cs || conv.kernel_size() != 1 {
        return Err(Error::Contract {
            op: "skip_fuse",
            detail: format!(
                "need a 1x1 conv over {} channels, got {:?}",
                cd + cs,
                conv.kernel.shape()
            ),
        });
    }
    conv2d(&Tensor::cat(&[dec, skip], 1), conv, 0)
}

fn check_4d<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<usize> {
    if x.shape().len() != 4 {
        return Err(Error::Dimension {
            op,
            detail: format!("expected [B, C, H, W], got {:?}", x.shape()),
        });
    }
    Ok(x.shape()[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Scalar;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pwdw(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> PwDwProj<f64> {
        let point =
            ConvWeights::new(Tensor::rand_uniform(&[c_out, c_in, 1, 1], -0.5, 0.5, rng), None, 1)
                .unwrap();
        let depth =
            ConvWeights::new(Tensor::rand_uniform(&[c_out, 1, 3, 3], -0.5, 0.5, rng), None, c_out)
                .unwrap();
        PwDwProj::new(point, depth).unwrap()
    }

    fn conv(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvWeights<f64> {
        ConvWeights::new(
            Tensor::rand_uniform(&[c_out, c_in, k, k], -0.5, 0.5, rng),
            Some(Tensor::rand_uniform(&[c_out], -0.1, 0.1, rng)),
            1,
        )
        .unwrap()
    }

    fn dgfn_params(c: usize, e: usize, rng: &mut ChaCha8Rng) -> DgfnParams<f64> {
        DgfnParams::new(pwdw(c, e, rng), pwdw(c, e, rng), conv(e, c, 1, rng)).unwrap()
    }

    fn attn_params(c: usize, heads: usize, rng: &mut ChaCha8Rng) -> AxisAttentionParams<f64> {
        AxisAttentionParams::new(
            pwdw(c, c, rng),
            pwdw(c, c, rng),
            pwdw(c, c, rng),
            conv(c, c, 1, rng),
            heads,
            AxisAttentionParams::default_alpha(c, heads),
        )
        .unwrap()
    }

    fn atb_params(c: usize, heads: usize, rng: &mut ChaCha8Rng) -> AtbParams<f64> {
        AtbParams {
            norm1: LayerNormParams::identity(c),
            height: attn_params(c, heads, rng),
            width: attn_params(c, heads, rng),
            norm2: LayerNormParams::identity(c),
            dgfn: dgfn_params(c, 2 * c, rng),
        }
    }

    fn zero_conv<T: Scalar>(w: &mut ConvWeights<T>) {
        w.kernel = Tensor::zeros(w.kernel.shape());
        if let Some(b) = &w.bias {
            w.bias = Some(Tensor::zeros(b.shape()));
        }
    }

    #[test]
    fn dgfn_is_core_plus_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = dgfn_params(3, 6, &mut rng);
        let x = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let full = dgfn(&x, &p).unwrap();
        let manual = dgfn_core(&x, &p).unwrap().add(&x);
        assert_eq!(full, manual);
    }

    #[test]
    fn dgfn_gate_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let p = dgfn_params(2, 4, &mut rng);
        let x = Tensor::rand_uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b1 = p.branch1.apply(&x).unwrap();
        let b2 = p.branch2.apply(&x).unwrap();
        let phi = |t: &Tensor<f64>| gelu(t);
        let gate = phi(&b1).mul(&b2).add(&b1.mul(&phi(&b2)));
        let want = conv2d(&gate, &p.output, 0).unwrap();
        assert_eq!(dgfn_core(&x, &p).unwrap(), want);
        // gate is symmetric in the branches
        let swapped = phi(&b2).mul(&b1).add(&b2.mul(&phi(&b1)));
        for (a, b) in gate.data().iter().zip(swapped.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn atb_with_zeroed_projections_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut p = atb_params(4, 2, &mut rng);
        zero_conv(&mut p.height.output);
        zero_conv(&mut p.width.output);
        zero_conv(&mut p.dgfn.output);
        let x = Tensor::rand_uniform(&[2, 4, 5, 6], -1.0, 1.0, &mut rng);
        let y = atb(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn atb_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = atb_params(4, 2, &mut rng);
        let x = Tensor::rand_uniform(&[1, 4, 3, 3], -0.5, 0.5, &mut rng);
        let worst = grad_check(
            |xs| {
                let y = atb(&xs[0], &p).unwrap();
                y.mul(&y).mean_all()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn dgfn_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let p = dgfn_params(3, 6, &mut rng);
        let x = Tensor::rand_uniform(&[1, 3, 3, 4], -1.0, 1.0, &mut rng);
        let worst = grad_check(
            |xs| {
                let mut p2 = p.clone();
                p2.branch1.point.kernel = xs[1].clone();
                let y = dgfn(&xs[0], &p2).unwrap();
                y.mul(&y).mean_all()
            },
            &[x, p.branch1.point.kernel.detach()],
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn down_and_up_reshape_as_documented() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let x = Tensor::rand_uniform(&[2, 4, 6, 8], -1.0, 1.0, &mut rng);
        let down = downsample(&x, &conv(4, 2, 3, &mut rng)).unwrap();
        assert_eq!(down.shape(), &[2, 8, 3, 4]);
        let up = upsample(&down, &conv(8, 16, 3, &mut rng)).unwrap();
        assert_eq!(up.shape(), &[2, 4, 6, 8]);
    }

    #[test]
    fn down_up_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let dc = conv(2, 1, 3, &mut rng);
        let uc = conv(4, 8, 3, &mut rng);
        let worst = grad_check(
            |xs| {
                let d = downsample(&xs[0], &dc).unwrap();
                let u = upsample(&d, &uc).unwrap();
                u.mul(&u).mean_all()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn skip_fuse_concats_then_projects() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let dec = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let skip = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let c = conv(5, 3, 1, &mut rng);
        let fused = skip_fuse(&dec, &skip, &c).unwrap();
        assert_eq!(fused.shape(), &[1, 3, 4, 4]);
        let manual = conv2d(&Tensor::cat(&[&dec, &skip], 1), &c, 0).unwrap();
        assert_eq!(fused, manual);
    }

    #[test]
    fn stage_ops_validate_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]); // odd channels
        assert!(downsample(&x, &conv(3, 1, 3, &mut rng)).is_err());
        let y = Tensor::<f64>::zeros(&[1, 4, 5, 4]); // odd height
        assert!(downsample(&y, &conv(4, 2, 3, &mut rng)).is_err());
        let a = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 2, 3, 4]);
        assert!(skip_fuse(&a, &b, &conv(4, 2, 1, &mut rng)).is_err());
    }
}
