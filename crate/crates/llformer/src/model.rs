//! Full enhancement network: a hierarchical encoder–decoder of axis
//! transformer blocks with cross-layer fusion at the head and tail.
//!
//! Layout (channel width × resolution, C = `base_channels`):
//!
//! ```text
//! input ─ 3×3 proj ─ head ATBs ─ CAFB ─ enc0 (C, 1/1)
//!                                        ├─ down ─ enc1 (2C, 1/2)
//!                                        │          ├─ down ─ enc2 (4C, 1/4)
//!                                        │          │          ├─ down ─ enc3 (8C, 1/8)
//!                                        │          │          └← dec2 (8C, 1/4) ← up+fuse
//!                                        │          └←── dec1 (4C, 1/2) ← up+fuse
//!                                        └←──── dec0 (2C, 1/1) ← up+fuse
//! dec0 ─ tail ATBs ─ CAFB ─ 3×3 recon ─ output
//! ```
//!
//! Each decoder stage runs at twice the width of the encoder stage it pairs
//! with, so the skip concatenations are 8C, 6C, 3C wide before their 1×1
//! fuse convs.
//!
//! Inputs are reflect-padded to a multiple of 8 and cropped back, so any
//! size from 8×8 up works. Parameters live in one flat table whose order is
//! frozen by the plan walk below; checkpoints and optimizer state index
//! into it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cafb, AttentionKind, AxisAttentionParams, CafbParams, PwDwProj};
use crate::blocks::{atb, downsample, skip_fuse, upsample, AtbParams, DgfnParams};
use crate::error::{Error, Result};
use crate::nnops::{conv2d, ConvWeights, LayerNormParams, LN_EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel width C of the first stage.
    pub base_channels: usize,
    pub input_channels: usize,
    /// Blocks per encoder stage (widths C, 2C, 4C, 8C).
    pub encoder_depths: [usize; 4],
    pub encoder_heads: [usize; 4],
    /// Blocks per decoder stage, index 0 = full resolution (widths 2C, 2C, 4C).
    pub decoder_depths: [usize; 3],
    pub decoder_heads: [usize; 3],
    /// ATBs before the encoder and after the decoder.
    pub head_tail_blocks: usize,
    /// Feature maps fused by each CAFB (the last N head/tail block outputs).
    pub cafb_layers: usize,
    /// Feed-forward expansion factor E/C.
    pub dgfn_expansion: f64,
    /// Learn the softmax temperatures instead of fixing them at √d_k.
    pub learnable_alpha: bool,
    /// Add the input back onto the reconstruction.
    pub global_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            input_channels: 3,
            encoder_depths: [2, 4, 8, 16],
            encoder_heads: [1, 2, 4, 8],
            decoder_depths: [2, 4, 8],
            decoder_heads: [1, 2, 4],
            head_tail_blocks: 3,
            cafb_layers: 3,
            dgfn_expansion: 2.0,
            learnable_alpha: false,
            global_residual: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration that still exercises every code path; used by the
    /// overfit tests and the browser demo.
    pub fn desk() -> Self {
        ModelConfig {
            base_channels: 8,
            encoder_depths: [1, 1, 2, 2],
            encoder_heads: [1, 1, 2, 2],
            decoder_depths: [1, 1, 2],
            decoder_heads: [1, 1, 2],
            ..Default::default()
        }
    }

    pub fn enc_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Decoder stage widths are 2C, 4C, 8C for stages 0, 1, 2 — double the
    /// encoder width at the same resolution; the fuse conv maps each concat
    /// back to this width.
    pub fn dec_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage + 1)
    }

    fn expanded(&self, c: usize) -> usize {
        (c as f64 * self.dgfn_expansion).round() as usize
    }

    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_channels == 0 {
            problems.push("base_channels must be at least 1".to_string());
        }
        if self.input_channels == 0 {
            problems.push("input_channels must be at least 1".to_string());
        }
        if !(self.dgfn_expansion > 0.0) {
            problems.push(format!("dgfn_expansion {} must be positive", self.dgfn_expansion));
        }
        for (i, &d) in self.encoder_depths.iter().enumerate() {
            if d == 0 {
                problems.push(format!("encoder_depths[{i}] must be at least 1"));
            }
        }
        for (i, &d) in self.decoder_depths.iter().enumerate() {
            if d == 0 {
                problems.push(format!("decoder_depths[{i}] must be at least 1"));
            }
        }
        if self.base_channels > 0 {
            for i in 0..4 {
                let c = self.enc_channels(i);
                let h = self.encoder_heads[i];
                if h == 0 || c % h != 0 {
                    problems.push(format!(
                        "encoder_heads[{i}]={h} must divide stage width {c}"
                    ));
                }
            }
            for i in 0..3 {
                let c = self.dec_channels(i);
                let h = self.decoder_heads[i];
                if h == 0 || c % h != 0 {
                    problems.push(format!(
                        "decoder_heads[{i}]={h} must divide stage width {c}"
                    ));
                }
            }
            if self.dgfn_expansion > 0.0 {
                let mut widths: Vec<usize> = (0..4).map(|i| self.enc_channels(i)).collect();
                widths.push(self.dec_channels(0));
                for c in widths {
                    let e = c as f64 * self.dgfn_expansion;
                    if e.fract() != 0.0 || e < 1.0 {
                        problems.push(format!(
                            "dgfn_expansion {} gives non-integer width {e} at {c} channels",
                            self.dgfn_expansion
                        ));
                    }
                }
            }
        }
        if self.cafb_layers < 2 {
            problems.push(format!("cafb_layers {} must be at least 2", self.cafb_layers));
        }
        if self.head_tail_blocks < self.cafb_layers {
            problems.push(format!(
                "head_tail_blocks {} must be at least cafb_layers {}",
                self.head_tail_blocks, self.cafb_layers
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

// ── Parameter plan ──────────────────────────────────────────────────────
// The plan pins the flat parameter-table order. Refs hold table indices;
// specs hold shape + init + component label. Rebuilding from the same
// config always yields the same walk, which is what makes checkpoints and
// seeded rebuilds bit-stable.

#[derive(Clone, Copy)]
enum Init {
    /// Truncated normal, std √(1/fan_in) from the kernel shape — keeps
    /// feature magnitude roughly constant through the depth (the gated
    /// feed-forward multiplies features pairwise, so the safe gain is at
    /// most one).
    Kernel,
    Zeros,
    Ones,
    Const(f64),
}

struct ParamSpec {
    shape: Vec<usize>,
    init: Init,
    label: String,
}

#[derive(Clone)]
struct ConvRef {
    kernel: usize,
    bias: Option<usize>,
    groups: usize,
}

#[derive(Clone)]
struct PwDwRef {
    point: ConvRef,
    depth: ConvRef,
}

#[derive(Clone)]
enum AlphaRef {
    Fixed(f64),
    Learned(usize),
}

#[derive(Clone)]
struct AttnRef {
    q: PwDwRef,
    k: PwDwRef,
    v: PwDwRef,
    out: ConvRef,
    heads: usize,
    alpha: AlphaRef,
}

#[derive(Clone)]
struct LnRef {
    gamma: usize,
    beta: usize,
}

#[derive(Clone)]
struct DgfnRef {
    b1: PwDwRef,
    b2: PwDwRef,
    out: ConvRef,
}

#[derive(Clone)]
struct AtbRef {
    n1: LnRef,
    h: AttnRef,
    w: AttnRef,
    n2: LnRef,
    ff: DgfnRef,
}

#[derive(Clone)]
struct CafbRef {
    q: PwDwRef,
    k: PwDwRef,
    v: PwDwRef,
    out: ConvRef,
    layers: usize,
    alpha: AlphaRef,
}

#[derive(Clone)]
struct EncStage {
    down: Option<ConvRef>,
    atbs: Vec<AtbRef>,
}

#[derive(Clone)]
struct DecStage {
    /// Paper-style stage index (0 = full resolution); stages are stored and
    /// run deepest-first.
    stage: usize,
    up: ConvRef,
    fuse: ConvRef,
    atbs: Vec<AtbRef>,
}

struct Arch {
    proj: ConvRef,
    head: Vec<AtbRef>,
    head_cafb: CafbRef,
    enc: Vec<EncStage>,
    dec: Vec<DecStage>,
    tail: Vec<AtbRef>,
    tail_cafb: CafbRef,
    recon: ConvRef,
}

struct Builder {
    specs: Vec<ParamSpec>,
    group: String,
    learnable_alpha: bool,
}

impl Builder {
    fn group(&mut self, g: impl Into<String>) {
        self.group = g.into();
    }

    fn push(&mut self, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { shape, init, label: self.group.clone() });
        self.specs.len() - 1
    }

    fn conv(&mut self, c_in: usize, c_out: usize, k: usize, groups: usize, bias: bool) -> ConvRef {
        let kernel = self.push(vec![c_out, c_in / groups, k, k], Init::Kernel);
        let bias = bias.then(|| self.push(vec![c_out], Init::Zeros));
        ConvRef { kernel, bias, groups }
    }

    /// A conv whose kernel starts at zero. Used for every conv that feeds a
    /// residual add (attention/feed-forward/fusion output projections, and
    /// the reconstruction conv): the model then starts as the exact identity
    /// map, so early training adds signal instead of first unlearning
    /// initialization noise. The zeroed layer itself gets a first-order
    /// gradient (its input features are random), so it leaves zero on the
    /// first step.
    fn conv_zero(&mut self, c_in: usize, c_out: usize, k: usize, groups: usize, bias: bool) -> ConvRef {
        let kernel = self.push(vec![c_out, c_in / groups, k, k], Init::Zeros);
        let bias = bias.then(|| self.push(vec![c_out], Init::Zeros));
        ConvRef { kernel, bias, groups }
    }

    fn pwdw(&mut self, c_in: usize, c_out: usize) -> PwDwRef {
        PwDwRef {
            point: self.conv(c_in, c_out, 1, 1, false),
            depth: self.conv(c_out, c_out, 3, c_out, false),
        }
    }

    fn ln(&mut self, c: usize) -> LnRef {
        LnRef { gamma: self.push(vec![c], Init::Ones), beta: self.push(vec![c], Init::Zeros) }
    }

    fn alpha(&mut self, default: f64) -> AlphaRef {
        if self.learnable_alpha {
            AlphaRef::Learned(self.push(vec![1], Init::Const(default)))
        } else {
            AlphaRef::Fixed(default)
        }
    }

    fn attn(&mut self, c: usize, heads: usize) -> AttnRef {
        AttnRef {
            q: self.pwdw(c, c),
            k: self.pwdw(c, c),
            v: self.pwdw(c, c),
            out: self.conv_zero(c, c, 1, 1, true),
            heads,
            alpha: self.alpha((c as f64 / heads as f64).sqrt()),
        }
    }

    fn dgfn(&mut self, c: usize, e: usize) -> DgfnRef {
        DgfnRef {
            b1: self.pwdw(c, e),
            b2: self.pwdw(c, e),
            out: self.conv_zero(e, c, 1, 1, true),
        }
    }

    fn atb(&mut self, c: usize, heads: usize, e: usize) -> AtbRef {
        AtbRef {
            n1: self.ln(c),
            h: self.attn(c, heads),
            w: self.attn(c, heads),
            n2: self.ln(c),
            ff: self.dgfn(c, e),
        }
    }

    fn cafb(&mut self, layers: usize, c: usize) -> CafbRef {
        let nc = layers * c;
        CafbRef {
            q: self.pwdw(nc, nc),
            k: self.pwdw(nc, nc),
            v: self.pwdw(nc, nc),
            out: self.conv_zero(nc, nc, 1, 1, true),
            layers,
            alpha: self.alpha((nc as f64).sqrt()),
        }
    }
}

fn build_plan(cfg: &ModelConfig) -> Result<(Arch, Vec<ParamSpec>)> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let mut b = Builder {
        specs: Vec::new(),
        group: String::new(),
        learnable_alpha: cfg.learnable_alpha,
    };

    b.group("proj");
    let proj = b.conv(cfg.input_channels, c, 3, 1, true);

    b.group("head");
    let head = (0..cfg.head_tail_blocks)
        .map(|_| b.atb(c, cfg.encoder_heads[0], cfg.expanded(c)))
        .collect();
    b.group("head_cafb");
    let head_cafb = b.cafb(cfg.cafb_layers, c);

    let mut enc = Vec::new();
    for i in 0..4 {
        b.group(format!("enc{i}"));
        let ci = cfg.enc_channels(i);
        let down = (i > 0).then(|| {
            let prev = cfg.enc_channels(i - 1);
            b.conv(prev, prev / 2, 3, 1, true)
        });
        let atbs = (0..cfg.encoder_depths[i])
            .map(|_| b.atb(ci, cfg.encoder_heads[i], cfg.expanded(ci)))
            .collect();
        enc.push(EncStage { down, atbs });
    }

    let mut dec = Vec::new();
    for stage in (0..3).rev() {
        b.group(format!("dec{stage}"));
        // Channels entering from below: the 8C bottleneck into stage 2,
        // then each deeper stage's own output width.
        let c_in = if stage == 2 { cfg.enc_channels(3) } else { cfg.dec_channels(stage + 1) };
        let up = b.conv(c_in, 2 * c_in, 3, 1, true);
        let after_up = c_in / 2;
        let skip_c = cfg.enc_channels(stage);
        let c_out = cfg.dec_channels(stage);
        let fuse = b.conv(after_up + skip_c, c_out, 1, 1, true);
        let atbs = (0..cfg.decoder_depths[stage])
            .map(|_| b.atb(c_out, cfg.decoder_heads[stage], cfg.expanded(c_out)))
            .collect();
        dec.push(DecStage { stage, up, fuse, atbs });
    }

    let tc = cfg.dec_channels(0);
    b.group("tail");
    let tail = (0..cfg.head_tail_blocks)
        .map(|_| b.atb(tc, cfg.decoder_heads[0], cfg.expanded(tc)))
        .collect();
    b.group("tail_cafb");
    let tail_cafb = b.cafb(cfg.cafb_layers, tc);

    b.group("recon");
    let recon = b.conv_zero(tc, cfg.input_channels, 3, 1, true);

    Ok((
        Arch { proj, head, head_cafb, enc, dec, tail, tail_cafb, recon },
        b.specs,
    ))
}

// ── Model ───────────────────────────────────────────────────────────────

pub struct Model<T: Scalar> {
    config: ModelConfig,
    arch: Arch,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Build with truncated-normal(0.02) conv kernels, zero biases, identity
    /// layer norms. Same seed, same table, bit for bit.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let (arch, specs) = build_plan(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Kernel => {
                    let fan_in: usize = s.shape[1..].iter().product();
                    Tensor::rand_trunc_normal(&s.shape, (fan_in as f64).recip().sqrt(), &mut rng)
                }
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
                Init::Const(v) => Tensor::full(&s.shape, T::from_f64(v)),
            })
            .collect();
        Ok(Model { config, arch, specs, params })
    }

    /// Rebuild around an existing parameter table (checkpoint load).
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let (arch, specs) = build_plan(&config)?;
        if params.len() != specs.len() {
            return Err(Error::Contract {
                op: "model_from_params",
                detail: format!("table has {} tensors, plan needs {}", params.len(), specs.len()),
            });
        }
        for (i, (p, s)) in params.iter().zip(&specs).enumerate() {
            if p.shape() != s.shape {
                return Err(Error::Contract {
                    op: "model_from_params",
                    detail: format!(
                        "param {i} ({}) has shape {:?}, plan needs {:?}",
                        s.label,
                        p.shape(),
                        s.shape
                    ),
                });
            }
        }
        Ok(Model { config, arch, specs, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The flat parameter table, in frozen plan order.
    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Replace the whole table (optimizer steps, weight loading). Shapes
    /// must match the plan.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) {
        assert_eq!(params.len(), self.specs.len(), "set_params: wrong table length");
        for (p, s) in params.iter().zip(&self.specs) {
            assert_eq!(p.shape(), s.shape, "set_params: shape mismatch for {}", s.label);
        }
        self.params = params;
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.numel() as u64).sum()
    }

    /// Per-parameter component label, aligned with `params()`.
    pub fn param_labels(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.label.as_str()).collect()
    }

    // ── Forward ─────────────────────────────────────────────────────────

    fn conv_w(&self, table: &[Tensor<T>], r: &ConvRef) -> ConvWeights<T> {
        ConvWeights {
            kernel: table[r.kernel].clone(),
            bias: r.bias.map(|i| table[i].clone()),
            groups: r.groups,
        }
    }

    fn pwdw_w(&self, table: &[Tensor<T>], r: &PwDwRef) -> PwDwProj<T> {
        PwDwProj { point: self.conv_w(table, &r.point), depth: self.conv_w(table, &r.depth) }
    }

    fn alpha_w(&self, table: &[Tensor<T>], r: &AlphaRef) -> Tensor<T> {
        match r {
            AlphaRef::Fixed(v) => Tensor::scalar(T::from_f64(*v)),
            AlphaRef::Learned(i) => table[*i].clone(),
        }
    }

    fn attn_w(&self, table: &[Tensor<T>], r: &AttnRef) -> AxisAttentionParams<T> {
        AxisAttentionParams {
            query: self.pwdw_w(table, &r.q),
            key: self.pwdw_w(table, &r.k),
            value: self.pwdw_w(table, &r.v),
            output: self.conv_w(table, &r.out),
            heads: r.heads,
            alpha: self.alpha_w(table, &r.alpha),
        }
    }

    fn ln_w(&self, table: &[Tensor<T>], r: &LnRef) -> LayerNormParams<T> {
        LayerNormParams {
            gamma: table[r.gamma].clone(),
            beta: table[r.beta].clone(),
            eps: LN_EPS,
        }
    }

    fn atb_w(&self, table: &[Tensor<T>], r: &AtbRef) -> AtbParams<T> {
        AtbParams {
            norm1: self.ln_w(table, &r.n1),
            height: self.attn_w(table, &r.h),
            width: self.attn_w(table, &r.w),
            norm2: self.ln_w(table, &r.n2),
            dgfn: DgfnParams {
                branch1: self.pwdw_w(table, &r.ff.b1),
                branch2: self.pwdw_w(table, &r.ff.b2),
                output: self.conv_w(table, &r.ff.out),
            },
        }
    }

    fn cafb_w(&self, table: &[Tensor<T>], r: &CafbRef) -> CafbParams<T> {
        CafbParams {
            query: self.pwdw_w(table, &r.q),
            key: self.pwdw_w(table, &r.k),
            value: self.pwdw_w(table, &r.v),
            output: self.conv_w(table, &r.out),
            layers: r.layers,
            alpha: self.alpha_w(table, &r.alpha),
        }
    }

    /// Fuse the last N block outputs and reduce the refined stack back to a
    /// single map by averaging over the layer axis.
    fn fuse_outputs(
        &self,
        table: &[Tensor<T>],
        r: &CafbRef,
        outs: &[Tensor<T>],
    ) -> Result<Tensor<T>> {
        let n = r.layers;
        let feats = &outs[outs.len() - n..];
        let stack = cafb(feats, &self.cafb_w(table, r))?; // [B, N, C, H, W]
        let s = stack.shape().to_vec();
        let mut acc = stack.narrow(1, 0, 1);
        for i in 1..n {
            acc = acc.add(&stack.narrow(1, i, 1));
        }
        Ok(acc
            .mul_scalar(T::one() / T::from_f64(n as f64))
            .reshape(&[s[0], s[2], s[3], s[4]]))
    }

    /// Forward through an explicit table (the trainer passes tracked leaves;
    /// inference passes the stored table).
    pub fn forward_with(&self, table: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = x.shape().to_vec();
        if xs.len() != 4 || xs[1] != self.config.input_channels {
            return Err(Error::Dimension {
                op: "model_forward",
                detail: format!(
                    "input must be [B, {}, H, W], got {xs:?}",
                    self.config.input_channels
                ),
            });
        }
        let (h, w) = (xs[2], xs[3]);
        if h < 8 || w < 8 {
            return Err(Error::Contract {
                op: "model_forward",
                detail: format!("spatial size {h}x{w} is below the 8x8 minimum"),
            });
        }
        let (ph, pw) = (h.next_multiple_of(8) - h, w.next_multiple_of(8) - w);
        let padded = if ph > 0 || pw > 0 { x.pad_reflect_hw(0, ph, 0, pw) } else { x.clone() };

        let mut cur = conv2d(&padded, &self.conv_w(table, &self.arch.proj), 1)?;

        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.arch.head.len());
        for r in &self.arch.head {
            cur = atb(&cur, &self.atb_w(table, r))?;
            outs.push(cur.clone());
        }
        cur = self.fuse_outputs(table, &self.arch.head_cafb, &outs)?;

        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(3);
        for (i, stage) in self.arch.enc.iter().enumerate() {
            if let Some(down) = &stage.down {
                cur = downsample(&cur, &self.conv_w(table, down))?;
            }
            for r in &stage.atbs {
                cur = atb(&cur, &self.atb_w(table, r))?;
            }
            if i < 3 {
                skips.push(cur.clone());
            }
        }

        for stage in &self.arch.dec {
            cur = upsample(&cur, &self.conv_w(table, &stage.up))?;
            cur = skip_fuse(&cur, &skips[stage.stage], &self.conv_w(table, &stage.fuse))?;
            for r in &stage.atbs {
                cur = atb(&cur, &self.atb_w(table, r))?;
            }
        }

        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.arch.tail.len());
        for r in &self.arch.tail {
            cur = atb(&cur, &self.atb_w(table, r))?;
            outs.push(cur.clone());
        }
        cur = self.fuse_outputs(table, &self.arch.tail_cafb, &outs)?;

        let mut out = conv2d(&cur, &self.conv_w(table, &self.arch.recon), 1)?;
        if self.config.global_residual {
            out = out.add(&padded);
        }
        if ph > 0 || pw > 0 {
            out = out.narrow(2, 0, h).narrow(3, 0, w);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(&self.params, x)
    }

    /// Enhance one `[C, H, W]` image: forward plus a [0, 1] clamp.
    pub fn enhance(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let s = img.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension {
                op: "enhance",
                detail: format!("expected [C, H, W], got {s:?}"),
            });
        }
        let batched = img.reshape(&[1, s[0], s[1], s[2]]);
        let out = self.forward(&batched)?;
        Ok(out.detach().clamp(T::zero(), T::one()).reshape(&s))
    }
}

// ── Complexity accounting ───────────────────────────────────────────────

/// Total trainable parameters for a configuration (no weights materialised).
pub fn model_param_count(cfg: &ModelConfig) -> Result<u64> {
    Ok(model_param_breakdown(cfg)?.iter().map(|(_, n)| n).sum())
}

/// Parameter shapes in table order, for splitting flat weight tables.
pub fn model_param_shapes(cfg: &ModelConfig) -> Result<Vec<Vec<usize>>> {
    let (_, specs) = build_plan(cfg)?;
    Ok(specs.into_iter().map(|s| s.shape).collect())
}

/// Parameter totals per component, in table order.
pub fn model_param_breakdown(cfg: &ModelConfig) -> Result<Vec<(String, u64)>> {
    let (_, specs) = build_plan(cfg)?;
    let mut rows: Vec<(String, u64)> = Vec::new();
    for s in &specs {
        let n: u64 = s.shape.iter().product::<usize>() as u64;
        match rows.last_mut() {
            Some((label, total)) if *label == s.label => *total += n,
            _ => rows.push((s.label.clone(), n)),
        }
    }
    Ok(rows)
}

/// Multiply-accumulates for one forward pass of a single image at `h`×`w`
/// (counted at the padded resolution, exactly as the forward runs).
/// Convolutions and attention matmuls are counted; norms and point-wise
/// nonlinearities are not.
pub fn model_mac_count(cfg: &ModelConfig, h: usize, w: usize) -> Result<u128> {
    Ok(model_mac_breakdown(cfg, h, w)?.iter().map(|(_, n)| n).sum())
}

/// MAC totals per component, in execution order.
pub fn model_mac_breakdown(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<(String, u128)>> {
    let (arch, specs) = build_plan(cfg)?;
    let (h, w) = (h.next_multiple_of(8), w.next_multiple_of(8));
    let mut rows: Vec<(String, u128)> = Vec::new();
    let mut add = |label: &str, n: u128| match rows.iter_mut().find(|(l, _)| l == label) {
        Some((_, total)) => *total += n,
        None => rows.push((label.to_string(), n)),
    };
    // Stride-1 same-size convs everywhere: positions = h·w at the conv's input.
    let conv = |r: &ConvRef, h: usize, w: usize| -> u128 {
        let s = &specs[r.kernel].shape; // [c_out, c_in/groups, k, k]
        (h * w * s[0] * s[1] * s[2] * s[3]) as u128
    };
    let pwdw = |r: &PwDwRef, h: usize, w: usize| conv(&r.point, h, w) + conv(&r.depth, h, w);
    let attn = |r: &AttnRef, c: usize, h: usize, w: usize, height_axis: bool| -> u128 {
        let proj = pwdw(&r.q, h, w) + pwdw(&r.k, h, w) + pwdw(&r.v, h, w) + conv(&r.out, h, w);
        let (c, h, w) = (c as u128, h as u128, w as u128);
        let scores = if height_axis { 2 * c * h * h * w } else { 2 * c * w * w * h };
        proj + scores
    };
    let atb_macs = |r: &AtbRef, c: usize, h: usize, w: usize| -> u128 {
        attn(&r.h, c, h, w, true) + attn(&r.w, c, h, w, false) + pwdw(&r.ff.b1, h, w)
            + pwdw(&r.ff.b2, h, w)
            + conv(&r.ff.out, h, w)
    };
    let cafb_macs = |r: &CafbRef, c: usize, h: usize, w: usize| -> u128 {
        let proj = pwdw(&r.q, h, w) + pwdw(&r.k, h, w) + pwdw(&r.v, h, w) + conv(&r.out, h, w);
        let n = r.layers as u128;
        proj + 2 * n * n * (c * h * w) as u128
    };

    add("proj", conv(&arch.proj, h, w));
    let c0 = cfg.base_channels;
    for r in &arch.head {
        add("head", atb_macs(r, c0, h, w));
    }
    add("head_cafb", cafb_macs(&arch.head_cafb, c0, h, w));

    let (mut ch, mut cw) = (h, w);
    let mut c = c0;
    for (i, stage) in arch.enc.iter().enumerate() {
        let label = format!("enc{i}");
        if let Some(down) = &stage.down {
            add(&label, conv(down, ch, cw));
            ch /= 2;
            cw /= 2;
            c *= 2;
        }
        for r in &stage.atbs {
            add(&label, atb_macs(r, c, ch, cw));
        }
    }

    for stage in &arch.dec {
        let label = format!("dec{}", stage.stage);
        add(&label, conv(&stage.up, ch, cw));
        ch *= 2;
        cw *= 2;
        c = cfg.dec_channels(stage.stage);
        add(&label, conv(&stage.fuse, ch, cw));
        for r in &stage.atbs {
            add(&label, atb_macs(r, c, ch, cw));
        }
    }

    let tc = cfg.dec_channels(0);
    for r in &arch.tail {
        add("tail", atb_macs(r, tc, ch, cw));
    }
    add("tail_cafb", cafb_macs(&arch.tail_cafb, tc, ch, cw));
    add("recon", conv(&arch.recon, ch, cw));
    Ok(rows)
}

/// Attention-only MACs for one ATB at the given geometry — the exact axis
/// attention term [`crate::attention::attention_mac_count`] reports.
pub fn atb_attention_macs(c: usize, h: usize, w: usize) -> u128 {
    crate::attention::attention_mac_count(AttentionKind::Axis, 1, c, h, w)
}
