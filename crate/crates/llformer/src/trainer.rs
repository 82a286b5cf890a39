//! Training: smooth-L1 loss, cosine learning-rate schedule, bias-corrected
//! Adam, a deterministic patch-sampling loop, and checkpoint persistence.
//!
//! Everything downstream of the two seeds (model seed, train seed) is a
//! pure function: batch indices, crop offsets, and flips come from one
//! ChaCha8 stream (per slot: pair index, crop y, crop x, flip h, flip v),
//! so loss histories replay bit-exactly — including across a checkpoint
//! save/resume, which restores the optimizer moments, the step counter,
//! and the exact RNG position.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{model_param_count, model_param_shapes, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{backward, record_op, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Square crop side; multiple of 8.
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Cosine horizon T; steps past it stay at `lr_min`.
    pub total_steps: usize,
    pub smooth_l1_beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 128,
            batch_size: 12,
            lr_max: 1e-4,
            lr_min: 1e-6,
            total_steps: 500,
            smooth_l1_beta: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            flip_h: true,
            flip_v: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            problems.push(format!("patch_size {} must be a positive multiple of 8", self.patch_size));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.total_steps == 0 {
            problems.push("total_steps must be at least 1".to_string());
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            problems.push(format!(
                "learning rates must satisfy 0 < lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            ));
        }
        if !(self.smooth_l1_beta > 0.0) {
            problems.push(format!("smooth_l1_beta {} must be positive", self.smooth_l1_beta));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("eps {} must be positive", self.eps));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

// ── Loss ────────────────────────────────────────────────────────────────

/// Mean smooth-L1: per element, 0.5·d²/β for |d| < β, else |d| − 0.5·β.
/// Gradient w.r.t. `pred` is clamp(d/β, −1, 1)/n.
pub fn smooth_l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "smooth_l1",
            detail: format!("shapes {:?} and {:?} differ", pred.shape(), target.shape()),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::Contract {
            op: "smooth_l1",
            detail: format!("beta {beta} must be positive"),
        });
    }
    let n = pred.numel();
    let b = T::from_f64(beta);
    let half = T::from_f64(0.5);
    let mut acc = T::zero();
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = *p - *t;
        let a = d.abs();
        acc += if a < b { half * d * d / b } else { a - half * b };
    }
    let out = Tensor::scalar(acc / T::from_f64(n as f64));
    let (pd, td) = (pred.detach(), target.detach());
    Ok(record_op("smooth_l1", &[pred, target], out, move |g, needed| {
        let gv = g.item() / T::from_f64(n as f64);
        let one = T::one();
        let dloss: Vec<T> = pd
            .data()
            .iter()
            .zip(td.data())
            .map(|(p, t)| {
                let r = (*p - *t) / b;
                gv * if r > one {
                    one
                } else if r < -one {
                    -one
                } else {
                    r
                }
            })
            .collect();
        let shape = pd.shape().to_vec();
        let gp = needed[0].then(|| Tensor::from_vec(shape.clone(), dloss.clone()));
        let gt = needed[1]
            .then(|| Tensor::from_vec(shape.clone(), dloss.iter().map(|v| -*v).collect()));
        vec![gp, gt]
    }))
}

// ── Schedule ────────────────────────────────────────────────────────────

/// lr_min + ½(lr_max − lr_min)(1 + cos(π·step/T)); exactly lr_min from
/// step T onward.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step >= total_steps {
        return lr_min;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + libm::cos(phase))
}

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(params: &[Tensor<T>]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m, v }
    }
}

/// One bias-corrected Adam update, in place. `step` is 1-based.
/// Element math runs in f64 so f32 and f64 models share trajectories to
/// rounding.
pub fn adam_step<T: Scalar>(
    weights: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract { op: "adam_step", detail: "step must be >= 1".into() });
    }
    if weights.len() != grads.len() || weights.len() != state.m.len() || weights.len() != state.v.len()
    {
        return Err(Error::Contract {
            op: "adam_step",
            detail: format!(
                "table lengths differ: {} weights, {} grads, {} moments",
                weights.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    let bc1 = 1.0 - beta1.powi(step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - beta2.powi(step.min(i32::MAX as u64) as i32);
    for i in 0..weights.len() {
        if weights[i].shape() != grads[i].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                detail: format!(
                    "param {i}: weight shape {:?} vs grad shape {:?}",
                    weights[i].shape(),
                    grads[i].shape()
                ),
            });
        }
        let shape = weights[i].shape().to_vec();
        let n = weights[i].numel();
        let (wd, gd) = (weights[i].data(), grads[i].data());
        let (md, vd) = (state.m[i].data(), state.v[i].data());
        let mut w2 = Vec::with_capacity(n);
        let mut m2 = Vec::with_capacity(n);
        let mut v2 = Vec::with_capacity(n);
        for j in 0..n {
            let g = gd[j].as_f64();
            let m = beta1 * md[j].as_f64() + (1.0 - beta1) * g;
            let v = beta2 * vd[j].as_f64() + (1.0 - beta2) * g * g;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            w2.push(T::from_f64(wd[j].as_f64() - update));
            m2.push(T::from_f64(m));
            v2.push(T::from_f64(v));
        }
        weights[i] = Tensor::from_vec(shape.clone(), w2);
        state.m[i] = Tensor::from_vec(shape.clone(), m2);
        state.v[i] = Tensor::from_vec(shape, v2);
    }
    Ok(())
}

// ── Checkpoints ─────────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LLFK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to reproduce a training run mid-flight: weights,
/// Adam moments, step counter, and the exact RNG position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Flat f32 tables in parameter-table order.
    pub weights: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    /// Serialise: magic, u32 version, u64 config length, config JSON
    /// (serde field order, compact), u64 weight count, weights, Adam m,
    /// Adam v (little-endian f32), u64 step, 32-byte RNG seed, u128 RNG
    /// word position. All integers little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("ModelConfig serialises");
        let mut out = Vec::with_capacity(96 + config.len() + 12 * self.weights.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for table in [&self.weights, &self.m, &self.v] {
            for v in table.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { expected: CHECKPOINT_MAGIC, found: magic }.into());
        }
        let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { expected: CHECKPOINT_VERSION, found: version }.into());
        }
        let config_len = u64::from_le_bytes(cur.take(8, "config length")?.try_into().unwrap());
        let config_bytes = cur.take(config_len as usize, "config")?;
        let config: ModelConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
        let expected = model_param_count(&config).expect("validated config");
        let found = u64::from_le_bytes(cur.take(8, "weight count")?.try_into().unwrap());
        if found != expected {
            return Err(CheckpointError::WeightCount { expected, found }.into());
        }
        let n = expected as usize;
        let mut tables = [Vec::new(), Vec::new(), Vec::new()];
        for (t, section) in tables.iter_mut().zip(["weights", "adam m", "adam v"]) {
            let raw = cur.take(4 * n, section)?;
            *t = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
        let [weights, m, v] = tables;
        let step = u64::from_le_bytes(cur.take(8, "step")?.try_into().unwrap());
        let rng_seed: [u8; 32] = cur.take(32, "rng seed")?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(cur.take(16, "rng position")?.try_into().unwrap());
        if cur.pos != bytes.len() {
            return Err(CheckpointError::Config(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - cur.pos
            ))
            .into());
        }
        Ok(Checkpoint { config, weights, m, v, step, rng_seed, rng_word_pos })
    }

    /// Rebuild the model (weights only — moments are training state).
    pub fn to_model(&self) -> Result<Model<f32>> {
        let params = split_flat(&self.weights, &model_param_shapes(&self.config)?)?;
        Model::from_params(self.config.clone(), params)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { section }.into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn flatten(tensors: &[Tensor<f32>]) -> Vec<f32> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn split_flat(flat: &[f32], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if flat.len() != total {
        return Err(Error::Contract {
            op: "checkpoint",
            detail: format!("flat table has {} values, plan needs {total}", flat.len()),
        });
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut pos = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::from_vec(s.clone(), flat[pos..pos + n].to_vec()));
        pos += n;
    }
    Ok(out)
}

// ── Training loop ───────────────────────────────────────────────────────

/// Owns the model and optimizer and advances one step at a time, so both
/// the CLI loop and the browser demo can drive it incrementally.
pub struct TrainSession {
    model: Model<f32>,
    data: Vec<(Tensor<f32>, Tensor<f32>)>,
    cfg: TrainConfig,
    opt: AdamState<f32>,
    step: usize,
    rng: ChaCha8Rng,
    history: Vec<f32>,
}

fn validate_dataset(
    model: &Model<f32>,
    data: &[(Tensor<f32>, Tensor<f32>)],
    patch: usize,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract { op: "train", detail: "dataset is empty".into() });
    }
    let c = model.config().input_channels;
    for (i, (low, normal)) in data.iter().enumerate() {
        let s = low.shape();
        if s.len() != 3 || s[0] != c {
            return Err(Error::Contract {
                op: "train",
                detail: format!("pair {i}: low image must be [{c}, H, W], got {s:?}"),
            });
        }
        if low.shape() != normal.shape() {
            return Err(Error::Contract {
                op: "train",
                detail: format!(
                    "pair {i}: low {:?} and normal {:?} shapes differ",
                    low.shape(),
                    normal.shape()
                ),
            });
        }
        if s[1] < patch || s[2] < patch {
            return Err(Error::Contract {
                op: "train",
                detail: format!("pair {i}: image {}x{} smaller than patch {patch}", s[1], s[2]),
            });
        }
    }
    Ok(())
}

impl TrainSession {
    pub fn new(
        model: Model<f32>,
        data: Vec<(Tensor<f32>, Tensor<f32>)>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        validate_dataset(&model, &data, cfg.patch_size)?;
        let opt = AdamState::zeros(model.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(TrainSession { model, data, cfg, opt, step: 0, rng, history: Vec::new() })
    }

    /// Continue a run exactly where the checkpoint left it (RNG position,
    /// moments, and step counter restored). History restarts empty — only
    /// new losses are recorded.
    pub fn resume(
        ckpt: &Checkpoint,
        data: Vec<(Tensor<f32>, Tensor<f32>)>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let shapes = model_param_shapes(&ckpt.config)?;
        let model = Model::from_params(ckpt.config.clone(), split_flat(&ckpt.weights, &shapes)?)?;
        validate_dataset(&model, &data, cfg.patch_size)?;
        let opt = AdamState {
            m: split_flat(&ckpt.m, &shapes)?,
            v: split_flat(&ckpt.v, &shapes)?,
        };
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        Ok(TrainSession {
            model,
            data,
            cfg,
            opt,
            step: ckpt.step as usize,
            rng,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &[(Tensor<f32>, Tensor<f32>)] {
        &self.data
    }

    pub fn completed_steps(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[f32] {
        &self.history
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            weights: flatten(self.model.params()),
            m: flatten(&self.opt.m),
            v: flatten(&self.opt.v),
            step: self.step as u64,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Per batch slot, in draw order: pair index, crop y, crop x, flip h,
    /// flip v. Offsets are drawn only when the image is larger than the
    /// patch; flips only when enabled.
    fn assemble_batch(&mut self) -> (Tensor<f32>, Tensor<f32>) {
        let p = self.cfg.patch_size;
        let mut lows = Vec::with_capacity(self.cfg.batch_size);
        let mut refs = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let idx = self.rng.random_range(0..self.data.len());
            let (low, normal) = &self.data[idx];
            let (c, h, w) = (low.shape()[0], low.shape()[1], low.shape()[2]);
            let y0 = if h > p { self.rng.random_range(0..=h - p) } else { 0 };
            let x0 = if w > p { self.rng.random_range(0..=w - p) } else { 0 };
            let mut lo = low.narrow(1, y0, p).narrow(2, x0, p);
            let mut re = normal.narrow(1, y0, p).narrow(2, x0, p);
            if self.cfg.flip_h && self.rng.random::<bool>() {
                lo = lo.flip(2);
                re = re.flip(2);
            }
            if self.cfg.flip_v && self.rng.random::<bool>() {
                lo = lo.flip(1);
                re = re.flip(1);
            }
            lows.push(lo.reshape(&[1, c, p, p]));
            refs.push(re.reshape(&[1, c, p, p]));
        }
        let lp: Vec<&Tensor<f32>> = lows.iter().collect();
        let rp: Vec<&Tensor<f32>> = refs.iter().collect();
        (Tensor::cat(&lp, 0), Tensor::cat(&rp, 0))
    }

    /// One optimization step; returns the batch loss. A non-finite loss
    /// aborts with the failing 0-based step index before any state change.
    pub fn step(&mut self) -> Result<f32> {
        let t = self.step;
        let lr = cosine_lr(t, self.cfg.total_steps, self.cfg.lr_max, self.cfg.lr_min);
        let (low, target) = self.assemble_batch();
        let tape: Tape<f32> = Tape::new();
        let leaves: Vec<Tensor<f32>> = self.model.params().iter().map(|p| tape.leaf(p)).collect();
        let pred = self.model.forward_with(&leaves, &low)?;
        let loss = smooth_l1(&pred, &target, self.cfg.smooth_l1_beta)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step: t });
        }
        let grads = backward(&loss)?;
        let gv: Vec<Tensor<f32>> = leaves.iter().map(|l| grads.wrt(l)).collect();
        let mut weights: Vec<Tensor<f32>> = leaves.iter().map(|l| l.detach()).collect();
        adam_step(
            &mut weights,
            &gv,
            &mut self.opt,
            (t + 1) as u64,
            lr,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.eps,
        )?;
        self.model.set_params(weights);
        self.step += 1;
        self.history.push(loss_val);
        Ok(loss_val)
    }
}

/// Drive a fresh session for `cfg.total_steps` steps. `on_step` receives
/// (0-based step, loss, lr). Returns the final checkpoint and the loss
/// history; the model is updated in place.
pub fn train(
    model: &mut Model<f32>,
    dataset: &[(Tensor<f32>, Tensor<f32>)],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f32, f64),
) -> Result<(Checkpoint, Vec<f32>)> {
    let start = Model::from_params(model.config().clone(), model.params().to_vec())?;
    let mut session = TrainSession::new(start, dataset.to_vec(), cfg.clone())?;
    for t in 0..cfg.total_steps {
        let lr = cosine_lr(t, cfg.total_steps, cfg.lr_max, cfg.lr_min);
        let loss = session.step()?;
        on_step(t, loss, lr);
    }
    let ckpt = session.checkpoint();
    let history = session.history().to_vec();
    *model = session.into_model();
    Ok((ckpt, history))
}
