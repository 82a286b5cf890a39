//! Browser bindings for the enhancer. Three playgrounds, each a thin
//! wasm-bindgen wrapper over the core crate:
//!
//! * [`DegradePlayground`] — drive the three-knob degradation with sliders
//!   and watch it act on a synthetic pattern.
//! * [`complexity_json`] / [`model_summary_json`] — compare full spatial
//!   attention with the height/width decomposition as resolution grows.
//! * [`LiveTrainer`] — a small model overfitting a handful of synthetic
//!   pairs, stepped from the page one optimizer update at a time.
//!
//! Images cross the boundary as RGBA byte buffers (draw with `ImageData`),
//! everything structured as JSON strings. All logic lives in plain functions
//! returning `Result<_, String>` so the crate's tests run natively; `JsError`
//! values are only materialized at the boundary (constructing one aborts off
//! wasm).

use llformer::attention::{attention_mac_count, AttentionKind};
use llformer::degrade::{apply_degradation, sample_params, DegradationParams};
use llformer::imageio::test_pattern;
use llformer::metrics::psnr;
use llformer::model::{model_mac_count, model_param_count, Model, ModelConfig};
use llformer::tensor::Tensor;
use llformer::trainer::{cosine_lr, TrainConfig, TrainSession};
use wasm_bindgen::prelude::*;

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn boundary(message: String) -> JsError {
    JsError::new(&message)
}

/// `[3, H, W]` float image in `[0, 1]` to tightly packed RGBA bytes.
fn rgba_from_tensor(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let data = img.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for ch in 0..3 {
            // Grayscale inputs (c == 1) broadcast across RGB.
            let v = data[if ch < c { ch * plane + p } else { p }];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// A synthetic well-lit scene plus the degradation knobs. The page owns the
/// three coordinates and re-renders on every slider move.
#[wasm_bindgen]
pub struct DegradePlayground {
    clean: Tensor<f32>,
}

impl DegradePlayground {
    fn degraded(&self, x: f64, y: f64, z: f64) -> Result<Vec<u8>, String> {
        let p = DegradationParams::from_xyz(x, y, z);
        let low = apply_degradation(&self.clean, &p).map_err(text)?;
        Ok(rgba_from_tensor(&low))
    }
}

#[wasm_bindgen]
impl DegradePlayground {
    /// Pattern `seed` picks the scene; `size` is its square side in pixels.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32) -> DegradePlayground {
        let size = size.clamp(16, 512) as usize;
        DegradePlayground { clean: test_pattern(seed as u64, size, size) }
    }

    pub fn size(&self) -> u32 {
        self.clean.shape()[1] as u32
    }

    pub fn clean_rgba(&self) -> Vec<u8> {
        rgba_from_tensor(&self.clean)
    }

    /// Degrade the scene at coordinates `(x, y, z)` of the parameter cube.
    pub fn degraded_rgba(&self, x: f64, y: f64, z: f64) -> Result<Vec<u8>, JsError> {
        self.degraded(x, y, z).map_err(boundary)
    }

    /// The concrete adjustment values behind a cube coordinate.
    pub fn params_json(&self, x: f64, y: f64, z: f64) -> String {
        let p = DegradationParams::from_xyz(x, y, z);
        serde_json::json!({
            "exposure": p.exposure,
            "highlights": p.highlights,
            "shadows": p.shadows,
            "vibrance": p.vibrance,
            "whites": p.whites,
        })
        .to_string()
    }

    /// The cube coordinate a given RNG seed would sample, so the page can
    /// jump the sliders to "what the synthesizer would do".
    pub fn sampled_xyz_json(&self, seed: u32) -> String {
        let p = sample_params(seed as u64);
        serde_json::json!({ "x": p.x, "y": p.y, "z": p.z }).to_string()
    }
}

/// Score/apply multiply-accumulates for one attention layer at each square
/// resolution: full spatial attention against the height/width decomposition.
/// Returns `[{h, w, full, axis, ratio}, …]`; counts are f64 for JS.
fn complexity_rows(channels: u32, sizes: &[u32]) -> Result<String, String> {
    if channels == 0 {
        return Err("channels must be at least 1".into());
    }
    let rows: Vec<serde_json::Value> = sizes
        .iter()
        .map(|&r| {
            let (h, w) = (r as usize, r as usize);
            let full = attention_mac_count(AttentionKind::Full, 1, channels as usize, h, w);
            let axis = attention_mac_count(AttentionKind::Axis, 1, channels as usize, h, w);
            serde_json::json!({
                "h": h,
                "w": w,
                "full": full as f64,
                "axis": axis as f64,
                "ratio": full as f64 / axis as f64,
            })
        })
        .collect();
    Ok(serde_json::Value::Array(rows).to_string())
}

#[wasm_bindgen]
pub fn complexity_json(channels: u32, sizes: Vec<u32>) -> Result<String, JsError> {
    complexity_rows(channels, &sizes).map_err(boundary)
}

/// Parameter count and whole-model multiply-accumulates for a model config
/// (JSON, same schema as checkpoints) at an `h`×`w` input.
fn model_summary(config_json: &str, h: u32, w: u32) -> Result<String, String> {
    let cfg: ModelConfig = serde_json::from_str(config_json).map_err(text)?;
    let params = model_param_count(&cfg).map_err(text)?;
    let macs = model_mac_count(&cfg, h as usize, w as usize).map_err(text)?;
    Ok(serde_json::json!({
        "params": params as f64,
        "macs": macs as f64,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn model_summary_json(config_json: &str, h: u32, w: u32) -> Result<String, JsError> {
    model_summary(config_json, h, w).map_err(boundary)
}

/// The small model config the in-page trainer uses.
#[wasm_bindgen]
pub fn live_trainer_config_json() -> String {
    serde_json::to_string(&live_config()).expect("config serializes")
}

fn live_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        encoder_depths: [1, 1, 1, 1],
        encoder_heads: [1, 1, 1, 1],
        decoder_depths: [1, 1, 1],
        decoder_heads: [1, 1, 1],
        head_tail_blocks: 2,
        cafb_layers: 2,
        global_residual: true,
        ..ModelConfig::default()
    }
}

/// An enhancement run small enough to live inside a page: a few synthetic
/// pairs sharing one degradation, a narrow model, one `step()` per call.
struct LiveCore {
    session: TrainSession,
    total_steps: usize,
}

impl LiveCore {
    fn new(size: u32, pairs: u32, seed: u32, steps: u32) -> Result<LiveCore, String> {
        let size = ((size.clamp(16, 128) as usize) / 8) * 8;
        let pairs = pairs.clamp(1, 16);
        let steps = steps.clamp(1, 100_000) as usize;
        let degradation = sample_params(seed as u64);
        let data = (0..pairs)
            .map(|i| {
                let normal = test_pattern(seed as u64 * 1000 + i as u64, size, size);
                let low = apply_degradation(&normal, &degradation)?;
                Ok((low, normal))
            })
            .collect::<llformer::Result<Vec<_>>>()
            .map_err(text)?;
        let cfg = TrainConfig {
            patch_size: size,
            batch_size: 1,
            lr_max: 2e-3,
            lr_min: 2e-5,
            total_steps: steps,
            seed: seed as u64,
            flip_h: false,
            flip_v: false,
            ..TrainConfig::default()
        };
        let model = Model::build(live_config(), seed as u64).map_err(text)?;
        let session = TrainSession::new(model, data, cfg).map_err(text)?;
        Ok(LiveCore { session, total_steps: steps })
    }

    fn pair(&self, i: u32) -> Result<&(Tensor<f32>, Tensor<f32>), String> {
        self.session
            .data()
            .get(i as usize)
            .ok_or_else(|| format!("pair {i} out of range"))
    }

    fn enhanced(&self, pair: u32) -> Result<Tensor<f32>, String> {
        let (low, _) = self.pair(pair)?;
        self.session.model().enhance(low).map_err(text)
    }

    fn psnr_pair(&self, pair: u32) -> Result<String, String> {
        let (low, normal) = self.pair(pair)?;
        let out = self.session.model().enhance(low).map_err(text)?;
        let enhanced = psnr(&out, normal).map_err(text)?;
        let baseline = psnr(low, normal).map_err(text)?;
        Ok(serde_json::json!({ "psnr": enhanced, "baseline": baseline }).to_string())
    }
}

#[wasm_bindgen]
pub struct LiveTrainer {
    core: LiveCore,
}

#[wasm_bindgen]
impl LiveTrainer {
    /// `size` is the square pair resolution (rounded to a multiple of 8),
    /// `pairs` how many scenes to fit, `seed` fixes scenes, degradation and
    /// optimizer draws, `steps` sizes the cosine schedule.
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, pairs: u32, seed: u32, steps: u32) -> Result<LiveTrainer, JsError> {
        Ok(LiveTrainer { core: LiveCore::new(size, pairs, seed, steps).map_err(boundary)? })
    }

    /// One optimizer update; returns the batch loss.
    pub fn step(&mut self) -> Result<f32, JsError> {
        self.core.session.step().map_err(text).map_err(boundary)
    }

    pub fn steps_done(&self) -> u32 {
        self.core.session.completed_steps() as u32
    }

    pub fn total_steps(&self) -> u32 {
        self.core.total_steps as u32
    }

    pub fn current_lr(&self) -> f64 {
        let cfg = self.core.session.config();
        cosine_lr(
            self.core.session.completed_steps(),
            cfg.total_steps,
            cfg.lr_max,
            cfg.lr_min,
        )
    }

    pub fn loss_history_json(&self) -> String {
        serde_json::to_string(self.core.session.history()).expect("history serializes")
    }

    pub fn pair_count(&self) -> u32 {
        self.core.session.data().len() as u32
    }

    pub fn low_rgba(&self, pair: u32) -> Result<Vec<u8>, JsError> {
        Ok(rgba_from_tensor(&self.core.pair(pair).map_err(boundary)?.0))
    }

    pub fn normal_rgba(&self, pair: u32) -> Result<Vec<u8>, JsError> {
        Ok(rgba_from_tensor(&self.core.pair(pair).map_err(boundary)?.1))
    }

    /// Run the model as it stands on one training input.
    pub fn enhanced_rgba(&self, pair: u32) -> Result<Vec<u8>, JsError> {
        Ok(rgba_from_tensor(&self.core.enhanced(pair).map_err(boundary)?))
    }

    /// PSNR of the current enhancement against the well-lit original, plus
    /// the do-nothing baseline, as `{psnr, baseline}` (dB).
    pub fn psnr_json(&self, pair: u32) -> Result<String, JsError> {
        self.core.psnr_pair(pair).map_err(boundary)
    }
}
