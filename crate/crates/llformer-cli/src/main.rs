//! Command-line driver: synthesize low-light pairs, train, enhance,
//! evaluate, and benchmark.
//!
//! stdout carries machine-readable CSV only; diagnostics go to stderr.
//! Exit codes: 0 success, 1 usage or contract error, 2 numeric failure
//! (non-finite training loss).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use llformer::attention::{
    a_msa, attention_mac_count, AttentionKind, AxisAttentionParams, PwDwProj,
};
use llformer::degrade::{apply_degradation, sample_params};
use llformer::imageio::{load_image, load_manifest, save_image};
use llformer::metrics::MetricReport;
use llformer::model::{model_param_count, Model, ModelConfig};
use llformer::nnops::ConvWeights;
use llformer::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};
use llformer::{Error, Result, Tensor};

/// Headline size the full configuration is weighed against in `bench`.
const PARAM_REFERENCE: u64 = 24_520_000;

#[derive(Parser)]
#[command(name = "llformer", version, about = "Low-light image enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade well-lit PNGs into synthetic low-light training pairs
    Synthesize(SynthesizeArgs),
    /// Train a model on a manifest of low/normal pairs
    Train(TrainArgs),
    /// Run a trained checkpoint over PNGs
    Enhance(EnhanceArgs),
    /// Score enhanced images against their references
    Eval(EvalArgs),
    /// Report attention complexity and model size
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Directory of well-lit PNG images
    #[arg(long)]
    input: PathBuf,
    /// Output directory; receives low/, normal/, manifest.csv, params.csv
    #[arg(long)]
    out: PathBuf,
    /// Degraded variants per input image
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV with id,low,normal columns
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Model configuration JSON; defaults to the full-size model
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the desk-scale model preset instead of the full-size default
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Square crop side (multiple of 8)
    #[arg(long, default_value_t = 128)]
    patch: usize,
    #[arg(long, default_value_t = 12)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    /// Seeds both weight initialisation and batch sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable flip augmentation
    #[arg(long)]
    no_flips: bool,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Checkpoint path
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PNG file or directory of PNGs
    #[arg(long)]
    input: PathBuf,
    /// Output file (for file input) or directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest CSV with id,low,normal columns
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of enhanced PNGs named <id>.png
    #[arg(long)]
    enhanced: PathBuf,
    /// Also write the report CSV to this path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated square resolutions
    #[arg(long, default_value = "32,64,128,256", value_delimiter = ',')]
    resolutions: Vec<usize>,
    /// Model configuration JSON; defaults to the full-size model
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the desk-scale model preset instead of the full-size default
    #[arg(long, conflicts_with = "config")]
    desk: bool,
    /// Seed for the benchmark weights and input
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 2 for numeric failures mid-run, 1 for everything else.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synthesize(a) => cmd_synthesize(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Enhance(a) => cmd_enhance(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn load_model_config(path: Option<&Path>, desk: bool) -> Result<ModelConfig> {
    let cfg: ModelConfig = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None if desk => ModelConfig::desk(),
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// PNG files directly inside `dir`, sorted by file name for determinism.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

// ── synthesize ──────────────────────────────────────────────────────────

fn cmd_synthesize(a: SynthesizeArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Contract { op: "synthesize", detail: "count must be at least 1".into() });
    }
    let inputs = list_pngs(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::Contract {
            op: "synthesize",
            detail: format!("no input images in {}", a.input.display()),
        });
    }
    let low_dir = a.out.join("low");
    let normal_dir = a.out.join("normal");
    std::fs::create_dir_all(&low_dir)?;
    std::fs::create_dir_all(&normal_dir)?;

    let mut manifest = csv::Writer::from_path(a.out.join("manifest.csv"))?;
    manifest.write_record(["id", "low", "normal"])?;
    let mut params_csv = csv::Writer::from_path(a.out.join("params.csv"))?;
    params_csv.write_record([
        "id", "x", "y", "z", "exposure", "highlights", "shadows", "vibrance", "whites",
    ])?;
    let stdout = std::io::stdout();
    let mut lines = stdout.lock();
    writeln!(lines, "id,low,normal")?;

    let mut produced = 0u64;
    for path in &inputs {
        let img: Tensor<f32> = load_image(path)?;
        for variant in 0..a.count {
            let id = if a.count == 1 {
                stem(path)
            } else {
                format!("{}_v{variant}", stem(path))
            };
            let params = sample_params(a.seed.wrapping_add(produced));
            let degraded = apply_degradation(&img, &params)?;
            let low_rel = format!("low/{id}.png");
            let normal_rel = format!("normal/{id}.png");
            save_image(&a.out.join(&low_rel), &degraded)?;
            std::fs::copy(path, a.out.join(&normal_rel))?;
            manifest.write_record([&id, &low_rel, &normal_rel])?;
            params_csv.write_record([
                id.clone(),
                params.x.to_string(),
                params.y.to_string(),
                params.z.to_string(),
                params.exposure.to_string(),
                params.highlights.to_string(),
                params.shadows.to_string(),
                params.vibrance.to_string(),
                params.whites.to_string(),
            ])?;
            writeln!(lines, "{id},{low_rel},{normal_rel}")?;
            produced += 1;
        }
    }
    manifest.flush()?;
    params_csv.flush()?;
    eprintln!("synthesized {produced} low-light images into {}", a.out.display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn load_pairs(manifest: &Path) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let records = load_manifest(manifest)?;
    let mut pairs = Vec::with_capacity(records.len());
    for rec in &records {
        let Some(normal_path) = &rec.normal_path else {
            return Err(Error::Contract {
                op: "train",
                detail: format!("manifest row {} has no normal-light image", rec.id),
            });
        };
        pairs.push((load_image(&rec.low_path)?, load_image(normal_path)?));
    }
    Ok(pairs)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let model_cfg = load_model_config(a.config.as_deref(), a.desk)?;
    let train_cfg = TrainConfig {
        patch_size: a.patch,
        batch_size: a.batch,
        lr_max: a.lr_max,
        lr_min: a.lr_min,
        total_steps: a.steps,
        seed: a.seed,
        flip_h: !a.no_flips,
        flip_v: !a.no_flips,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let pairs = load_pairs(&a.manifest)?;
    eprintln!(
        "training on {} pairs for {} steps (patch {}, batch {})",
        pairs.len(),
        a.steps,
        a.patch,
        a.batch
    );
    let mut model = Model::build(model_cfg, a.seed)?;
    println!("step,loss,lr");
    let (ckpt, _) = train(&mut model, &pairs, &train_cfg, |step, loss, lr| {
        println!("{step},{loss},{lr}");
    })?;
    save_checkpoint(&a.out, &ckpt)?;
    eprintln!("saved checkpoint to {}", a.out.display());
    Ok(())
}

// ── enhance ─────────────────────────────────────────────────────────────

fn cmd_enhance(a: EnhanceArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.to_model()?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.out)?;
        list_pngs(&a.input)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().expect("listed file has a name").to_owned();
                (p, a.out.join(name))
            })
            .collect()
    } else {
        let out = if a.out.is_dir() {
            a.out.join(a.input.file_name().unwrap_or_default())
        } else {
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            a.out.clone()
        };
        vec![(a.input.clone(), out)]
    };
    if jobs.is_empty() {
        return Err(Error::Contract {
            op: "enhance",
            detail: format!("no input images in {}", a.input.display()),
        });
    }
    println!("input,output");
    for (src, dst) in &jobs {
        let img = load_image(src)?;
        let enhanced = model.enhance(&img)?;
        save_image(dst, &enhanced)?;
        println!("{},{}", src.display(), dst.display());
    }
    eprintln!("enhanced {} images", jobs.len());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let records = load_manifest(&a.manifest)?;
    let mut problems = Vec::new();
    let mut jobs = Vec::new();
    for rec in &records {
        let enhanced = a.enhanced.join(format!("{}.png", rec.id));
        if !enhanced.is_file() {
            problems.push(format!("{}: no enhanced image at {}", rec.id, enhanced.display()));
        }
        match &rec.normal_path {
            Some(normal) => jobs.push((rec.id.clone(), enhanced, normal.clone())),
            None => problems.push(format!("{}: no normal-light reference", rec.id)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems));
    }
    let mut report = MetricReport::new();
    for (id, enhanced, normal) in &jobs {
        let out_img: Tensor<f32> = load_image(enhanced)?;
        let ref_img: Tensor<f32> = load_image(normal)?;
        report.evaluate(id.clone(), &out_img, &ref_img)?;
    }
    report.write_csv(std::io::stdout().lock())?;
    if let Some(path) = &a.out {
        report.write_csv(std::fs::File::create(path)?)?;
    }
    eprintln!(
        "mean psnr {:.2} dB, mean ssim {:.4}, mean mae {:.5} over {} images",
        report.mean_psnr(),
        report.mean_ssim(),
        report.mean_mae(),
        jobs.len()
    );
    Ok(())
}

// ── bench ───────────────────────────────────────────────────────────────

fn rand_conv(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in_per_group: usize,
    k: usize,
    groups: usize,
    bias: bool,
) -> Result<ConvWeights<f32>> {
    ConvWeights::new(
        Tensor::rand_trunc_normal(&[c_out, c_in_per_group, k, k], 0.02, rng),
        bias.then(|| Tensor::zeros(&[c_out])),
        groups,
    )
}

fn rand_axis_params(rng: &mut ChaCha8Rng, c: usize, heads: usize) -> Result<AxisAttentionParams<f32>> {
    let proj = |rng: &mut ChaCha8Rng| -> Result<PwDwProj<f32>> {
        PwDwProj::new(rand_conv(rng, c, c, 1, 1, false)?, rand_conv(rng, c, 1, 3, c, false)?)
    };
    let (q, k, v) = (proj(rng)?, proj(rng)?, proj(rng)?);
    let alpha = ((c as f64) / heads as f64).sqrt();
    AxisAttentionParams::new(
        q,
        k,
        v,
        rand_conv(rng, c, c, 1, 1, true)?,
        heads,
        Tensor::scalar(alpha as f32),
    )
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.resolutions.is_empty() {
        return Err(Error::Contract { op: "bench", detail: "no resolutions given".into() });
    }
    if let Some(&r) = a.resolutions.iter().find(|&&r| r == 0) {
        return Err(Error::Contract { op: "bench", detail: format!("resolution {r} invalid") });
    }
    let cfg = load_model_config(a.config.as_deref(), a.desk)?;
    let c = cfg.base_channels;
    let heads = cfg.encoder_heads[0];
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let height = rand_axis_params(&mut rng, c, heads)?;
    let width = rand_axis_params(&mut rng, c, heads)?;

    println!("h,w,full_msa_macs,a_msa_macs,ratio,a_msa_ms");
    for &r in &a.resolutions {
        let full = attention_mac_count(AttentionKind::Full, 1, c, r, r);
        let axis = attention_mac_count(AttentionKind::Axis, 1, c, r, r);
        let x = Tensor::rand_uniform(&[1, c, r, r], 0.0, 1.0, &mut rng);
        let start = Instant::now();
        a_msa(&x, &height, &width)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        println!("{r},{r},{full},{axis},{:.3},{ms:.3}", full as f64 / axis as f64);
    }

    let count = model_param_count(&cfg)?;
    let deviation = (count as f64 - PARAM_REFERENCE as f64) / PARAM_REFERENCE as f64 * 100.0;
    println!();
    println!("param_count,reference,deviation_pct");
    println!("{count},{PARAM_REFERENCE},{deviation:.2}");
    eprintln!(
        "attention width {c}, heads {heads}; parameters {count} ({deviation:+.2}% vs reference)",
    );
    Ok(())
}
