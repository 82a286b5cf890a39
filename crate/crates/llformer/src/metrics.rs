//! Full-reference quality metrics: PSNR, SSIM, MAE.
//!
//! All three compute in f64 regardless of the tensor's scalar type. PSNR
//! uses MAX = 1 (images live in [0, 1]); identical inputs return the +∞
//! sentinel, written as `inf` in reports. SSIM follows the classic recipe:
//! luminance conversion, 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
//! K2 = 0.03, L = 1, averaged over valid (fully inside) windows only.

use std::io::Write;

use crate::degrade::LUMA_WEIGHTS;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            detail: format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// 10·log₁₀(1/MSE) in dB; +∞ for identical images.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same_shape("psnr", a, b)?;
    let n = a.numel();
    let mut sq = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.as_f64() - y.as_f64();
        sq += d * d;
    }
    let mse = sq / n as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * libm::log10(mse))
    }
}

/// Mean absolute difference over every channel and pixel.
pub fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same_shape("mae", a, b)?;
    let n = a.numel();
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += (x.as_f64() - y.as_f64()).abs();
    }
    Ok(acc / n as f64)
}

/// Luminance plane of `[3, H, W]`; `[1, H, W]` and `[H, W]` pass through.
fn to_gray<T: Scalar>(img: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let s = img.shape();
    let d = img.data();
    match s {
        [3, h, w] => {
            let n = h * w;
            let mut g = vec![0.0; n];
            for i in 0..n {
                g[i] = LUMA_WEIGHTS[0] * d[i].as_f64()
                    + LUMA_WEIGHTS[1] * d[n + i].as_f64()
                    + LUMA_WEIGHTS[2] * d[2 * n + i].as_f64();
            }
            Ok((g, *h, *w))
        }
        [1, h, w] => Ok((d.iter().map(|v| v.as_f64()).collect(), *h, *w)),
        [h, w] => Ok((d.iter().map(|v| v.as_f64()).collect(), *h, *w)),
        _ => Err(Error::Dimension {
            op: "ssim",
            detail: format!("expected [3, H, W], [1, H, W] or [H, W], got {s:?}"),
        }),
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = libm::exp(-(i as f64 - c) * (i as f64 - c) / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid filtering: rows then columns with the same 1-D kernel.
/// Output is (h − 10) × (w − 10).
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + t];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local SSIM between two images (luminance-converted first).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    let (ga, h, w) = to_gray(a)?;
    let (gb, _, _) = to_gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract {
            op: "ssim",
            detail: format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let k = gaussian_window();
    let aa: Vec<f64> = ga.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = gb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&ga, h, w, &k);
    let mu_b = filter_valid(&gb, h, w, &k);
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

// ── Reports ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// Per-image records plus aggregate means, serialisable as CSV
/// (`id,psnr_db,ssim,mae`, one row per image, final `mean` row).
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Compute all three metrics for one pair and append the record.
    pub fn evaluate<T: Scalar>(
        &mut self,
        id: impl Into<String>,
        out: &Tensor<T>,
        reference: &Tensor<T>,
    ) -> Result<&MetricRecord> {
        let rec = MetricRecord {
            id: id.into(),
            psnr_db: psnr(out, reference)?,
            ssim: ssim(out, reference)?,
            mae: mae(out, reference)?,
        };
        self.records.push(rec);
        Ok(self.records.last().unwrap())
    }

    pub fn mean_psnr(&self) -> f64 {
        self.records.iter().map(|r| r.psnr_db).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.records.iter().map(|r| r.ssim).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_mae(&self) -> f64 {
        self.records.iter().map(|r| r.mae).sum::<f64>() / self.records.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        fn num(v: f64) -> String {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v:.6}")
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "psnr_db", "ssim", "mae"])?;
        for r in &self.records {
            w.write_record([r.id.as_str(), &num(r.psnr_db), &num(r.ssim), &num(r.mae)])?;
        }
        if !self.records.is_empty() {
            w.write_record([
                "mean",
                &num(self.mean_psnr()),
                &num(self.mean_ssim()),
                &num(self.mean_mae()),
            ])?;
        }
        w.flush().map_err(Error::Io)?;
        Ok(())
    }
}
