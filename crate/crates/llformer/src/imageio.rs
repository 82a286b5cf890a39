//! PNG decode/encode, dataset manifests, and a deterministic test-pattern
//! generator.
//!
//! Only 8-bit RGB and grayscale PNGs are accepted (palette images are
//! expanded to RGB); anything else is rejected loudly so no codec loss or
//! silent conversion sneaks into the pipeline. Values map to [0, 1] by /255
//! and back by round(v·255), making decode∘encode exact on 8-bit data.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub low_path: PathBuf,
    /// Absent for inference-only manifests.
    pub normal_path: Option<PathBuf>,
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Decode an 8-bit RGB or grayscale PNG to `[3, H, W]` in [0, 1]
/// (grayscale is replicated across the three channels).
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| format_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(
            path,
            format!("unsupported bit depth {:?} (only 8-bit PNGs are handled)", info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let n = h * w;
    let bytes = &buf[..info.buffer_size()];
    let mut data = vec![0f32; 3 * n];
    match info.color_type {
        png::ColorType::Rgb => {
            for i in 0..n {
                for c in 0..3 {
                    data[c * n + i] = bytes[3 * i + c] as f32 / 255.0;
                }
            }
        }
        png::ColorType::Grayscale => {
            for i in 0..n {
                let v = bytes[i] as f32 / 255.0;
                data[i] = v;
                data[n + i] = v;
                data[2 * n + i] = v;
            }
        }
        other => {
            return Err(format_err(
                path,
                format!("unsupported color type {other:?} (only RGB and grayscale)"),
            ))
        }
    }
    Ok(Tensor::from_vec(vec![3, h, w], data))
}

/// Encode `[3, H, W]` as an 8-bit RGB PNG; values are clamped to [0, 1]
/// and quantised by round(v·255).
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension {
            op: "save_image",
            detail: format!("expected [3, H, W], got {s:?}"),
        });
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = img.data();
    let mut bytes = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            bytes[3 * i + c] = (d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let file = File::create(path).map_err(|e| format_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| format_err(path, e))?;
    Ok(())
}

/// Read a `id,low,normal` manifest CSV. Relative paths resolve against the
/// manifest's directory; every problem (missing column, missing file,
/// duplicate id) is collected and reported together.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let mut problems: Vec<String> = Vec::new();
    let headers = rdr.headers().map_err(|e| format_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_col, low_col, normal_col) = (col("id"), col("low"), col("normal"));
    for name in ["id", "low", "normal"] {
        if col(name).is_none() {
            problems.push(format!("missing column `{name}`"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems));
    }
    let (id_col, low_col, normal_col) = (id_col.unwrap(), low_col.unwrap(), normal_col.unwrap());

    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let mut records: Vec<ImageRecord> = Vec::new();
    let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| format_err(path, e))?;
        let id = row.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            problems.push(format!("row {}: empty id", line + 2));
            continue;
        }
        if !seen.insert(id.clone()) {
            problems.push(format!("duplicate id `{id}`"));
        }
        let low = resolve(row.get(low_col).unwrap_or(""));
        if !low.is_file() {
            problems.push(format!("id `{id}`: low image {} not found", low.display()));
        }
        let normal = match row.get(normal_col) {
            None | Some("") => None,
            Some(p) => {
                let r = resolve(p);
                if !r.is_file() {
                    problems.push(format!("id `{id}`: normal image {} not found", r.display()));
                }
                Some(r)
            }
        };
        records.push(ImageRecord { id, low_path: low, normal_path: normal });
    }
    if problems.is_empty() {
        Ok(records)
    } else {
        Err(Error::Manifest(problems))
    }
}

/// Deterministic structured RGB pattern: per-channel sinusoid plus diagonal
/// gradient, values inside [0.22, 0.78] so tone operators never clip it.
/// Same (seed, h, w) gives the same bytes on every platform.
pub fn test_pattern(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let mut data = vec![0f32; 3 * h * w];
    for c in 0..3 {
        let fx = rng.random_range(1..5) as f64;
        let fy = rng.random_range(1..5) as f64;
        let phase: f64 = rng.random::<f64>() * tau;
        let slope: f64 = rng.random();
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                let wave = libm::sin(tau * (fx * u + fy * v) + phase);
                let grad = slope * u + (1.0 - slope) * v;
                let val = 0.15 + 0.7 * (0.5 + 0.3 * wave + 0.2 * (grad - 0.5));
                data[(c * h + y) * w + x] = val as f32;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn test_pattern_is_deterministic_and_bounded() {
        let a = test_pattern(7, 9, 13);
        let b = test_pattern(7, 9, 13);
        let c = test_pattern(8, 9, 13);
        assert_eq!(a.shape(), &[3, 9, 13]);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|&v| (0.2..=0.8).contains(&v)));
    }

    #[test]
    fn save_load_roundtrip_is_exact_on_quantised_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let img = test_pattern(3, 6, 5);
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        // quantise the original the same way the encoder does
        for (a, b) in img.data().iter().zip(back.data()) {
            let q = (a * 255.0).round() / 255.0;
            assert!((q - b).abs() < 1e-7);
        }
        // second generation loses nothing
        let p2 = dir.path().join("img2.png");
        save_image(&p2, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn white_pixel_decodes_to_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        save_image(&p, &Tensor::full(&[3, 1, 1], 1.0)).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.to_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grayscale_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        let file = File::create(&p).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[0, 255]).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_png_is_rejected_naming_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let file = File::create(&p).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.write_header().unwrap().write_image_data(&[0, 0, 0, 0, 0, 0]).unwrap();
        match load_image(&p) {
            Err(Error::Format(msg)) => assert!(msg.contains("Sixteen"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rgba_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        let file = File::create(&p).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[1, 2, 3, 4]).unwrap();
        match load_image(&p) {
            Err(Error::Format(msg)) => assert!(msg.contains("color type"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_happy_path_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a_low.png", "a_high.png", "b_low.png"] {
            save_image(&dir.path().join(name), &test_pattern(1, 4, 4)).unwrap();
        }
        let mp = dir.path().join("pairs.csv");
        fs::write(&mp, "id,low,normal\na,a_low.png,a_high.png\nb,b_low.png,\n").unwrap();
        let recs = load_manifest(&mp).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "a");
        assert!(recs[0].low_path.is_file());
        assert!(recs[0].normal_path.as_ref().unwrap().is_file());
        assert_eq!(recs[1].normal_path, None);
    }

    #[test]
    fn manifest_problems_are_collected() {
        let dir = tempfile::tempdir().unwrap();
        save_image(&dir.path().join("x.png"), &test_pattern(1, 4, 4)).unwrap();
        let mp = dir.path().join("pairs.csv");
        fs::write(&mp, "id,low,normal\np,x.png,\np,missing.png,\n").unwrap();
        match load_manifest(&mp) {
            Err(Error::Manifest(problems)) => {
                assert!(problems.iter().any(|p| p.contains("duplicate id `p`")), "{problems:?}");
                assert!(problems.iter().any(|p| p.contains("missing.png")), "{problems:?}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_missing_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("bad.csv");
        fs::write(&mp, "id,input\na,x.png\n").unwrap();
        match load_manifest(&mp) {
            Err(Error::Manifest(problems)) => {
                assert!(problems.iter().any(|p| p.contains("`low`")));
                assert!(problems.iter().any(|p| p.contains("`normal`")));
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }
}
