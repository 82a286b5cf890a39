//! Synthetic low-light degradation: five tone operators driven by three
//! uniform draws, applied in a fixed order with a [0, 1] clamp after each
//! stage.
//!
//! Parameter formulas (X, Y, Z ∈ [0, 1]):
//!
//! | field      | formula            | range       |
//! |------------|--------------------|-------------|
//! | exposure   | −5 + 5X²           | [−5, 0]     |
//! | highlights | 50·min(Y, ½) + 75  | [75, 100]   |
//! | shadows    | −100·min(Z, ½)     | [−50, 0]    |
//! | vibrance   | −75 + 75X²         | [−75, 0]    |
//! | whites     | 16(5 − 5X²)        | [0, 80]     |
//!
//! Exposure is applied in raw stops (gain 2ᵉ); the other four are
//! normalised by 100 before use. Every operator has an exact neutral
//! element at 0, so `DegradationParams::neutral()` is a bit-exact identity.
//! All per-pixel math runs in f64 with `libm` transcendentals, making the
//! output reproducible across platforms bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rec. 709 luminance weights, shared with the SSIM grayscale conversion.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationParams {
    /// Stops; gain 2ᵉ. Sampled range [−5, 0].
    pub exposure: f64,
    /// Percent; sampled range [75, 100].
    pub highlights: f64,
    /// Percent; sampled range [−50, 0].
    pub shadows: f64,
    /// Percent; sampled range [−75, 0].
    pub vibrance: f64,
    /// Percent; sampled range [0, 80].
    pub whites: f64,
    /// Seed that produced the draws via [`sample_params`]; 0 for the other
    /// constructors (the tone fields are authoritative for `apply`).
    pub seed: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl DegradationParams {
    /// Compute the five tone fields from explicit draws (slider inputs).
    /// Draws must lie in [0, 1].
    pub fn from_xyz(x: f64, y: f64, z: f64) -> Self {
        for (name, v) in [("x", x), ("y", y), ("z", z)] {
            assert!((0.0..=1.0).contains(&v), "draw {name}={v} outside [0, 1]");
        }
        DegradationParams {
            exposure: -5.0 + 5.0 * x * x,
            highlights: 50.0 * y.min(0.5) + 75.0,
            shadows: -100.0 * z.min(0.5),
            vibrance: -75.0 + 75.0 * x * x,
            whites: 16.0 * (5.0 - 5.0 * x * x),
            seed: 0,
            x,
            y,
            z,
        }
    }

    /// Every operator at its neutral element; `apply_degradation` becomes
    /// the exact identity. Not reachable by sampling (highlights ≥ 75) —
    /// this is a testing/calibration constructor.
    pub fn neutral() -> Self {
        DegradationParams {
            exposure: 0.0,
            highlights: 0.0,
            shadows: 0.0,
            vibrance: 0.0,
            whites: 0.0,
            seed: 0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }
}

/// Draw X, Y, Z from ChaCha8 seeded with `seed` (three f64 draws, in that
/// order) and fill in the five tone fields.
pub fn sample_params(seed: u64) -> DegradationParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: f64 = rng.random();
    let y: f64 = rng.random();
    let z: f64 = rng.random();
    DegradationParams { seed, ..DegradationParams::from_xyz(x, y, z) }
}

/// Cubic Hermite ramp between `a` and `b` (either direction): 0 at `a`,
/// 1 at `b`, smooth in between.
fn smoothstep(a: f64, b: f64, t: f64) -> f64 {
    let u = ((t - a) / (b - a)).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
}

fn clamp01(buf: &mut [f64]) {
    for v in buf {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Per-pixel transform of the three channel values, given their current
/// luminance-weighted mix. `buf` is planar `[3, n]`.
fn for_each_pixel(buf: &mut [f64], n: usize, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) {
    for i in 0..n {
        let (r, g, b) = f(buf[i], buf[n + i], buf[2 * n + i]);
        buf[i] = r;
        buf[n + i] = g;
        buf[2 * n + i] = b;
    }
}

fn stage_exposure(buf: &mut [f64], stops: f64) {
    if stops == 0.0 {
        return;
    }
    let gain = libm::exp2(stops);
    for v in buf.iter_mut() {
        *v *= gain;
    }
    clamp01(buf);
}

/// Lift (or lower) values in bright regions: v += ĥ·s(½,1,L)·(1−v)/2.
fn stage_highlights(buf: &mut [f64], n: usize, pct: f64) {
    if pct == 0.0 {
        return;
    }
    let p = pct / 100.0;
    for_each_pixel(buf, n, |r, g, b| {
        let w = p * smoothstep(0.5, 1.0, luma(r, g, b)) * 0.5;
        (r + w * (1.0 - r), g + w * (1.0 - g), b + w * (1.0 - b))
    });
    clamp01(buf);
}

/// Scale values in dark regions: v += ŝ·s(½,0,L)·v/2 (negative ŝ darkens).
fn stage_shadows(buf: &mut [f64], n: usize, pct: f64) {
    if pct == 0.0 {
        return;
    }
    let p = pct / 100.0;
    for_each_pixel(buf, n, |r, g, b| {
        let w = p * smoothstep(0.5, 0.0, luma(r, g, b)) * 0.5;
        (r + w * r, g + w * g, b + w * b)
    });
    clamp01(buf);
}

/// Push near-white values toward (or away from) 1: v += ŵ·s(0.7,1,L)·(1−v)/2.
fn stage_whites(buf: &mut [f64], n: usize, pct: f64) {
    if pct == 0.0 {
        return;
    }
    let p = pct / 100.0;
    for_each_pixel(buf, n, |r, g, b| {
        let w = p * smoothstep(0.7, 1.0, luma(r, g, b)) * 0.5;
        (r + w * (1.0 - r), g + w * (1.0 - g), b + w * (1.0 - b))
    });
    clamp01(buf);
}

/// Rescale saturation, weighting unsaturated pixels more:
/// sat ← clamp(sat·(1 + v̂·(1 − sat))), hue and max channel held fixed.
fn stage_vibrance(buf: &mut [f64], n: usize, pct: f64) {
    if pct == 0.0 {
        return;
    }
    let p = pct / 100.0;
    for_each_pixel(buf, n, |r, g, b| {
        let mx = r.max(g).max(b);
        let mn = r.min(g).min(b);
        if mx <= 0.0 || mx == mn {
            return (r, g, b);
        }
        let sat = (mx - mn) / mx;
        let new_sat = (sat * (1.0 + p * (1.0 - sat))).clamp(0.0, 1.0);
        let ratio = new_sat / sat;
        (mx - (mx - r) * ratio, mx - (mx - g) * ratio, mx - (mx - b) * ratio)
    });
    clamp01(buf);
}

/// Degrade one `[3, H, W]` image in [0, 1]. Stage order: exposure,
/// highlights, shadows, whites, vibrance — fixed and part of the output
/// contract (golden files depend on it). Luminance is recomputed from the
/// current values at each stage.
pub fn apply_degradation<T: Scalar>(img: &Tensor<T>, p: &DegradationParams) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension {
            op: "apply_degradation",
            detail: format!("expected [3, H, W], got {s:?}"),
        });
    }
    let n = s[1] * s[2];
    let mut buf: Vec<f64> = img.data().iter().map(|&v| v.as_f64()).collect();
    if buf.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract {
            op: "apply_degradation",
            detail: "input values must lie in [0, 1]".to_string(),
        });
    }
    stage_exposure(&mut buf, p.exposure);
    stage_highlights(&mut buf, n, p.highlights);
    stage_shadows(&mut buf, n, p.shadows);
    stage_whites(&mut buf, n, p.whites);
    stage_vibrance(&mut buf, n, p.vibrance);
    Ok(Tensor::from_vec(
        s.to_vec(),
        buf.into_iter().map(T::from_f64).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn formula_endpoints() {
        let p = DegradationParams::from_xyz(1.0, 0.7, 0.5);
        assert_eq!(p.exposure, 0.0);
        assert_eq!(p.vibrance, 0.0);
        assert_eq!(p.whites, 0.0);
        assert_eq!(p.highlights, 100.0);
        assert_eq!(p.shadows, -50.0);
        let p = DegradationParams::from_xyz(0.0, 0.0, 0.0);
        assert_eq!(p.exposure, -5.0);
        assert_eq!(p.whites, 80.0);
        assert_eq!(p.highlights, 75.0);
        assert_eq!(p.shadows, 0.0);
        assert_eq!(p.vibrance, -75.0);
    }

    #[test]
    fn sampled_fields_stay_in_range_and_reproduce() {
        for seed in 0..200u64 {
            let p = sample_params(seed);
            assert_eq!(p, sample_params(seed));
            assert!((-5.0..=0.0).contains(&p.exposure), "{p:?}");
            assert!((75.0..=100.0).contains(&p.highlights));
            assert!((-50.0..=0.0).contains(&p.shadows));
            assert!((-75.0..=0.0).contains(&p.vibrance));
            assert!((0.0..=80.0).contains(&p.whites));
            assert_eq!(p.seed, seed);
        }
        assert_ne!(sample_params(1), sample_params(2));
    }

    #[test]
    fn neutral_params_are_exact_identity() {
        let img = test_image(11, 6, 5);
        let out = apply_degradation(&img, &DegradationParams::neutral()).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn exposure_is_a_pure_gain() {
        let img = test_image(3, 4, 4);
        let p = DegradationParams { exposure: -5.0, ..DegradationParams::neutral() };
        let out = apply_degradation(&img, &p).unwrap();
        let gain = libm::exp2(-5.0);
        for (o, i) in out.data().iter().zip(img.data()) {
            assert_eq!(*o, (i * gain).clamp(0.0, 1.0));
            assert!(*o <= *i);
        }
    }

    #[test]
    fn exposure_preserves_elementwise_order() {
        let a = test_image(20, 5, 5);
        let b = a.add_scalar(0.1).clamp(0.0, 1.0);
        let p = DegradationParams { exposure: -2.3, ..DegradationParams::neutral() };
        let da = apply_degradation(&a, &p).unwrap();
        let db = apply_degradation(&b, &p).unwrap();
        for (x, y) in da.data().iter().zip(db.data()) {
            assert!(x <= y);
        }
    }

    #[test]
    fn highlights_only_touch_bright_regions() {
        // dark pixel (L < 0.5) untouched; bright pixel lifted
        let img: Tensor<f64> = Tensor::from_vec(vec![3, 1, 2], vec![0.1, 0.9, 0.1, 0.9, 0.1, 0.9]);
        let p = DegradationParams { highlights: 100.0, ..DegradationParams::neutral() };
        let out = apply_degradation(&img, &p).unwrap();
        let (o, i) = (out.data(), img.data());
        for c in 0..3 {
            assert_eq!(o[2 * c], i[2 * c], "dark pixel channel {c}");
            assert!(o[2 * c + 1] > i[2 * c + 1], "bright pixel channel {c}");
        }
    }

    #[test]
    fn negative_shadows_darken_dark_regions() {
        let img: Tensor<f64> = Tensor::from_vec(vec![3, 1, 1], vec![0.2, 0.2, 0.2]);
        let p = DegradationParams { shadows: -50.0, ..DegradationParams::neutral() };
        let out = apply_degradation(&img, &p).unwrap();
        assert!(out.data().iter().all(|&v| v < 0.2 && v > 0.0));
    }

    #[test]
    fn negative_vibrance_desaturates_but_keeps_gray_fixed() {
        let img: Tensor<f64> = Tensor::from_vec(vec![3, 1, 2], vec![0.8, 0.5, 0.2, 0.5, 0.1, 0.5]);
        let p = DegradationParams { vibrance: -75.0, ..DegradationParams::neutral() };
        let out = apply_degradation(&img, &p).unwrap();
        let o = out.data();
        // gray pixel (index 1 in each plane) unchanged
        assert_eq!([o[1], o[3], o[5]], [0.5, 0.5, 0.5]);
        // colored pixel: chroma shrinks, max channel fixed
        let (mx0, mn0) = (0.8, 0.1);
        let mx1 = o[0].max(o[2]).max(o[4]);
        let mn1 = o[0].min(o[2]).min(o[4]);
        assert_eq!(mx1, mx0);
        assert!(mx1 - mn1 < mx0 - mn0);
    }

    #[test]
    fn output_stays_in_unit_range_for_random_params() {
        for seed in 0..30u64 {
            let img = test_image(seed + 100, 7, 3);
            let out = apply_degradation(&img, &sample_params(seed)).unwrap();
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_bad_shape_and_range() {
        let p = DegradationParams::neutral();
        assert!(apply_degradation(&Tensor::<f64>::zeros(&[1, 4, 4]), &p).is_err());
        assert!(apply_degradation(&Tensor::<f64>::zeros(&[3, 4]), &p).is_err());
        let bad: Tensor<f64> = Tensor::from_vec(vec![3, 1, 1], vec![0.5, 1.5, 0.5]);
        assert!(apply_degradation(&bad, &p).is_err());
    }

    #[test]
    fn degradation_is_deterministic_for_seed_and_image() {
        let img = test_image(8, 8, 8);
        let p = sample_params(42);
        let a = apply_degradation(&img, &p).unwrap();
        let b = apply_degradation(&img, &sample_params(42)).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
