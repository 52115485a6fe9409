//! Training views: weak (small shift), strong (flips + RandAugment) and
//! color-jittered. All operate on `[0, 1]` pixel images before standardization
//! and fill vacated borders by edge replication.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaceError};
use crate::imaging::{sample_bilinear_clamped, PixelImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub weak_max_shift: usize,
    pub rand_n: usize,
    pub rand_m: u32,
    pub flip_h: bool,
    pub flip_v: bool,
    pub jitter_strength: f32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            weak_max_shift: 3,
            rand_n: 4,
            rand_m: 10,
            flip_h: true,
            flip_v: true,
            jitter_strength: 0.2,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rand_m > 30 {
            return Err(SpaceError::config(format!("rand_m must be in 0..=30, got {}", self.rand_m)));
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return Err(SpaceError::config(format!(
                "jitter_strength must be in [0, 1), got {}",
                self.jitter_strength
            )));
        }
        Ok(())
    }
}

/// The RandAugment operation pool (cutout excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandOp {
    AutoContrast,
    Equalize,
    Rotate,
    Posterize,
    Solarize,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

pub const RAND_OPS: [RandOp; 13] = [
    RandOp::AutoContrast,
    RandOp::Equalize,
    RandOp::Rotate,
    RandOp::Posterize,
    RandOp::Solarize,
    RandOp::Color,
    RandOp::Contrast,
    RandOp::Brightness,
    RandOp::Sharpness,
    RandOp::ShearX,
    RandOp::ShearY,
    RandOp::TranslateX,
    RandOp::TranslateY,
];

pub fn weak_augment(image: &PixelImage, spec: &AugmentSpec, rng: &mut impl Rng) -> PixelImage {
    let m = spec.weak_max_shift as i64;
    if m == 0 {
        return image.clone();
    }
    let dx = rng.random_range(-m..=m);
    let dy = rng.random_range(-m..=m);
    shift(image, dx, dy)
}

/// Integer translation by `(dx, dy)` with edge replication.
pub fn shift(image: &PixelImage, dx: i64, dy: i64) -> PixelImage {
    let (h, w) = (image.height as i64, image.width as i64);
    let mut out = PixelImage::new(image.height, image.width);
    for c in 0..3 {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            let sy = (y - dy).clamp(0, h - 1);
            for x in 0..w {
                let sx = (x - dx).clamp(0, w - 1);
                dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
            }
        }
    }
    out
}

pub fn flip_horizontal(image: &PixelImage) -> PixelImage {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    for c in 0..3 {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[y * w + (w - 1 - x)];
            }
        }
    }
    out
}

pub fn flip_vertical(image: &PixelImage) -> PixelImage {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    for c in 0..3 {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
        }
    }
    out
}

pub fn strong_augment(image: &PixelImage, spec: &AugmentSpec, rng: &mut impl Rng) -> PixelImage {
    let mut img = image.clone();
    if spec.flip_h && rng.random_bool(0.5) {
        img = flip_horizontal(&img);
    }
    if spec.flip_v && rng.random_bool(0.5) {
        img = flip_vertical(&img);
    }
    for _ in 0..spec.rand_n {
        let op = RAND_OPS[rng.random_range(0..RAND_OPS.len())];
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        img = apply_rand_op(&img, op, spec.rand_m, sign);
    }
    img
}

/// One RandAugment op at magnitude `m` on the 0–30 scale; `sign` picks the
/// direction for signed ops.
pub fn apply_rand_op(img: &PixelImage, op: RandOp, m: u32, sign: f32) -> PixelImage {
    let frac = m.min(30) as f32 / 30.0;
    let mut out = match op {
        RandOp::AutoContrast => autocontrast(img),
        RandOp::Equalize => equalize(img),
        RandOp::Rotate => {
            let theta = (sign * 30.0 * frac).to_radians();
            affine(img, theta.cos(), theta.sin(), -theta.sin(), theta.cos(), 0.0, 0.0)
        }
        RandOp::Posterize => {
            let bits = 8 - (4.0 * frac) as u32;
            posterize(img, bits)
        }
        RandOp::Solarize => solarize(img, 1.0 - frac),
        RandOp::Color => adjust_saturation(img, 1.0 + sign * 0.9 * frac),
        RandOp::Contrast => adjust_contrast(img, 1.0 + sign * 0.9 * frac),
        RandOp::Brightness => adjust_brightness(img, 1.0 + sign * 0.9 * frac),
        RandOp::Sharpness => sharpness(img, 1.0 + sign * 0.9 * frac),
        RandOp::ShearX => affine(img, 1.0, sign * 0.3 * frac, 0.0, 1.0, 0.0, 0.0),
        RandOp::ShearY => affine(img, 1.0, 0.0, sign * 0.3 * frac, 1.0, 0.0, 0.0),
        RandOp::TranslateX => {
            let t = sign * 0.45 * frac * img.width as f32;
            affine(img, 1.0, 0.0, 0.0, 1.0, t, 0.0)
        }
        RandOp::TranslateY => {
            let t = sign * 0.45 * frac * img.height as f32;
            affine(img, 1.0, 0.0, 0.0, 1.0, 0.0, t)
        }
    };
    out.clamp_unit();
    out
}

/// Inverse-mapped affine warp about the image center:
/// `src = [[a, b], [c, d]] · (dst − center − t) + center`.
fn affine(img: &PixelImage, a: f32, b: f32, c: f32, d: f32, tx: f32, ty: f32) -> PixelImage {
    let (h, w) = (img.height, img.width);
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut out = PixelImage::new(h, w);
    for ch in 0..3 {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 - cx - tx, y as f32 - cy - ty);
                let sx = a * u + b * v + cx;
                let sy = c * u + d * v + cy;
                dst[y * w + x] = sample_bilinear_clamped(src, h, w, sy, sx);
            }
        }
    }
    out
}

fn autocontrast(img: &PixelImage) -> PixelImage {
    let mut out = img.clone();
    for c in 0..3 {
        let p = out.plane_mut(c);
        let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            for v in p.iter_mut() {
                *v = (*v - lo) / (hi - lo);
            }
        }
    }
    out
}

fn to_level(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Histogram equalization over 256 levels per channel.
fn equalize(img: &PixelImage) -> PixelImage {
    let mut out = img.clone();
    for c in 0..3 {
        let p = out.plane_mut(c);
        let mut hist = [0usize; 256];
        for &v in p.iter() {
            hist[to_level(v)] += 1;
        }
        let last = hist.iter().rposition(|&n| n > 0).map_or(0, |i| hist[i]);
        let step = (p.len() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0.0f32; 256];
        let mut acc = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (acc / step).min(255) as f32 / 255.0;
            acc += hist[i];
        }
        for v in p.iter_mut() {
            *v = lut[to_level(*v)];
        }
    }
    out
}

fn posterize(img: &PixelImage, bits: u32) -> PixelImage {
    let mask = !((1usize << (8 - bits)) - 1) & 0xff;
    img_map(img, |v| (to_level(v) & mask) as f32 / 255.0)
}

fn solarize(img: &PixelImage, threshold: f32) -> PixelImage {
    img_map(img, |v| if v >= threshold { 1.0 - v } else { v })
}

fn img_map(img: &PixelImage, f: impl Fn(f32) -> f32) -> PixelImage {
    PixelImage {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|&v| f(v)).collect(),
    }
}

fn blend(degenerate: &PixelImage, img: &PixelImage, factor: f32) -> PixelImage {
    PixelImage {
        height: img.height,
        width: img.width,
        data: degenerate
            .data
            .iter()
            .zip(&img.data)
            .map(|(&d, &v)| d + factor * (v - d))
            .collect(),
    }
}

/// Multiply intensities by `factor`, clamped to `[0, 1]`.
pub fn adjust_brightness(img: &PixelImage, factor: f32) -> PixelImage {
    img_map(img, |v| (v * factor).clamp(0.0, 1.0))
}

/// Scale deviations from the mean gray level by `factor`.
pub fn adjust_contrast(img: &PixelImage, factor: f32) -> PixelImage {
    let gray = img.grayscale();
    let mean = gray.iter().map(|&v| v as f64).sum::<f64>() / gray.len().max(1) as f64;
    let degenerate = PixelImage::filled(img.height, img.width, [mean as f32; 3]);
    let mut out = blend(&degenerate, img, factor);
    out.clamp_unit();
    out
}

/// Scale deviations from each pixel's gray value by `factor`.
pub fn adjust_saturation(img: &PixelImage, factor: f32) -> PixelImage {
    let gray = img.grayscale();
    let mut degenerate = PixelImage::new(img.height, img.width);
    for c in 0..3 {
        degenerate.plane_mut(c).copy_from_slice(&gray);
    }
    let mut out = blend(&degenerate, img, factor);
    out.clamp_unit();
    out
}

fn sharpness(img: &PixelImage, factor: f32) -> PixelImage {
    let (h, w) = (img.height, img.width);
    let mut smooth = img.clone();
    if h >= 3 && w >= 3 {
        for c in 0..3 {
            let src = img.plane(c);
            let dst = smooth.plane_mut(c);
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let mut acc = 4.0 * src[y * w + x];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += src[(y + dy - 1) * w + (x + dx - 1)];
                        }
                    }
                    dst[y * w + x] = acc / 13.0;
                }
            }
        }
    }
    blend(&smooth, img, factor)
}

/// Brightness, contrast and saturation factors drawn from
/// `[1 − s, 1 + s]`, applied in random order.
pub fn color_jitter(image: &PixelImage, spec: &AugmentSpec, rng: &mut impl Rng) -> PixelImage {
    let s = spec.jitter_strength;
    if s == 0.0 {
        return image.clone();
    }
    let mut order = [0usize, 1, 2];
    order.shuffle(rng);
    let factors: [f32; 3] = std::array::from_fn(|_| rng.random_range(1.0 - s..=1.0 + s));
    let mut img = image.clone();
    img.clamp_unit();
    for &k in &order {
        img = match k {
            0 => adjust_brightness(&img, factors[0]),
            1 => adjust_contrast(&img, factors[1]),
            _ => adjust_saturation(&img, factors[2]),
        };
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(n: usize) -> PixelImage {
        let mut img = PixelImage::new(n, n);
        for c in 0..3 {
            let p = img.plane_mut(c);
            for y in 0..n {
                for x in 0..n {
                    p[y * n + x] = ((x * 7 + y * 3 + c * 11) % 32) as f32 / 31.0;
                }
            }
        }
        img
    }

    fn mean_abs_change(a: &PixelImage, b: &PixelImage) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data.len() as f64
    }

    #[test]
    fn zero_shift_is_identity() {
        let img = gradient_image(16);
        let spec = AugmentSpec {
            weak_max_shift: 0,
            ..Default::default()
        };
        assert_eq!(weak_augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(1)), img);
    }

    #[test]
    fn weak_shift_covers_full_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let dx: i64 = rng.random_range(-3..=3);
            let dy: i64 = rng.random_range(-3..=3);
            assert!(dx.abs() <= 3 && dy.abs() <= 3);
            seen.insert((dx, dy));
        }
        assert_eq!(seen.len(), 49);
        // and the augmentation itself realises one of those shifts
        let img = gradient_image(12);
        let out = weak_augment(&img, &AugmentSpec::default(), &mut ChaCha8Rng::seed_from_u64(3));
        let found = (-3..=3).any(|dx| (-3..=3).any(|dy| shift(&img, dx, dy) == out));
        assert!(found);
    }

    #[test]
    fn shift_replicates_edges() {
        let img = gradient_image(8);
        let out = shift(&img, 2, 0);
        for y in 0..8 {
            assert_eq!(out.at(0, y, 0), img.at(0, y, 0));
            assert_eq!(out.at(0, y, 1), img.at(0, y, 0));
            assert_eq!(out.at(0, y, 5), img.at(0, y, 3));
        }
    }

    #[test]
    fn strong_identity_when_disabled() {
        let img = gradient_image(16);
        let spec = AugmentSpec {
            rand_n: 0,
            flip_h: false,
            flip_v: false,
            ..Default::default()
        };
        assert_eq!(strong_augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(9)), img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = gradient_image(9);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn same_seed_same_outputs() {
        let img = gradient_image(24);
        let spec = AugmentSpec::default();
        for seed in 0..20 {
            let a = strong_augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = strong_augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
            let a = color_jitter(&img, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = color_jitter(&img, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn every_op_preserves_shape_and_range() {
        let img = gradient_image(20);
        for op in RAND_OPS {
            for sign in [-1.0, 1.0] {
                let out = apply_rand_op(&img, op, 10, sign);
                assert_eq!((out.height, out.width, out.data.len()), (20, 20, img.data.len()));
                assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?}");
            }
        }
    }

    #[test]
    fn zero_magnitude_geometric_ops_are_identity() {
        let img = gradient_image(10);
        for op in [RandOp::Rotate, RandOp::ShearX, RandOp::ShearY, RandOp::TranslateX, RandOp::TranslateY] {
            let out = apply_rand_op(&img, op, 0, 1.0);
            assert!(mean_abs_change(&img, &out) < 1e-6, "{op:?}");
        }
    }

    #[test]
    fn jitter_zero_strength_is_identity() {
        let img = gradient_image(8);
        let spec = AugmentSpec {
            jitter_strength: 0.0,
            ..Default::default()
        };
        assert_eq!(color_jitter(&img, &spec, &mut ChaCha8Rng::seed_from_u64(2)), img);
    }

    #[test]
    fn brightness_scales_mid_gray() {
        let img = PixelImage::filled(4, 4, [0.5; 3]);
        let out = adjust_brightness(&img, 1.2);
        assert!(out.data.iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn weak_changes_less_than_strong_on_average() {
        let mut img = PixelImage::new(32, 32);
        for c in 0..3 {
            let p = img.plane_mut(c);
            for y in 0..32 {
                for x in 0..32 {
                    p[y * 32 + x] = 0.2 + 0.6 * (x + y) as f32 / 62.0;
                }
            }
        }
        let spec = AugmentSpec::default();
        let (mut weak, mut strong) = (0.0, 0.0);
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            weak += mean_abs_change(&img, &weak_augment(&img, &spec, &mut rng));
            strong += mean_abs_change(&img, &strong_augment(&img, &spec, &mut rng));
        }
        assert!(weak <= strong, "weak {weak} strong {strong}");
    }

    #[test]
    fn validation_rejects_out_of_range() {
        assert!(AugmentSpec { rand_m: 31, ..Default::default() }.validate().is_err());
        assert!(AugmentSpec { jitter_strength: 1.0, ..Default::default() }.validate().is_err());
        assert!(AugmentSpec::default().validate().is_ok());
    }
}
