//! Deterministic toy scenes: bright discs on a textured background.
//!
//! Normal scenes hold `discs` discs on a jittered row. Structural anomalies
//! draw a thin dark scratch inside one disc (pixel-accurate mask); logical
//! anomalies drop one disc or add an extra one off the row (whole-image mask).

use image::RgbImage;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplit, ImageSample, Label, RegionMask};
use crate::error::{Result, SpaceError};

pub const STRUCTURAL_DEFECT: &str = "scratch";
pub const LOGICAL_DEFECT: &str = "disc_count";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub discs: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { discs: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyAnomaly {
    None,
    Scratch,
    MissingDisc,
    ExtraDisc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disc {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scratch {
    pub disc: usize,
    pub angle: f32,
    pub offset: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub base: [f32; 3],
    pub phase: f32,
    pub noise_seed: u64,
    pub discs: Vec<Disc>,
    pub scratch: Option<Scratch>,
}

const SCRATCH_HALF_WIDTH: f32 = 0.8;
const SCRATCH_COLOR: [f32; 3] = [0.10, 0.08, 0.06];

fn scratch_hits(s: &Scratch, d: &Disc, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - d.cx, y - d.cy);
    if dx * dx + dy * dy > (d.radius - 1.0).powi(2) {
        return false;
    }
    // signed distance from the line through the disc center, shifted by `offset`
    let (nx, ny) = (-s.angle.sin(), s.angle.cos());
    (dx * nx + dy * ny - s.offset).abs() <= SCRATCH_HALF_WIDTH
}

/// Render a scene; the mask marks scratch pixels when a scratch is present.
pub fn render_scene(scene: &SceneSpec) -> (RgbImage, Option<RegionMask>) {
    let n = scene.size;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let mut mask = scene.scratch.as_ref().map(|_| RegionMask::empty(n, n));
    let tau = std::f32::consts::TAU;
    let img = {
        let mut img = RgbImage::new(n as u32, n as u32);
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let texture = 0.04 * (tau * (3.0 * fx + 2.0 * fy) / n as f32 + scene.phase).sin();
                let noise: f32 = noise_rng.random_range(-0.02..0.02);
                let mut rgb = scene.base.map(|b| b + texture + noise);
                for d in &scene.discs {
                    if (fx - d.cx).powi(2) + (fy - d.cy).powi(2) <= d.radius * d.radius {
                        rgb = d.color.map(|c| c + 0.5 * noise);
                    }
                }
                if let Some(s) = &scene.scratch {
                    if scratch_hits(s, &scene.discs[s.disc], fx, fy) {
                        rgb = SCRATCH_COLOR;
                        if let Some(m) = mask.as_mut() {
                            m.data[y * n + x] = true;
                        }
                    }
                }
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)),
                );
            }
        }
        img
    };
    (img, mask)
}

fn normal_scene(rng: &mut ChaCha8Rng, size: usize, cfg: &ToyConfig) -> SceneSpec {
    let s = size as f32;
    let jitter = s / 32.0;
    let radius = s / 10.0;
    let shade: f32 = rng.random_range(-0.03..0.03);
    let base = [0.35 + shade, 0.33 + shade, 0.31 + shade];
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let discs = (0..cfg.discs)
        .map(|i| {
            let tint: f32 = rng.random_range(-0.03..0.03);
            Disc {
                cx: s * (i as f32 + 0.5) / cfg.discs as f32 + rng.random_range(-jitter..=jitter),
                cy: s / 2.0 + rng.random_range(-jitter..=jitter),
                radius,
                color: [0.85 + tint, 0.75 + tint, 0.30 + tint],
            }
        })
        .collect();
    SceneSpec {
        size,
        base,
        phase,
        noise_seed: rng.next_u64(),
        discs,
        scratch: None,
    }
}

pub fn plan_scene(rng: &mut ChaCha8Rng, size: usize, cfg: &ToyConfig, anomaly: ToyAnomaly) -> SceneSpec {
    let mut scene = normal_scene(rng, size, cfg);
    let s = size as f32;
    match anomaly {
        ToyAnomaly::None => {}
        ToyAnomaly::Scratch => {
            let disc = rng.random_range(0..scene.discs.len());
            let r = scene.discs[disc].radius;
            scene.scratch = Some(Scratch {
                disc,
                angle: rng.random_range(0.0..std::f32::consts::PI),
                offset: rng.random_range(-r / 3.0..r / 3.0),
            });
        }
        ToyAnomaly::MissingDisc => {
            let i = rng.random_range(0..scene.discs.len());
            scene.discs.remove(i);
        }
        ToyAnomaly::ExtraDisc => {
            let template = scene.discs[rng.random_range(0..scene.discs.len())].clone();
            let r = template.radius;
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            scene.discs.push(Disc {
                cx: rng.random_range(r + 1.0..s - r - 1.0),
                cy: s / 2.0 + side * s / 4.0,
                ..template
            });
        }
    }
    scene
}

fn sample_from_scene(scene: &SceneSpec, id: String, anomaly: ToyAnomaly) -> ImageSample {
    let (pixels, scratch_mask) = render_scene(scene);
    let n = scene.size;
    let (label, defect_type, gt_regions) = match anomaly {
        ToyAnomaly::None => (Label::Normal, "good", None),
        ToyAnomaly::Scratch => (
            Label::Anomalous,
            STRUCTURAL_DEFECT,
            Some(vec![scratch_mask.unwrap_or_else(|| RegionMask::empty(n, n))]),
        ),
        ToyAnomaly::MissingDisc | ToyAnomaly::ExtraDisc => {
            (Label::Anomalous, LOGICAL_DEFECT, Some(vec![RegionMask::full(n, n)]))
        }
    };
    ImageSample {
        pixels,
        identifier: id,
        label,
        defect_type: defect_type.into(),
        gt_regions,
        saturation_areas: None,
    }
}

/// Scene plans for every sample of a toy dataset, in the order they are rendered.
pub struct ToyPlan {
    pub train: Vec<SceneSpec>,
    pub validation: Vec<SceneSpec>,
    pub test: Vec<(SceneSpec, ToyAnomaly)>,
}

pub fn plan_toy_dataset(
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test_per_class: usize,
    image_size: usize,
    cfg: &ToyConfig,
) -> Result<ToyPlan> {
    if n_train == 0 || n_val == 0 || n_test_per_class == 0 {
        return Err(SpaceError::config("toy dataset counts must all be at least 1"));
    }
    if image_size < 32 {
        return Err(SpaceError::config(format!(
            "toy image_size must be at least 32, got {image_size}"
        )));
    }
    if cfg.discs == 0 {
        return Err(SpaceError::config("toy scenes need at least one disc"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut next = |anomaly| {
        let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        plan_scene(&mut rng, image_size, cfg, anomaly)
    };
    let train = (0..n_train).map(|_| next(ToyAnomaly::None)).collect();
    let validation = (0..n_val).map(|_| next(ToyAnomaly::None)).collect();
    let mut test = Vec::with_capacity(3 * n_test_per_class);
    for _ in 0..n_test_per_class {
        test.push((next(ToyAnomaly::None), ToyAnomaly::None));
    }
    for _ in 0..n_test_per_class {
        test.push((next(ToyAnomaly::Scratch), ToyAnomaly::Scratch));
    }
    for i in 0..n_test_per_class {
        let kind = if i % 2 == 0 {
            ToyAnomaly::MissingDisc
        } else {
            ToyAnomaly::ExtraDisc
        };
        test.push((next(kind), kind));
    }
    Ok(ToyPlan {
        train,
        validation,
        test,
    })
}

/// Train/validation are normal only; test holds `n_test_per_class` good,
/// scratched and wrong-disc-count images each.
pub fn synth_toy_dataset(
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test_per_class: usize,
    image_size: usize,
) -> Result<DatasetSplit> {
    let plan = plan_toy_dataset(seed, n_train, n_val, n_test_per_class, image_size, &ToyConfig::default())?;
    Ok(render_plan(&plan))
}

pub fn render_plan(plan: &ToyPlan) -> DatasetSplit {
    let normals = |scenes: &[SceneSpec], part: &str| -> Vec<ImageSample> {
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| sample_from_scene(s, format!("toy/{part}/{i:03}"), ToyAnomaly::None))
            .collect()
    };
    let test = plan
        .test
        .iter()
        .enumerate()
        .map(|(i, (s, a))| sample_from_scene(s, format!("toy/test/{i:03}"), *a))
        .collect();
    DatasetSplit {
        train: normals(&plan.train, "train"),
        validation: normals(&plan.validation, "validation"),
        test,
    }
}
