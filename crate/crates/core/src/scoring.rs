//! Per-pixel anomaly maps, validation-quantile calibration, image scores, and
//! the raw-map / heatmap / score-table file formats.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageSample;
use crate::error::{Result, SpaceError};
use crate::imaging::{resize_plane_bilinear, PixelImage};
use crate::losses::quantile;
use crate::networks::{
    encoder_features, fm_forward, normalize_teacher, pdn_features, teacher_forward, FeatureMap, Networks,
    TeacherStats,
};

pub const CALIBRATION_LOW: f64 = 0.90;
pub const CALIBRATION_HIGH: f64 = 0.995;
pub const NORMALIZE_EPS: f64 = 1e-9;

pub const SPMAP_MAGIC: &[u8; 6] = b"SPMAP\0";
pub const SPMAP_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Structural,
    Logical,
    Total,
}

impl MapKind {
    pub fn code(self) -> u16 {
        match self {
            MapKind::Structural => 0,
            MapKind::Logical => 1,
            MapKind::Total => 2,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(MapKind::Structural),
            1 => Some(MapKind::Logical),
            2 => Some(MapKind::Total),
            _ => None,
        }
    }
}

/// An `H × W` row-major grid of anomaly values.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub kind: MapKind,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl AnomalyMap {
    pub fn new(kind: MapKind, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(SpaceError::contract(format!(
                "map of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(AnomalyMap {
            kind,
            height,
            width,
            values,
        })
    }

    pub fn resized(&self, height: usize, width: usize) -> AnomalyMap {
        AnomalyMap {
            kind: self.kind,
            height,
            width,
            values: resize_plane_bilinear(&self.values, self.height, self.width, height, width),
        }
    }
}

/// Channel mean of `(a − b)²` at every spatial position.
pub fn channel_mean_sq_diff(a: &FeatureMap, b: &FeatureMap) -> Result<Vec<f32>> {
    if a.dims() != b.dims() {
        return Err(SpaceError::contract(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (c, h, w) = a.dims();
    let (da, db) = (a.values.data(), b.values.data());
    let mut acc = vec![0.0f64; h * w];
    for ch in 0..c {
        let off = ch * h * w;
        for (i, slot) in acc.iter_mut().enumerate() {
            let d = (da[off + i] - db[off + i]) as f64;
            *slot += d * d;
        }
    }
    Ok(acc.into_iter().map(|v| (v / c as f64) as f32).collect())
}

/// Validation quantiles used to put both raw map kinds on a common scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub structural_lo: f64,
    pub structural_hi: f64,
    pub logical_lo: f64,
    pub logical_hi: f64,
}

impl CalibrationStats {
    /// Stats under which normalization is the identity (up to the epsilon guard).
    pub fn unit() -> Self {
        CalibrationStats {
            structural_lo: 0.0,
            structural_hi: 1.0,
            logical_lo: 0.0,
            logical_hi: 1.0,
        }
    }

    pub fn from_pools(structural: &[f32], logical: &[f32]) -> Result<Self> {
        if structural.is_empty() || logical.is_empty() {
            return Err(SpaceError::config("calibration needs at least one validation image"));
        }
        Ok(CalibrationStats {
            structural_lo: quantile(structural, CALIBRATION_LOW)? as f64,
            structural_hi: quantile(structural, CALIBRATION_HIGH)? as f64,
            logical_lo: quantile(logical, CALIBRATION_LOW)? as f64,
            logical_hi: quantile(logical, CALIBRATION_HIGH)? as f64,
        })
    }

    fn bounds(&self, kind: MapKind) -> Result<(f64, f64)> {
        match kind {
            MapKind::Structural => Ok((self.structural_lo, self.structural_hi)),
            MapKind::Logical => Ok((self.logical_lo, self.logical_hi)),
            MapKind::Total => Err(SpaceError::contract("total maps are already normalized")),
        }
    }
}

/// Trained networks plus everything needed to score an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub nets: Networks,
    pub teacher_stats: TeacherStats,
    /// Feed the EMA shadow student (instead of the live one) to the converter.
    pub ema_for_logical: bool,
    pub calibration: Option<CalibrationStats>,
}

/// Un-normalized structural and logical maps at the image's own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMaps {
    pub structural: AnomalyMap,
    pub logical: AnomalyMap,
}

pub fn raw_maps(model: &Model, image: &PixelImage) -> Result<RawMaps> {
    let nets = &model.nets;
    let size = nets.config.input_size;
    let x = image.resize(size, size).standardize();
    let t = normalize_teacher(&teacher_forward(nets, &x)?, &model.teacher_stats)?;
    let s = FeatureMap::new(pdn_features(&nets.config, &nets.student, &x)?)?;
    let s_fm = if model.ema_for_logical {
        FeatureMap::new(pdn_features(&nets.config, &nets.student_ema, &x)?)?
    } else {
        s.clone()
    };
    let ae = encoder_features(nets, &x)?;
    let converted = fm_forward(nets, &s_fm)?;
    let (_, fh, fw) = t.dims();
    let structural = AnomalyMap::new(MapKind::Structural, fh, fw, channel_mean_sq_diff(&t, &s)?)?;
    let logical = AnomalyMap::new(MapKind::Logical, fh, fw, channel_mean_sq_diff(&ae, &converted)?)?;
    Ok(RawMaps {
        structural: structural.resized(image.height, image.width),
        logical: logical.resized(image.height, image.width),
    })
}

pub fn map_structural(model: &Model, image: &PixelImage) -> Result<AnomalyMap> {
    Ok(raw_maps(model, image)?.structural)
}

pub fn map_logical(model: &Model, image: &PixelImage) -> Result<AnomalyMap> {
    Ok(raw_maps(model, image)?.logical)
}

/// Raw maps for many samples, in input order, computed in parallel.
pub fn raw_maps_for(model: &Model, samples: &[ImageSample]) -> Result<Vec<RawMaps>> {
    samples
        .par_iter()
        .map(|s| raw_maps(model, &PixelImage::from_rgb8(&s.pixels)))
        .collect()
}

pub fn calibrate(model: &Model, validation: &[ImageSample]) -> Result<CalibrationStats> {
    if validation.is_empty() {
        return Err(SpaceError::config("calibration needs at least one validation image"));
    }
    let maps = raw_maps_for(model, validation)?;
    let structural: Vec<f32> = maps.iter().flat_map(|m| m.structural.values.iter().copied()).collect();
    let logical: Vec<f32> = maps.iter().flat_map(|m| m.logical.values.iter().copied()).collect();
    CalibrationStats::from_pools(&structural, &logical)
}

/// `(m − q_lo) / (q_hi − q_lo + ε)`, not clamped.
pub fn normalize_map(m: &AnomalyMap, cs: &CalibrationStats) -> Result<AnomalyMap> {
    let (lo, hi) = cs.bounds(m.kind)?;
    let denom = hi - lo + NORMALIZE_EPS;
    Ok(AnomalyMap {
        values: m.values.iter().map(|&v| ((v as f64 - lo) / denom) as f32).collect(),
        ..m.clone()
    })
}

/// Equal-weight average of normalized structural and logical maps.
pub fn map_total(ms: &AnomalyMap, ml: &AnomalyMap) -> Result<AnomalyMap> {
    if (ms.height, ms.width) != (ml.height, ml.width) {
        return Err(SpaceError::contract(format!(
            "cannot combine {}x{} and {}x{} maps",
            ms.height, ms.width, ml.height, ml.width
        )));
    }
    let values = ms.values.iter().zip(&ml.values).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    AnomalyMap::new(MapKind::Total, ms.height, ms.width, values)
}

pub fn image_score(m: &AnomalyMap) -> f32 {
    m.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub structural: AnomalyMap,
    pub logical: AnomalyMap,
    pub total: AnomalyMap,
    pub score: f32,
}

pub fn score_maps(raw: &RawMaps, cs: &CalibrationStats) -> Result<ScoredImage> {
    let structural = normalize_map(&raw.structural, cs)?;
    let logical = normalize_map(&raw.logical, cs)?;
    let total = map_total(&structural, &logical)?;
    let score = image_score(&total);
    Ok(ScoredImage {
        structural,
        logical,
        total,
        score,
    })
}

fn require_calibration(model: &Model) -> Result<&CalibrationStats> {
    model
        .calibration
        .as_ref()
        .ok_or_else(|| SpaceError::config("checkpoint has no calibration statistics; run calibrate first"))
}

pub fn score_image(model: &Model, image: &PixelImage) -> Result<ScoredImage> {
    let cs = require_calibration(model)?;
    score_maps(&raw_maps(model, image)?, cs)
}

pub fn score_samples(model: &Model, samples: &[ImageSample]) -> Result<Vec<ScoredImage>> {
    let cs = *require_calibration(model)?;
    raw_maps_for(model, samples)?
        .iter()
        .map(|r| score_maps(r, &cs))
        .collect()
}

pub fn encode_spmap(m: &AnomalyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 4 * m.values.len());
    out.extend_from_slice(SPMAP_MAGIC);
    out.extend_from_slice(&SPMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&m.kind.code().to_le_bytes());
    out.extend_from_slice(&(m.height as u32).to_le_bytes());
    out.extend_from_slice(&(m.width as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_spmap(bytes: &[u8], path: &Path) -> Result<AnomalyMap> {
    let bad = |reason: &str| SpaceError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 18 || &bytes[..6] != SPMAP_MAGIC {
        return Err(bad("missing SPMAP header"));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != SPMAP_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let kind = MapKind::from_code(u16::from_le_bytes([bytes[8], bytes[9]])).ok_or_else(|| bad("unknown map kind"))?;
    let h = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let body = &bytes[18..];
    if body.len() != 4 * h * w {
        return Err(bad(&format!("expected {} payload bytes, found {}", 4 * h * w, body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    AnomalyMap::new(kind, h, w, values)
}

pub fn write_spmap(path: &Path, m: &AnomalyMap) -> Result<()> {
    std::fs::write(path, encode_spmap(m)).map_err(|e| SpaceError::io(path, e))
}

pub fn read_spmap(path: &Path) -> Result<AnomalyMap> {
    let bytes = std::fs::read(path).map_err(|e| SpaceError::io(path, e))?;
    decode_spmap(&bytes, path)
}

/// Color stops of the heatmap ramp, evenly spaced over indices 0..=255.
const RAMP_STOPS: [[u8; 3]; 5] = [[0, 0, 0], [48, 18, 160], [200, 40, 120], [250, 150, 30], [255, 255, 220]];

/// The fixed 256-entry heatmap palette (piecewise linear through [`RAMP_STOPS`]).
pub fn heatmap_ramp() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    let segments = RAMP_STOPS.len() - 1;
    for (i, entry) in table.iter_mut().enumerate() {
        let pos = i * segments;
        let seg = (pos / 255).min(segments - 1);
        let rem = pos - seg * 255;
        let (a, b) = (RAMP_STOPS[seg], RAMP_STOPS[seg + 1]);
        for c in 0..3 {
            let v = a[c] as usize * (255 - rem) + b[c] as usize * rem;
            entry[c] = ((v + 127) / 255) as u8;
        }
    }
    table
}

/// Palette index for a value: `[lo, hi]` maps linearly onto `0..=255`, clamped.
pub fn ramp_index(v: f32, lo: f32, hi: f32) -> u8 {
    if !v.is_finite() || hi <= lo {
        return 0;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Colorize a map over `[0, 1]` (the calibrated range).
pub fn heatmap_image(m: &AnomalyMap) -> image::RgbImage {
    let ramp = heatmap_ramp();
    let mut img = image::RgbImage::new(m.width as u32, m.height as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        *p = image::Rgb(ramp[ramp_index(m.values[i], 0.0, 1.0) as usize]);
    }
    img
}

pub fn write_heatmap(path: &Path, m: &AnomalyMap) -> Result<()> {
    heatmap_image(m)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SpaceError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// `identifier,label,score` rows.
pub fn write_scores_csv(path: &Path, rows: &[(String, String, f32)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| SpaceError::io(path, e))?);
    let mut emit = || -> std::io::Result<()> {
        writeln!(f, "identifier,label,score")?;
        for (id, label, score) in rows {
            writeln!(f, "{id},{label},{score}")?;
        }
        f.flush()
    };
    emit().map_err(|e| SpaceError::io(path, e))
}
