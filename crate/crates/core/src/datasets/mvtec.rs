use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::Deserialize;

use super::{DatasetSplit, ImageSample, Label, RegionMask};
use crate::error::{Result, SpaceError};

/// One entry of an MVTec LOCO `defects_config.json`.
#[derive(Debug, Deserialize)]
struct DefectConfig {
    pixel_value: u8,
    saturation_threshold: f64,
    relative_saturation: bool,
}

/// Number of `train/good` images carved off for validation.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

pub fn load_mvtec_layout(root: &Path, category: &str, validation_fraction: f64) -> Result<DatasetSplit> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(SpaceError::config(format!(
            "validation_fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let base = root.join(category);
    let good = base.join("train").join("good");
    if !good.is_dir() {
        return Err(SpaceError::config(format!(
            "missing directory {}",
            good.display()
        )));
    }
    let files = list_pngs(&good)?;
    if files.is_empty() {
        return Err(SpaceError::config(format!(
            "no normal training images in {}",
            good.display()
        )));
    }
    let n_val = validation_count(files.len(), validation_fraction);
    let mut normals = files
        .iter()
        .map(|p| read_normal(p, root))
        .collect::<Result<Vec<_>>>()?;
    let validation = normals.split_off(normals.len() - n_val);

    let saturations = read_defect_config(&base)?;
    let mut test = Vec::new();
    let test_dir = base.join("test");
    if test_dir.is_dir() {
        for defect_dir in list_dirs(&test_dir)? {
            let defect = file_name(&defect_dir);
            let label = if defect == "good" {
                Label::Normal
            } else {
                Label::Anomalous
            };
            for path in list_pngs(&defect_dir)? {
                let pixels = read_rgb(&path)?;
                let (gt_regions, saturation_areas) = if label == Label::Anomalous {
                    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    read_regions(&base.join("ground_truth").join(&defect), &stem, saturations.as_deref())?
                } else {
                    (None, None)
                };
                test.push(ImageSample {
                    pixels,
                    identifier: relative_id(&path, root),
                    label,
                    defect_type: defect.clone(),
                    gt_regions,
                    saturation_areas,
                });
            }
        }
    }
    Ok(DatasetSplit {
        train: normals,
        validation,
        test,
    })
}

fn read_normal(path: &Path, root: &Path) -> Result<ImageSample> {
    Ok(ImageSample {
        pixels: read_rgb(path)?,
        identifier: relative_id(path, root),
        label: Label::Normal,
        defect_type: "good".into(),
        gt_regions: None,
        saturation_areas: None,
    })
}

type Regions = (Option<Vec<RegionMask>>, Option<Vec<f64>>);

fn read_regions(gt_dir: &Path, stem: &str, config: Option<&[DefectConfig]>) -> Result<Regions> {
    let mut files = Vec::new();
    let per_image = gt_dir.join(stem);
    if per_image.is_dir() {
        files = list_pngs(&per_image)?;
    } else {
        let single = gt_dir.join(format!("{stem}_mask.png"));
        if single.is_file() {
            files.push(single);
        }
    }
    if files.is_empty() {
        return Ok((None, None));
    }
    let mut regions = Vec::with_capacity(files.len());
    let mut sats = Vec::with_capacity(files.len());
    let mut any_metadata = false;
    for f in &files {
        let gray = read_gray(f)?;
        let value = gray.pixels().map(|p| p[0]).max().unwrap_or(0);
        let mask = RegionMask {
            height: gray.height() as usize,
            width: gray.width() as usize,
            data: gray.pixels().map(|p| p[0] > 0).collect(),
        };
        let area = mask.count() as f64;
        let sat = config
            .and_then(|c| c.iter().find(|d| d.pixel_value == value))
            .map(|d| {
                any_metadata = true;
                if d.relative_saturation {
                    d.saturation_threshold * area
                } else {
                    d.saturation_threshold
                }
            })
            .unwrap_or(area);
        sats.push(sat);
        regions.push(mask);
    }
    Ok((Some(regions), any_metadata.then_some(sats)))
}

fn read_defect_config(base: &Path) -> Result<Option<Vec<DefectConfig>>> {
    let path = base.join("defects_config.json");
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| SpaceError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| SpaceError::Format {
            path,
            reason: e.to_string(),
        })
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| SpaceError::Item {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|e| SpaceError::Item {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = read_dir(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = read_dir(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

fn read_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| SpaceError::io(dir, e))?;
    entries
        .map(|e| e.map(|e| e.path()).map_err(|err| SpaceError::io(dir, err)))
        .collect()
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn relative_id(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Write a split back out in MVTec layout under `root/category`.
///
/// Training images come first and validation images last in `train/good`,
/// so loading with `validation_count(n, f) == validation.len()` recovers the split.
pub fn export_mvtec_layout(split: &DatasetSplit, root: &Path, category: &str) -> Result<()> {
    let base = root.join(category);
    let good = base.join("train").join("good");
    create_dir(&good)?;
    for (i, s) in split.train.iter().chain(&split.validation).enumerate() {
        save_png(&s.pixels, &good.join(format!("{i:03}.png")))?;
    }
    let mut counters: std::collections::BTreeMap<String, usize> = Default::default();
    for s in &split.test {
        let n = counters.entry(s.defect_type.clone()).or_default();
        let stem = format!("{:03}", *n);
        *n += 1;
        let dir = base.join("test").join(&s.defect_type);
        create_dir(&dir)?;
        save_png(&s.pixels, &dir.join(format!("{stem}.png")))?;
        if let Some(regions) = &s.gt_regions {
            let gt = base.join("ground_truth").join(&s.defect_type);
            if regions.len() == 1 {
                create_dir(&gt)?;
                save_mask(&regions[0], &gt.join(format!("{stem}_mask.png")))?;
            } else {
                let d = gt.join(&stem);
                create_dir(&d)?;
                for (ri, r) in regions.iter().enumerate() {
                    save_mask(r, &d.join(format!("{ri:03}.png")))?;
                }
            }
        }
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| SpaceError::io(p, e))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SpaceError::io(path, std::io::Error::other(e.to_string())))
}

fn save_mask(mask: &RegionMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SpaceError::io(path, std::io::Error::other(e.to_string())))
}
