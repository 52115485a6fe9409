//! Dataset samples, MVTec-layout loading/export and the synthetic toy generator.

mod mvtec;
mod synth;

pub use mvtec::{export_mvtec_layout, load_mvtec_layout, validation_count};
pub use synth::{
    plan_scene, plan_toy_dataset, render_plan, render_scene, synth_toy_dataset, Disc, SceneSpec, Scratch,
    ToyAnomaly, ToyConfig, ToyPlan, LOGICAL_DEFECT, STRUCTURAL_DEFECT,
};

use image::RgbImage;

use crate::imaging::PixelImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }
}

/// Binary per-pixel mask of a single defect region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl RegionMask {
    pub fn empty(height: usize, width: usize) -> Self {
        RegionMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        RegionMask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour resampling, used when maps and masks differ in size.
    pub fn resize_nearest(&self, height: usize, width: usize) -> RegionMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = RegionMask::empty(height, width);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                out.data[y * width + x] = self.get(sy, sx);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: RgbImage,
    pub identifier: String,
    pub label: Label,
    pub defect_type: String,
    pub gt_regions: Option<Vec<RegionMask>>,
    /// One entry per region, in pixels; `None` means "use the region area".
    pub saturation_areas: Option<Vec<f64>>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }

    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    /// Saturation area of each region, clamped to the region's pixel count.
    pub fn region_saturations(&self) -> Vec<f64> {
        let Some(regions) = &self.gt_regions else {
            return Vec::new();
        };
        regions
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let area = r.count() as f64;
                let sat = self
                    .saturation_areas
                    .as_ref()
                    .and_then(|s| s.get(i).copied())
                    .unwrap_or(area);
                sat.min(area)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub validation: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Resize to `size × size`, scale to `[0, 1]`, standardize per channel.
pub fn to_model_input(sample: &ImageSample, size: usize) -> Tensor {
    to_unit_image(sample, size).standardize()
}

/// The pre-standardization view that augmentations operate on.
pub fn to_unit_image(sample: &ImageSample, size: usize) -> PixelImage {
    PixelImage::from_rgb8(&sample.pixels).resize(size, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_sample(rgb: [u8; 3], size: u32) -> ImageSample {
        ImageSample {
            pixels: RgbImage::from_pixel(size, size, image::Rgb(rgb)),
            identifier: "c".into(),
            label: Label::Normal,
            defect_type: "good".into(),
            gt_regions: None,
            saturation_areas: None,
        }
    }

    #[test]
    fn mean_valued_channel_standardizes_to_zero() {
        let v = (0.485f32 * 255.0).round() as u8;
        let t = to_model_input(&constant_sample([v, 0, 0], 40), 32);
        assert_eq!(t.shape(), &[3, 32, 32]);
        assert!(t.data()[..32 * 32].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn white_image_channel_zero_value() {
        let t = to_model_input(&constant_sample([255, 255, 255], 16), 16);
        let expected = (1.0 - 0.485) / 0.229;
        assert!((t.data()[0] - expected).abs() < 1e-5);
        assert!((expected - 2.249).abs() < 1e-3);
    }

    #[test]
    fn same_size_input_is_only_standardized() {
        let mut img = RgbImage::new(8, 8);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([(x * 30) as u8, (y * 30) as u8, 7]);
        }
        let s = ImageSample {
            pixels: img.clone(),
            ..constant_sample([0, 0, 0], 8)
        };
        let t = to_model_input(&s, 8);
        let direct = PixelImage::from_rgb8(&img).standardize();
        assert_eq!(t, direct);
    }

    #[test]
    fn saturation_defaults_to_area_and_is_clamped() {
        let mut m = RegionMask::empty(4, 4);
        m.data[0] = true;
        m.data[1] = true;
        let mut s = constant_sample([0, 0, 0], 4);
        s.label = Label::Anomalous;
        s.gt_regions = Some(vec![m.clone(), m]);
        assert_eq!(s.region_saturations(), vec![2.0, 2.0]);
        s.saturation_areas = Some(vec![1.0, 10.0]);
        assert_eq!(s.region_saturations(), vec![1.0, 2.0]);
    }
}
