//! Planar float images in `[0, 1]` pixel space, resampling, and standardization.

use image::RgbImage;

use crate::tensor::Tensor;

/// Per-channel standardization constants applied after augmentation.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Three planes (R, G, B) of `height × width` intensities, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl PixelImage {
    pub fn new(height: usize, width: usize) -> Self {
        PixelImage {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..3 {
            img.plane_mut(c).fill(rgb[c]);
        }
        img
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(h, w);
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                out.data[c * h * w + i] = p[c] as f32 / 255.0;
            }
        }
        out
    }

    /// From interleaved 8-bit RGB rows; `None` when the length does not match.
    pub fn from_rgb_bytes(height: usize, width: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 3 * height * width {
            return None;
        }
        let mut out = Self::new(height, width);
        let n = height * width;
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out.data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Some(out)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb(std::array::from_fn(|c| {
                (self.data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// ITU-R 601 luma plane.
    pub fn grayscale(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn resize(&self, height: usize, width: usize) -> PixelImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = PixelImage::new(height, width);
        for c in 0..3 {
            let r = resize_plane_bilinear(self.plane(c), self.height, self.width, height, width);
            out.plane_mut(c).copy_from_slice(&r);
        }
        out
    }

    /// `(x − mean_c) / std_c` per channel, as a `[3, H, W]` tensor.
    pub fn standardize(&self) -> Tensor {
        let n = self.height * self.width;
        let mut data = self.data.clone();
        for c in 0..3 {
            for v in &mut data[c * n..(c + 1) * n] {
                *v = (*v - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("planar image layout")
    }
}

/// Bilinear resampling with half-pixel centers; edges clamp.
pub fn resize_plane_bilinear(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    if h == nh && w == nw {
        return src.to_vec();
    }
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    let taps = |dst: usize, scale: f32, len: usize| {
        let p = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f32)
    };
    let xs: Vec<_> = (0..nw).map(|x| taps(x, sx, w)).collect();
    let mut out = vec![0.0f32; nh * nw];
    for y in 0..nh {
        let (y0, y1, fy) = taps(y, sy, h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * nw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Sample a plane at a fractional location with edge replication.
pub fn sample_bilinear_clamped(src: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}
