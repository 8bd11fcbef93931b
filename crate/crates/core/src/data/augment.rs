//! Resize, centre crop and per-channel standardisation.

use std::path::Path;

use radformer_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::{resize_bilinear, BoundingBox};

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(Error::data(format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len())));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// PNG or portable graymap; colour inputs are converted to luma.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::File { path: path.to_path_buf(), msg: e.to_string() })?;
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        GrayImage::new(w as usize, h as usize, gray.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::export::write_pgm(path, self.width, self.height, &self.pixels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Target length of the shorter side before cropping.
    pub resize: usize,
    pub crop: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl AugmentConfig {
    pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

    pub fn paper() -> Self {
        AugmentConfig { resize: 256, crop: 224, mean: Self::IMAGENET_MEAN, std: Self::IMAGENET_STD }
    }

    /// No rescaling margin: the crop is the whole resized image.
    pub fn for_size(size: usize) -> Self {
        AugmentConfig { resize: size, crop: size, ..AugmentConfig::paper() }
    }

    fn resized_dims(&self, width: usize, height: usize) -> (usize, usize) {
        if width <= height {
            (self.resize, (self.resize * height / width).max(self.resize))
        } else {
            ((self.resize * width / height).max(self.resize), self.resize)
        }
    }

    fn crop_origin(&self, width: usize, height: usize) -> (usize, usize) {
        ((width - self.crop) / 2, (height - self.crop) / 2)
    }
}

/// `[3, crop, crop]` standardised tensor. The pipeline is deterministic, so
/// training and evaluation produce the same tensor.
pub fn augment(img: &GrayImage, cfg: &AugmentConfig, _train_mode: bool) -> Result<Tensor<f32>> {
    if cfg.crop > cfg.resize {
        return Err(Error::config(format!("crop {} exceeds resize {}", cfg.crop, cfg.resize)));
    }
    let (w, h) = cfg.resized_dims(img.width, img.height);
    let src = Tensor::new(vec![1, img.height, img.width], img.pixels.iter().map(|&p| p as f64).collect())?;
    let resized = if (w, h) == (img.width, img.height) { src } else { resize_bilinear(&src, h, w)? };
    let (x0, y0) = cfg.crop_origin(w, h);
    let c = cfg.crop;
    let mut out = Vec::with_capacity(3 * c * c);
    for ch in 0..3 {
        for y in 0..c {
            let row = &resized.data()[(y0 + y) * w + x0..(y0 + y) * w + x0 + c];
            out.extend(row.iter().map(|&v| ((v / 255.0) as f32 - cfg.mean[ch]) / cfg.std[ch]));
        }
    }
    Ok(Tensor::new(vec![3, c, c], out)?)
}

/// Maps an annotated box in source pixels into the augmented frame.
pub fn augment_box(b: &BoundingBox, width: usize, height: usize, cfg: &AugmentConfig) -> BoundingBox {
    let (w, h) = cfg.resized_dims(width, height);
    let (x0, y0) = cfg.crop_origin(w, h);
    let (sx, sy) = (w as f64 / width as f64, h as f64 / height as f64);
    let lo = |v: usize, s: f64, off: usize| ((v as f64 * s).floor() as isize - off as isize).clamp(0, cfg.crop as isize - 1) as usize;
    let hi = |v: usize, s: f64, off: usize| {
        (((v + 1) as f64 * s).ceil() as isize - 1 - off as isize).clamp(0, cfg.crop as isize - 1) as usize
    };
    BoundingBox { x_min: lo(b.x_min, sx, x0), y_min: lo(b.y_min, sy, y0), x_max: hi(b.x_max, sx, x0), y_max: hi(b.y_max, sy, y0) }
}
