//! Heatmap construction, binarisation and box extraction from the global
//! feature volume, plus ROI quality metrics.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use radformer_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation volume stored channel-major (`[C, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::data(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    /// Sample `index` of an `[N, C, H, W]` tensor.
    pub fn from_batch<T: Element>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::data(format!("cannot take sample {index} of {s:?}")));
        }
        let len = s[1] * s[2] * s[3];
        let data = t.data()[index * len..(index + 1) * len].iter().map(|v| v.to_f64_lossy()).collect();
        FeatureMap::new(s[1], s[2], s[3], data)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Per-channel min-max scaling to `[0, 1]`; constant channels become zero.
pub fn normalize_activations(f: &FeatureMap) -> FeatureMap {
    let n = f.height * f.width;
    let mut data = Vec::with_capacity(f.data.len());
    for c in 0..f.channels {
        let ch = &f.data[c * n..(c + 1) * n];
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            data.extend(ch.iter().map(|v| (v - lo) / range));
        } else {
            data.extend(std::iter::repeat_n(0.0, n));
        }
    }
    FeatureMap { data, ..*f }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Image pixels per heatmap cell.
    pub stride: usize,
}

/// Channel-wise sum of a normalised volume.
pub fn compute_heatmap(normalized: &FeatureMap, stride: usize) -> HeatMap {
    let n = normalized.height * normalized.width;
    let mut values = vec![0.0; n];
    for c in 0..normalized.channels {
        for (v, x) in values.iter_mut().zip(normalized.channel(c)) {
            *v += x;
        }
    }
    HeatMap { height: normalized.height, width: normalized.width, values, stride }
}

impl HeatMap {
    /// Levels `min(floor(v * 256 / max), 255)`; all zero when `max == 0`.
    pub fn quantize(&self) -> Vec<u8> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return vec![0; self.values.len()];
        }
        self.values.iter().map(|&v| ((v * 256.0 / max).floor().clamp(0.0, 255.0)) as u8).collect()
    }
}

/// Otsu threshold over quantised levels. Class 1 is `level >= t`. Ties go to
/// the smallest `t`; a single occupied level is returned as-is.
pub fn otsu_levels(levels: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &q in levels {
        hist[q as usize] += 1;
    }
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(q, &c)| q as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    // best score as the fraction num / den
    let mut best: Option<(u8, u128, u128)> = None;
    for t in 1..256usize {
        n0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let diff = (n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    match best {
        Some((t, num, _)) if num > 0 => t,
        _ => levels.iter().copied().min().unwrap_or(0),
    }
}

pub fn otsu_threshold(h: &HeatMap) -> u8 {
    otsu_levels(&h.quantize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Binarization {
    Otsu,
    Fixed(u8),
    Hysteresis { high: u8, low: u8 },
    Naive,
}

impl Binarization {
    pub const TABLE: [Binarization; 4] =
        [Binarization::Otsu, Binarization::Fixed(120), Binarization::Hysteresis { high: 120, low: 50 }, Binarization::Naive];

    pub fn validate(self) -> Result<Self> {
        match self {
            Binarization::Hysteresis { high, low } if high <= low => {
                Err(Error::config(format!("hysteresis needs high > low, got {high}:{low}")))
            }
            s => Ok(s),
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Binarization::Otsu => "Otsu",
            Binarization::Fixed(_) => "Fixed",
            Binarization::Hysteresis { .. } => "Hysteresis",
            Binarization::Naive => "Naive (whole image as ROI)",
        }
    }
}

impl fmt::Display for Binarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Binarization::Otsu => write!(f, "otsu"),
            Binarization::Fixed(t) => write!(f, "fixed:{t}"),
            Binarization::Hysteresis { high, low } => write!(f, "hysteresis:{high}:{low}"),
            Binarization::Naive => write!(f, "naive"),
        }
    }
}

impl FromStr for Binarization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let level = |p: &str| p.parse::<u8>().map_err(|_| Error::config(format!("threshold {p:?} is not in 0..=255")));
        match parts.as_slice() {
            ["otsu"] => Ok(Binarization::Otsu),
            ["naive"] => Ok(Binarization::Naive),
            ["fixed", t] => Ok(Binarization::Fixed(level(t)?)),
            ["hysteresis", hi, lo] => Binarization::Hysteresis { high: level(hi)?, low: level(lo)? }.validate(),
            _ => Err(Error::config(format!(
                "unknown binarization {s:?}; expected otsu, fixed:<t>, hysteresis:<hi>:<lo> or naive"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
    /// Level used for single-threshold strategies.
    pub threshold: Option<u8>,
}

impl BinaryMask {
    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }
}

pub fn binarize(h: &HeatMap, strategy: Binarization) -> Result<BinaryMask> {
    let strategy = strategy.validate()?;
    let levels = h.quantize();
    let mask = |cells, threshold| BinaryMask { height: h.height, width: h.width, cells, threshold };
    Ok(match strategy {
        Binarization::Naive => mask(vec![true; levels.len()], None),
        Binarization::Otsu => {
            let t = otsu_levels(&levels);
            mask(levels.iter().map(|&q| q >= t).collect(), Some(t))
        }
        Binarization::Fixed(t) => mask(levels.iter().map(|&q| q >= t).collect(), Some(t)),
        Binarization::Hysteresis { high, low } => mask(hysteresis(&levels, h.height, h.width, high, low), None),
    })
}

fn hysteresis(levels: &[u8], height: usize, width: usize, high: u8, low: u8) -> Vec<bool> {
    let mut cells = vec![false; levels.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &q) in levels.iter().enumerate() {
        if q >= high {
            cells[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / width, i % width);
        let mut visit = |j: usize| {
            if !cells[j] && levels[j] >= low {
                cells[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(i - width);
        }
        if r + 1 < height {
            visit(i + width);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < width {
            visit(i + 1);
        }
    }
    cells
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_max < x_min {
            return Err(Error::data(format!("x_max {x_max} < x_min {x_min}")));
        }
        if y_max < y_min {
            return Err(Error::data(format!("y_max {y_max} < y_min {y_min}")));
        }
        Ok(BoundingBox { x_min, y_min, x_max, y_max })
    }

    pub fn whole(width: usize, height: usize) -> Self {
        BoundingBox { x_min: 0, y_min: 0, x_max: width - 1, y_max: height - 1 }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min <= x_max && y_min <= y_max).then_some(BoundingBox { x_min, y_min, x_max, y_max })
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max < width && self.y_max < height
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Tight box over the nonzero cells, mapped to pixels as
/// `[c * stride, (c + 1) * stride - 1]` and clamped. An empty mask yields
/// the whole image.
pub fn extract_bbox(mask: &BinaryMask, image_width: usize, image_height: usize, stride: usize) -> BoundingBox {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.cells.iter().enumerate().filter(|(_, &c)| c) {
        let (r, c) = (i / mask.width, i % mask.width);
        bounds = Some(match bounds {
            None => (c, r, c, r),
            Some((c0, r0, c1, r1)) => (c0.min(c), r0.min(r), c1.max(c), r1.max(r)),
        });
    }
    let Some((c0, r0, c1, r1)) = bounds else {
        return BoundingBox::whole(image_width, image_height);
    };
    let clamp_x = |v: usize| v.min(image_width - 1);
    let clamp_y = |v: usize| v.min(image_height - 1);
    BoundingBox {
        x_min: clamp_x(c0 * stride),
        y_min: clamp_y(r0 * stride),
        x_max: clamp_x((c1 + 1) * stride - 1),
        y_max: clamp_y((r1 + 1) * stride - 1),
    }
}

/// Pixel-exact crop of a `[C, H, W]` image.
pub fn crop_roi<T: Element>(image: &Tensor<T>, b: &BoundingBox) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || !b.fits(s[2], s[1]) {
        return Err(Error::data(format!("box {:?} does not fit image {s:?}", b.as_array())));
    }
    let (c, w) = (s[0], s[2]);
    let mut out = Vec::with_capacity(c * b.area());
    for ch in 0..c {
        for y in b.y_min..=b.y_max {
            let row = (ch * s[1] + y) * w;
            out.extend_from_slice(&image.data()[row + b.x_min..=row + b.x_max]);
        }
    }
    Ok(Tensor::new(vec![c, b.height(), b.width()], out)?)
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel centres.
pub fn resize_bilinear<T: Element>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::data(format!("cannot resize {s:?} to {out_h}x{out_w}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let p = |y: usize, x: usize| plane[y * w + x].to_f64_lossy();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Ok(Tensor::new(vec![c, out_h, out_w], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiMetrics {
    pub iou: f64,
    pub intersection_fraction: f64,
    pub area_fraction: f64,
}

pub fn roi_metrics(pred: &BoundingBox, annotated: &BoundingBox, image_width: usize, image_height: usize) -> RoiMetrics {
    let inter = pred.intersection(annotated).map_or(0, |b| b.area()) as f64;
    let union = (pred.area() + annotated.area()) as f64 - inter;
    RoiMetrics {
        iou: inter / union,
        intersection_fraction: inter / annotated.area() as f64,
        area_fraction: pred.area() as f64 / (image_width * image_height) as f64,
    }
}

/// Full pipeline for one sample: normalise, sum, binarise, box.
#[derive(Clone, Debug)]
pub struct RoiResult {
    pub heatmap: HeatMap,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
}

pub fn locate_roi(
    features: &FeatureMap,
    strategy: Binarization,
    image_width: usize,
    image_height: usize,
    stride: usize,
) -> Result<RoiResult> {
    let heatmap = compute_heatmap(&normalize_activations(features), stride);
    let mask = binarize(&heatmap, strategy)?;
    let bbox = extract_bbox(&mask, image_width, image_height, stride);
    Ok(RoiResult { heatmap, mask, bbox })
}
