//! Synthetic ultrasound-like corpus: a dark elliptical organ with an
//! echogenic wall on a speckled background, with one 5×5 glyph stamped in the
//! lumen per lexicon present.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::GrayImage;
use super::manifest::{Class, Manifest, Sample, VOCABULARY};
use crate::error::{Error, Result};
use crate::roi::BoundingBox;

pub const GLYPH_SIZE: usize = 5;
pub const GLYPH_LEVEL: u8 = 250;
const BACKGROUND_LEVEL: f64 = 100.0;
const WALL_LEVEL: f64 = 160.0;
const LUMEN_LEVEL: f64 = 30.0;
const WALL_WIDTH: f64 = 0.15;
/// Glyph windows (glyph plus a one-pixel border) must lie inside the lumen.
const GLYPH_MARGIN: isize = 3;
/// Minimum Chebyshev distance between glyph centres.
const GLYPH_SEPARATION: isize = 8;

/// One stamp per vocabulary entry, rows top to bottom.
pub const GLYPHS: [[&str; GLYPH_SIZE]; 7] = [
    [".###.", ".....", ".#.#.", "#..#.", "##..."],
    ["#....", ".##..", "#...#", ".#.##", ".#.#."],
    ["##...", "..#..", ".#.##", "#.###", "..#.."],
    [".##..", "##.#.", ".#...", ".....", "#.#.#"],
    ["#.###", ".#.#.", ".....", "....#", ".#.#."],
    ["...#.", "..##.", ".##..", ".##..", "##.##"],
    ["..###", "#..#.", "..#..", "##...", "#...."],
];

pub fn glyph_mask(lexicon: usize) -> [[bool; GLYPH_SIZE]; GLYPH_SIZE] {
    let mut m = [[false; GLYPH_SIZE]; GLYPH_SIZE];
    for (r, row) in GLYPHS[lexicon].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            m[r][c] = ch == b'#';
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub patients: usize,
    pub images_per_patient: (usize, usize),
    pub size: usize,
    /// Patient-level class probabilities (normal, benign, malignant).
    pub class_weights: [f64; 3],
    pub benign_lexicons: Vec<usize>,
    pub malignant_lexicons: Vec<usize>,
    /// Probability that a pathological image carries a single lexicon rather
    /// than two.
    pub single_lexicon_prob: f64,
    /// Number of folds the corpus is meant for; fewer patients only warns.
    pub folds: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            patients: 30,
            images_per_patient: (2, 4),
            size: 32,
            class_weights: [1.0 / 3.0; 3],
            benign_lexicons: vec![4, 5, 6],
            malignant_lexicons: vec![0, 1, 2, 3],
            single_lexicon_prob: 0.6,
            folds: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
}

impl Ellipse {
    /// Normalised radius of the pixel centre.
    pub fn radius(&self, x: usize, y: usize) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.a;
        let dy = (y as f64 + 0.5 - self.cy) / self.b;
        (dx * dx + dy * dy).sqrt()
    }

    fn bbox(&self, size: usize, max_radius: f64) -> BoundingBox {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..size {
            for x in 0..size {
                if self.radius(x, y) <= max_radius {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        BoundingBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 }
    }
}

/// Top-left corner of a stamped glyph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphPlacement {
    pub lexicon: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub noise_seed: u64,
    pub organ: Ellipse,
    pub glyphs: Vec<GlyphPlacement>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub manifest: Manifest,
    pub images: Vec<GrayImage>,
    pub scenes: Vec<Scene>,
    pub warnings: Vec<String>,
}

/// Renders a scene. The speckle stream does not depend on the glyphs, so the
/// glyph-free rendering differs exactly at the stamped pixels.
pub fn render_scene(scene: &Scene, size: usize, with_glyphs: bool) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r = scene.organ.radius(x, y);
            let speckle: f64 = rng.random_range(0.0..1.0);
            let v = if r <= 1.0 {
                LUMEN_LEVEL * (0.85 + 0.3 * speckle)
            } else if r <= 1.0 + WALL_WIDTH {
                WALL_LEVEL * (0.7 + 0.6 * speckle)
            } else {
                BACKGROUND_LEVEL * (0.7 + 0.6 * speckle)
            };
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    if with_glyphs {
        for g in &scene.glyphs {
            let m = glyph_mask(g.lexicon);
            for (r, row) in m.iter().enumerate() {
                for (c, &on) in row.iter().enumerate() {
                    if on {
                        px[(g.y + r) * size + g.x + c] = GLYPH_LEVEL;
                    }
                }
            }
        }
    }
    GrayImage { width: size, height: size, pixels: px }
}

fn admissible_centres(organ: &Ellipse, size: usize) -> Vec<(isize, isize)> {
    let m = GLYPH_MARGIN;
    let mut out = Vec::new();
    for cy in m..size as isize - m {
        for cx in m..size as isize - m {
            let inside = (-m..=m).all(|dy| (-m..=m).all(|dx| organ.radius((cx + dx) as usize, (cy + dy) as usize) <= 1.0));
            if inside {
                out.push((cx, cy));
            }
        }
    }
    out
}

/// Uniform placement of one glyph per lexicon within the admissible lumen
/// region, pairwise separated. `None` when the organ is too small.
fn place_glyphs<R: Rng>(rng: &mut R, organ: &Ellipse, size: usize, lexicons: &[usize]) -> Option<Vec<GlyphPlacement>> {
    let centres = admissible_centres(organ, size);
    let far = |a: (isize, isize), b: (isize, isize)| (a.0 - b.0).abs().max((a.1 - b.1).abs()) >= GLYPH_SEPARATION;
    let mut chosen: Vec<(isize, isize)> = Vec::new();
    for k in 0..lexicons.len() {
        let remaining = lexicons.len() - k - 1;
        let options: Vec<(isize, isize)> = centres
            .iter()
            .copied()
            .filter(|&c| chosen.iter().all(|&p| far(c, p)))
            .filter(|&c| remaining == 0 || centres.iter().any(|&o| far(c, o) && chosen.iter().all(|&p| far(o, p))))
            .collect();
        if options.is_empty() {
            return None;
        }
        chosen.push(options[rng.random_range(0..options.len())]);
    }
    let half = (GLYPH_SIZE / 2) as isize;
    Some(
        lexicons
            .iter()
            .zip(chosen)
            .map(|(&lexicon, (cx, cy))| GlyphPlacement { lexicon, x: (cx - half) as usize, y: (cy - half) as usize })
            .collect(),
    )
}

fn draw_lexicons<R: Rng>(rng: &mut R, pool: &[usize], single_prob: f64) -> Vec<usize> {
    let count = if pool.len() < 2 || rng.random_bool(single_prob) { 1 } else { 2 };
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let l = pool[rng.random_range(0..pool.len())];
        if !picked.contains(&l) {
            picked.push(l);
        }
    }
    picked.sort_unstable();
    picked
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let (lo, hi) = cfg.images_per_patient;
    if cfg.patients == 0 || lo == 0 || hi < lo {
        return Err(Error::config("need at least one patient and a valid images-per-patient range"));
    }
    if cfg.size < 24 {
        return Err(Error::config("synthetic images must be at least 24 pixels"));
    }
    let total: f64 = cfg.class_weights.iter().sum();
    if !(total > 0.0) || cfg.class_weights.iter().any(|&w| w < 0.0) {
        return Err(Error::config("class weights must be nonnegative with a positive sum"));
    }
    for &l in cfg.benign_lexicons.iter().chain(&cfg.malignant_lexicons) {
        if l >= VOCABULARY.len() {
            return Err(Error::config(format!("lexicon {l} outside the vocabulary")));
        }
    }
    let mut warnings = Vec::new();
    if let Some(k) = cfg.folds {
        if cfg.patients < k {
            let msg = format!("{} patients cannot fill {k} folds", cfg.patients);
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.size as f64;
    let (mut samples, mut images, mut scenes) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..cfg.patients {
        let u: f64 = rng.random_range(0.0..total);
        let class = if u < cfg.class_weights[0] {
            Class::Normal
        } else if u < cfg.class_weights[0] + cfg.class_weights[1] {
            Class::Benign
        } else {
            Class::Malignant
        };
        let n_images = rng.random_range(lo..=hi);
        for _ in 0..n_images {
            let lexicons = match class {
                Class::Normal => Vec::new(),
                Class::Benign => draw_lexicons(&mut rng, &cfg.benign_lexicons, cfg.single_lexicon_prob),
                Class::Malignant => draw_lexicons(&mut rng, &cfg.malignant_lexicons, cfg.single_lexicon_prob),
            };
            let (organ, glyphs) = loop {
                let organ = Ellipse {
                    cx: size / 2.0 + rng.random_range(-1.5..1.5),
                    cy: size / 2.0 + rng.random_range(-1.5..1.5),
                    a: size * rng.random_range(0.28..0.34),
                    b: size * rng.random_range(0.23..0.29),
                };
                if let Some(g) = place_glyphs(&mut rng, &organ, cfg.size, &lexicons) {
                    break (organ, g);
                }
            };
            let scene = Scene { noise_seed: rng.random(), organ, glyphs };
            let index = images.len();
            images.push(render_scene(&scene, cfg.size, true));
            samples.push(Sample {
                path: PathBuf::from(format!("img_{index:04}.pgm")),
                patient_id: format!("P{p:03}"),
                label: class,
                roi: Some(organ.bbox(cfg.size, 1.0 + WALL_WIDTH)),
                lexicons: Some(lexicons),
                radiologist_label: None,
            });
            scenes.push(scene);
        }
    }
    let manifest = Manifest::new(samples, VOCABULARY.iter().map(|s| s.to_string()).collect());
    Ok(SynthCorpus { config: cfg.clone(), manifest, images, scenes, warnings })
}

impl SynthCorpus {
    /// Writes every image and `manifest.json` into `dir`; returns the
    /// manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        for (s, img) in self.manifest.samples.iter().zip(&self.images) {
            img.save(&dir.join(&s.path))?;
        }
        let path = dir.join("manifest.json");
        self.manifest.save(&path)?;
        Ok(path)
    }
}
