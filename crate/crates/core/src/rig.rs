//! A hand-wired feature extractor whose channels fire on exactly one planted
//! glyph each, used to check lexicon recovery end to end.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radformer_tensor::{ParamId, ParamStore, Tape, Tensor};

use crate::data::augment::GrayImage;
use crate::data::synth::{glyph_mask, GLYPHS, GLYPH_LEVEL, GLYPH_SIZE};
use crate::data::{Class, SynthConfig};
use crate::error::{Error, Result};
use crate::explainer::{logit_gradient, Analysis, ExplainableModel, WeightMode, WeightOptions};
use crate::roi::FeatureMap;

pub const RIG_CHANNELS: usize = 16;
pub const CHANNELS_PER_GLYPH: usize = 2;
const KERNEL: usize = GLYPH_SIZE + 2;
/// Pixels at or below this level never count as glyph ink.
const INK_FLOOR: f64 = 225.0;
/// Fraction of the self response where a channel starts to fire and where it
/// saturates.
const FIRE_AT: f64 = 0.7;
const SATURATE_AT: f64 = 0.8;
const NORMAL_BIAS: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct GlyphRig {
    pub store: ParamStore<f64>,
    pub image_size: usize,
    /// Channels planted for each lexicon.
    pub planted: Vec<Vec<usize>>,
    conv: ParamId,
    gamma: ParamId,
    beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Zero-mean template: the glyph with a one-pixel border.
fn template(lexicon: usize) -> [f64; KERNEL * KERNEL] {
    let mask = glyph_mask(lexicon);
    let mut t = [0.0; KERNEL * KERNEL];
    for (r, row) in mask.iter().enumerate() {
        for (c, &on) in row.iter().enumerate() {
            if on {
                t[(r + 1) * KERNEL + c + 1] = 1.0;
            }
        }
    }
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    t.map(|v| v - mean)
}

impl GlyphRig {
    pub fn new(seed: u64, image_size: usize, synth: &SynthConfig) -> Result<Self> {
        if image_size < KERNEL {
            return Err(Error::config(format!("rig needs images of at least {KERNEL} pixels")));
        }
        let mut channels: Vec<usize> = (0..RIG_CHANNELS).collect();
        channels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let planted: Vec<Vec<usize>> =
            channels.chunks(CHANNELS_PER_GLYPH).take(GLYPHS.len()).map(|c| c.to_vec()).collect();

        let kk = KERNEL * KERNEL;
        let mut w = vec![0.0; RIG_CHANNELS * kk];
        let mut gamma = vec![0.0; RIG_CHANNELS];
        let mut beta = vec![0.0; RIG_CHANNELS];
        let width = SATURATE_AT - FIRE_AT;
        for (l, chans) in planted.iter().enumerate() {
            let t = template(l);
            let self_response: f64 = glyph_mask(l)
                .iter()
                .enumerate()
                .flat_map(|(r, row)| row.iter().enumerate().filter(|(_, on)| **on).map(move |(c, _)| (r, c)))
                .map(|(r, c)| t[(r + 1) * KERNEL + c + 1])
                .sum();
            for &c in chans {
                w[c * kk..(c + 1) * kk].copy_from_slice(&t);
                gamma[c] = 1.0 / (width * self_response);
                beta[c] = -FIRE_AT / width;
            }
        }

        let sites = (image_size - KERNEL + 1).pow(2) as f64;
        let mut head = vec![0.0; 3 * RIG_CHANNELS];
        for (l, chans) in planted.iter().enumerate() {
            let class = if synth.malignant_lexicons.contains(&l) {
                Class::Malignant
            } else if synth.benign_lexicons.contains(&l) {
                Class::Benign
            } else {
                continue;
            };
            for &c in chans {
                head[class.index() * RIG_CHANNELS + c] = 0.5 * sites * sites;
            }
        }
        let mut bias = vec![0.0; 3];
        bias[Class::Normal.index()] = NORMAL_BIAS;

        let mut store = ParamStore::new();
        let conv = store.add_param("rig.conv.weight", Tensor::new([RIG_CHANNELS, 1, KERNEL, KERNEL], w)?)?;
        let gamma = store.add_param("rig.bn.weight", Tensor::new([RIG_CHANNELS], gamma)?)?;
        let beta = store.add_param("rig.bn.bias", Tensor::new([RIG_CHANNELS], beta)?)?;
        let head_w = store.add_param("rig.head.weight", Tensor::new([3, RIG_CHANNELS], head)?)?;
        let head_b = store.add_param("rig.head.bias", Tensor::new([3], bias)?)?;
        store.set_all_frozen(true);
        Ok(GlyphRig { store, image_size, planted, conv, gamma, beta, head_w, head_b })
    }

    /// Lexicon planted on channel `c`, if any.
    pub fn lexicon_of(&self, c: usize) -> Option<usize> {
        self.planted.iter().position(|chans| chans.contains(&c))
    }
}

impl ExplainableModel for GlyphRig {
    fn feature_dim(&self) -> usize {
        RIG_CHANNELS
    }

    fn analyze(&self, image: &GrayImage, opts: WeightOptions) -> Result<Analysis> {
        let n = self.image_size;
        if image.width != n || image.height != n {
            return Err(Error::data(format!("rig expects {n}x{n} images, got {}x{}", image.width, image.height)));
        }
        let mut tape = Tape::with_store(&self.store);
        let x = Tensor::new([1, 1, n, n], image.pixels.iter().map(|&p| p as f64).collect())?;
        let x = tape.input(x);
        let span = GLYPH_LEVEL as f64 - INK_FLOOR;
        let ink = tape.affine(x, 1.0 / span, -INK_FLOOR / span);
        let ink = tape.relu(ink);
        let w = tape.param(self.conv);
        let r = tape.conv2d(ink, w, 1, 0)?;
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        let z = tape.batch_norm_eval(r, g, b, &[0.0; RIG_CHANNELS], &[1.0; RIG_CHANNELS], 0.0)?;
        let a = tape.relu(z);
        let capped = tape.affine(a, -1.0, 1.0);
        let capped = tape.relu(capped);
        let features = tape.affine(capped, -1.0, 1.0);
        let pooled = tape.global_avg_pool(features)?;
        let p = tape.value(pooled).clone();
        let token = tape.leaf(p.clone(), true);
        let sq = tape.mul(token, token)?;
        let (hw, hb) = (tape.param(self.head_w), tape.param(self.head_b));
        let logits = tape.linear(sq, hw, Some(hb))?;
        let values = tape.value(logits).to_f64_vec();
        let best = (0..values.len()).fold(0, |b, i| if values[i] > values[b] { i } else { b });
        let activations = FeatureMap::from_batch(tape.value(features), 0)?;
        let mut weights = logit_gradient(&mut tape, logits, best, token)?;
        let pooled = p.into_data();
        if opts.mode == WeightMode::GradientTimesActivation {
            for (w, a) in weights.iter_mut().zip(&pooled) {
                *w *= a;
            }
        }
        let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(Analysis {
            predicted: Class::from_index(best).expect("three classes"),
            probabilities: e.iter().map(|v| v / s).collect(),
            weights,
            pooled,
            activations,
            roi: None,
            attention: Vec::new(),
        })
    }
}
