//! Residual backbones built from a [`BackboneSpec`], plus a linear
//! classification head over the pooled features.

use rand::Rng;
use radformer_tensor::{Element, Init, ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::nn::{ConvBn, Linear};
use crate::presets::{BackboneSpec, StemLayer, Window};

#[derive(Clone, Debug)]
enum StemUnit {
    Conv(ConvBn),
    MaxPool(Window),
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    stem: Vec<StemUnit>,
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        spec: BackboneSpec,
    ) -> Result<Self> {
        let mut ch = spec.input_channels;
        let mut stem = Vec::new();
        for (i, layer) in spec.stem.iter().enumerate() {
            match *layer {
                StemLayer::Conv { kernel, stride, padding, channels } => {
                    let name = format!("{prefix}.stem{i}");
                    stem.push(StemUnit::Conv(ConvBn::new(store, rng, &name, ch, channels, kernel, stride, padding)?));
                    ch = channels;
                }
                StemLayer::MaxPool { kernel, stride, padding } => {
                    stem.push(StemUnit::MaxPool(Window { kernel, stride, padding }));
                }
            }
        }
        let expansion = spec.block.expansion();
        let mut blocks = Vec::new();
        for (si, stage) in spec.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let name = format!("{prefix}.layer{}.{b}", si + 1);
                let windows = spec.block_windows(stage, b);
                let out_ch = stage.planes * expansion;
                let mut convs = Vec::with_capacity(windows.len());
                let mut cin = ch;
                for (ci, w) in windows.iter().enumerate() {
                    let cout = if ci + 1 == windows.len() { out_ch } else { stage.planes };
                    convs.push(ConvBn::new(
                        store,
                        rng,
                        &format!("{name}.conv{}", ci + 1),
                        cin,
                        cout,
                        w.kernel,
                        w.stride,
                        w.padding,
                    )?);
                    cin = cout;
                }
                let stride = if b == 0 { stage.stride } else { 1 };
                let shortcut = if stride != 1 || ch != out_ch {
                    Some(ConvBn::new(store, rng, &format!("{name}.downsample"), ch, out_ch, 1, stride, 0)?)
                } else {
                    None
                };
                blocks.push(Block { convs, shortcut });
                ch = out_ch;
            }
        }
        Ok(Backbone { spec, stem, blocks })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_channels(&self) -> usize {
        self.spec.feature_channels()
    }

    /// `[N, C, S, S] -> [N, d, h, w]`. The caller resizes; any other spatial
    /// size is rejected.
    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var, train: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let s = self.spec.input_size;
        if shape.len() != 4 || shape[1] != self.spec.input_channels || shape[2] != s || shape[3] != s {
            return Err(Error::config(format!(
                "{} backbone expects [N, {}, {s}, {s}], got {shape:?}",
                self.spec.name, self.spec.input_channels
            )));
        }
        let mut h = x;
        for unit in &self.stem {
            h = match unit {
                StemUnit::Conv(c) => {
                    let y = c.forward(tape, h, train)?;
                    tape.relu(y)
                }
                StemUnit::MaxPool(w) => tape.max_pool2d(h, w.kernel, w.stride, w.padding)?,
            };
        }
        for block in &self.blocks {
            let mut y = h;
            for (i, c) in block.convs.iter().enumerate() {
                y = c.forward(tape, y, train)?;
                if i + 1 < block.convs.len() {
                    y = tape.relu(y);
                }
            }
            let mut sc = match &block.shortcut {
                Some(c) => c.forward(tape, h, train)?,
                None => h,
            };
            let (yh, yw) = (tape.shape(y)[2], tape.shape(y)[3]);
            if tape.shape(sc)[2] != yh || tape.shape(sc)[3] != yw {
                sc = tape.crop_spatial(sc, yh, yw)?;
            }
            let sum = tape.add(y, sc)?;
            h = tape.relu(sum);
        }
        Ok(h)
    }
}

/// Backbone with a linear classifier on the pooled feature volume.
#[derive(Clone, Debug)]
pub struct Branch {
    pub backbone: Backbone,
    pub head: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// `[N, d, h, w]`
    pub features: Var,
    /// `[N, d]`
    pub pooled: Var,
    /// `[N, classes]`
    pub logits: Var,
}

impl Branch {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        spec: BackboneSpec,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        let backbone = Backbone::new(store, rng, &format!("{prefix}.backbone"), spec)?;
        let d = backbone.feature_channels();
        let head = Linear::new(store, rng, &format!("{prefix}.head"), d, num_classes, true, Init::FanInUniform {
            fan_in: d,
        })?;
        Ok(Branch { backbone, head })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var, train: bool) -> Result<BranchOutput> {
        let features = self.backbone.forward(tape, x, train)?;
        let pooled = tape.global_avg_pool(features)?;
        let logits = self.head.forward(tape, pooled)?;
        Ok(BranchOutput { features, pooled, logits })
    }
}

/// Input window (inclusive pixel bounds, clamped to the image) that can
/// influence output site `(row, col)`.
pub fn receptive_field_probe(spec: &BackboneSpec, row: usize, col: usize) -> Result<PixelWindow> {
    let out = spec
        .output_extent(spec.input_size)
        .ok_or_else(|| Error::config(format!("{} does not fit its input size", spec.name)))?;
    if row >= out || col >= out {
        return Err(Error::config(format!("site ({row}, {col}) outside the {out}x{out} feature grid")));
    }
    let rf = spec.receptive_field();
    let last = spec.input_size as isize - 1;
    let span = |i: usize| {
        let start = (i * rf.jump) as isize - rf.offset as isize;
        let end = start + rf.size as isize - 1;
        (start.clamp(0, last) as usize, end.clamp(0, last) as usize)
    };
    let (y0, y1) = span(row);
    let (x0, x1) = span(col);
    Ok(PixelWindow { x_min: x0, y_min: y0, x_max: x1, y_max: y1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelWindow {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelWindow {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}
