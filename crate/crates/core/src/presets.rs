//! Backbone layout tables. The same tables drive model construction and the
//! published `docs/presets.json`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1, strided 3×3, 1×1 (expansion 4).
    Bottleneck,
    /// Strided unpadded 3×3, 1×1, 1×1 in the first block of a stage and
    /// three 1×1 elsewhere (expansion 4).
    Bag,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck | BlockKind::Bag => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StemLayer {
    Conv { kernel: usize, stride: usize, padding: usize, channels: usize },
    MaxPool { kernel: usize, stride: usize, padding: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub planes: usize,
    pub stride: usize,
}

/// One spatial window on the main path: the unit of stride and
/// receptive-field arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub input_channels: usize,
    pub input_size: usize,
    pub stem: Vec<StemLayer>,
    pub block: BlockKind,
    pub stages: Vec<StageSpec>,
}

/// Analytic receptive field: output site `i` sees input rows
/// `[i * jump - offset, i * jump - offset + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
    pub offset: usize,
}

impl BackboneSpec {
    pub fn stem_channels(&self) -> usize {
        self.stem
            .iter()
            .rev()
            .find_map(|l| match l {
                StemLayer::Conv { channels, .. } => Some(*channels),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    pub fn feature_channels(&self) -> usize {
        match self.stages.last() {
            Some(s) => s.planes * self.block.expansion(),
            None => self.stem_channels(),
        }
    }

    /// Main-path windows of block `index` within a stage.
    pub fn block_windows(&self, stage: &StageSpec, index: usize) -> Vec<Window> {
        let stride = if index == 0 { stage.stride } else { 1 };
        let w = |kernel, stride, padding| Window { kernel, stride, padding };
        match self.block {
            BlockKind::Basic => vec![w(3, stride, 1), w(3, 1, 1)],
            BlockKind::Bottleneck => vec![w(1, 1, 0), w(3, stride, 1), w(1, 1, 0)],
            BlockKind::Bag if index == 0 => vec![w(3, stride, 0), w(1, 1, 0), w(1, 1, 0)],
            BlockKind::Bag => vec![w(1, 1, 0), w(1, 1, 0), w(1, 1, 0)],
        }
    }

    /// Every window on the main path, input to output.
    pub fn windows(&self) -> Vec<Window> {
        let mut out: Vec<Window> = self
            .stem
            .iter()
            .map(|l| match *l {
                StemLayer::Conv { kernel, stride, padding, .. } | StemLayer::MaxPool { kernel, stride, padding } => {
                    Window { kernel, stride, padding }
                }
            })
            .collect();
        for stage in &self.stages {
            for b in 0..stage.blocks {
                out.extend(self.block_windows(stage, b));
            }
        }
        out
    }

    /// Spatial extent after every window, `None` if a window does not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        self.windows().iter().try_fold(input, |size, w| {
            let padded = size + 2 * w.padding;
            (padded >= w.kernel).then(|| (padded - w.kernel) / w.stride + 1)
        })
    }

    pub fn total_stride(&self) -> usize {
        self.windows().iter().map(|w| w.stride).product()
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        let (mut size, mut jump, mut offset) = (1, 1, 0);
        for w in self.windows() {
            size += (w.kernel - 1) * jump;
            offset += w.padding * jump;
            jump *= w.stride;
        }
        ReceptiveField { size, jump, offset }
    }

    /// Feature volume shape `(h, w, d)` at the configured input size.
    pub fn feature_shape(&self) -> Option<(usize, usize, usize)> {
        let s = self.output_extent(self.input_size)?;
        Some((s, s, self.feature_channels()))
    }
}

macro_rules! preset_enum {
    ($name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $label)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($label => Ok($name::$variant),)+
                    other => Err(Error::config(format!("unknown preset {other:?}"))),
                }
            }
        }
    };
}

preset_enum!(GlobalPreset { Paper50 => "paper-50", Paper34 => "paper-34", Paper18 => "paper-18", Toy => "toy" });
preset_enum!(LocalPreset { Paper33 => "paper-33", Toy => "toy" });

fn resnet_stem() -> Vec<StemLayer> {
    vec![
        StemLayer::Conv { kernel: 7, stride: 2, padding: 3, channels: 64 },
        StemLayer::MaxPool { kernel: 3, stride: 2, padding: 1 },
    ]
}

fn stages(blocks: &[usize], planes: &[usize], strides: &[usize]) -> Vec<StageSpec> {
    blocks
        .iter()
        .zip(planes)
        .zip(strides)
        .map(|((&blocks, &planes), &stride)| StageSpec { blocks, planes, stride })
        .collect()
}

impl GlobalPreset {
    pub fn spec(self) -> BackboneSpec {
        let resnet = |name: &str, block, blocks: &[usize]| BackboneSpec {
            name: name.into(),
            input_channels: 3,
            input_size: 224,
            stem: resnet_stem(),
            block,
            stages: stages(blocks, &[64, 128, 256, 512], &[1, 2, 2, 2]),
        };
        match self {
            GlobalPreset::Paper50 => resnet("paper-50", BlockKind::Bottleneck, &[3, 4, 6, 3]),
            GlobalPreset::Paper34 => resnet("paper-34", BlockKind::Basic, &[3, 4, 6, 3]),
            GlobalPreset::Paper18 => resnet("paper-18", BlockKind::Basic, &[2, 2, 2, 2]),
            GlobalPreset::Toy => BackboneSpec {
                name: "toy".into(),
                input_channels: 3,
                input_size: 32,
                stem: vec![StemLayer::Conv { kernel: 3, stride: 2, padding: 1, channels: 16 }],
                block: BlockKind::Basic,
                stages: stages(&[2, 2], &[32, 64], &[1, 2]),
            },
        }
    }
}

impl LocalPreset {
    pub fn spec(self) -> BackboneSpec {
        match self {
            LocalPreset::Paper33 => BackboneSpec {
                name: "paper-33".into(),
                input_channels: 3,
                input_size: 224,
                stem: vec![
                    StemLayer::Conv { kernel: 1, stride: 1, padding: 0, channels: 64 },
                    StemLayer::Conv { kernel: 3, stride: 1, padding: 0, channels: 64 },
                ],
                block: BlockKind::Bag,
                stages: stages(&[3, 4, 6, 3], &[64, 128, 256, 512], &[2, 2, 2, 1]),
            },
            LocalPreset::Toy => BackboneSpec {
                name: "toy".into(),
                input_channels: 3,
                input_size: 32,
                stem: vec![
                    StemLayer::Conv { kernel: 1, stride: 1, padding: 0, channels: 16 },
                    StemLayer::Conv { kernel: 3, stride: 1, padding: 0, channels: 32 },
                ],
                block: BlockKind::Bag,
                stages: stages(&[2, 1, 1], &[8, 16, 16], &[2, 2, 1]),
            },
        }
    }
}

/// Machine-readable preset table, as published in `docs/presets.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetEntry {
    pub branch: String,
    pub spec: BackboneSpec,
    pub windows: Vec<Window>,
    pub feature_shape: [usize; 3],
    pub total_stride: usize,
    pub receptive_field: ReceptiveField,
}

pub fn preset_table() -> Vec<PresetEntry> {
    let entry = |branch: &str, spec: BackboneSpec| {
        let (h, w, d) = spec.feature_shape().expect("preset fits its input size");
        PresetEntry {
            branch: branch.into(),
            windows: spec.windows(),
            feature_shape: [h, w, d],
            total_stride: spec.total_stride(),
            receptive_field: spec.receptive_field(),
            spec,
        }
    };
    GlobalPreset::ALL
        .iter()
        .map(|p| entry("global", p.spec()))
        .chain(LocalPreset::ALL.iter().map(|p| entry("local", p.spec())))
        .collect()
}

pub fn preset_table_json() -> String {
    let mut s = serde_json::to_string_pretty(&preset_table()).expect("table serialises");
    s.push('\n');
    s
}
