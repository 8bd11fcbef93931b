//! The assembled global–local classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radformer_tensor::checkpoint::{self, ImportReport};
use radformer_tensor::{Element, Init, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::backbone::{Branch, BranchOutput};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionOutput, FusionTransformer};
use crate::nn::Linear;
use crate::presets::{GlobalPreset, LocalPreset};
use crate::roi::{crop_roi, locate_roi, resize_bilinear, Binarization, BoundingBox, FeatureMap};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub global: GlobalPreset,
    pub local: LocalPreset,
    pub depth: usize,
    pub heads: usize,
    pub output_projection: bool,
    pub num_classes: usize,
    pub binarization: Binarization,
    pub seed: u64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig::new(GlobalPreset::Paper50, LocalPreset::Paper33)
    }

    pub fn toy() -> Self {
        ModelConfig::new(GlobalPreset::Toy, LocalPreset::Toy)
    }

    pub fn new(global: GlobalPreset, local: LocalPreset) -> Self {
        ModelConfig {
            global,
            local,
            depth: 4,
            heads: 16,
            output_projection: true,
            num_classes: NUM_CLASSES,
            binarization: Binarization::Otsu,
            seed: 0,
        }
    }

    /// Preset name as used on the command line: `toy` or a paper global
    /// backbone paired with the paper local backbone.
    pub fn from_preset(name: &str) -> Result<Self> {
        let global: GlobalPreset = name.parse()?;
        let local = if global == GlobalPreset::Toy { LocalPreset::Toy } else { LocalPreset::Paper33 };
        Ok(ModelConfig::new(global, local))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Global,
    Local,
    Full,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::Global, Stage::Local, Stage::Full];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Global => "global",
            Stage::Local => "local",
            Stage::Full => "full",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Stage::Global),
            "local" => Ok(Stage::Local),
            "full" => Ok(Stage::Full),
            other => Err(Error::config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Which branches a forward pass runs and which of them use batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub global_train: bool,
    pub local_train: bool,
    pub run_local: bool,
    pub run_fusion: bool,
    /// Replace the pooled local token by a fresh leaf that requires grad.
    pub detach_local_token: bool,
}

impl Pass {
    pub fn eval() -> Self {
        Pass { global_train: false, local_train: false, run_local: true, run_fusion: true, detach_local_token: false }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Global => Pass { global_train: true, local_train: false, run_local: false, run_fusion: false, detach_local_token: false },
            Stage::Local => Pass { global_train: false, local_train: true, run_local: true, run_fusion: false, detach_local_token: false },
            Stage::Full => Pass { global_train: true, local_train: true, run_local: true, run_fusion: true, detach_local_token: false },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub global: BranchOutput,
    pub local: Option<BranchOutput>,
    /// Pooled local token as consumed by the fusion (a fresh leaf when
    /// detached).
    pub local_token: Option<Var>,
    pub fusion: Option<FusionOutput>,
    pub rois: Vec<BoundingBox>,
}

#[derive(Clone, Debug)]
pub struct RadFormer<T: Element = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub global: Branch,
    pub local: Branch,
    /// Maps the global token to the local width when the backbones differ.
    pub token_proj: Option<Linear>,
    pub fusion: FusionTransformer,
    pub completed: Vec<Stage>,
}

impl<T: Element> RadFormer<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (gspec, lspec) = (cfg.global.spec(), cfg.local.spec());
        let global = Branch::new(&mut store, &mut rng, "global", gspec, cfg.num_classes)?;
        let local = Branch::new(&mut store, &mut rng, "local", lspec, cfg.num_classes)?;
        let (dg, dl) = (global.backbone.feature_channels(), local.backbone.feature_channels());
        let token_proj = if dg != dl {
            Some(Linear::new(&mut store, &mut rng, "fusion.token_proj", dg, dl, true, Init::FanInUniform { fan_in: dg })?)
        } else {
            None
        };
        let fcfg = FusionConfig {
            depth: cfg.depth,
            heads: cfg.heads,
            output_projection: cfg.output_projection,
            num_classes: cfg.num_classes,
            ..FusionConfig::new(dl)
        };
        let fusion = FusionTransformer::new(&mut store, &mut rng, "fusion", fcfg)?;
        store.set_frozen_prefix("fusion.", true);
        Ok(RadFormer { cfg, store, global, local, token_proj, fusion, completed: Vec::new() })
    }

    pub fn input_size(&self) -> usize {
        self.global.backbone.spec().input_size
    }

    pub fn local_input_size(&self) -> usize {
        self.local.backbone.spec().input_size
    }

    pub fn global_stride(&self) -> usize {
        self.global.backbone.spec().total_stride()
    }

    /// ROI per sample from global features `[N, d, h, w]`.
    pub fn rois_from_features(&self, features: &Tensor<T>, strategy: Binarization) -> Result<Vec<BoundingBox>> {
        let s = self.input_size();
        (0..features.shape()[0])
            .map(|i| {
                let fm = FeatureMap::from_batch(features, i)?;
                Ok(locate_roi(&fm, strategy, s, s, self.global_stride())?.bbox)
            })
            .collect()
    }

    /// Crops every ROI from the global input batch and resizes it to the
    /// local input size.
    pub fn local_batch(&self, images: &Tensor<T>, rois: &[BoundingBox]) -> Result<Tensor<T>> {
        let s = images.shape();
        let per = s[1] * s[2] * s[3];
        let ls = self.local_input_size();
        let mut data = Vec::with_capacity(rois.len() * s[1] * ls * ls);
        for (i, b) in rois.iter().enumerate() {
            let img = Tensor::new(vec![s[1], s[2], s[3]], images.data()[i * per..(i + 1) * per].to_vec())?;
            let patch = resize_bilinear(&crop_roi(&img, b)?, ls, ls)?;
            data.extend_from_slice(patch.data());
        }
        Ok(Tensor::new(vec![rois.len(), s[1], ls, ls], data)?)
    }

    /// Projects (if needed) and fuses pooled tokens `[N, d]`.
    pub fn fuse<'s>(&'s self, tape: &mut Tape<'s, T>, global_token: Var, local_token: Var) -> Result<FusionOutput> {
        let g = match &self.token_proj {
            Some(p) => p.forward(tape, global_token)?,
            None => global_token,
        };
        let seq = FusionTransformer::pool_and_concat(tape, g, local_token)?;
        self.fusion.forward(tape, seq)
    }

    pub fn forward<'s>(&'s self, tape: &mut Tape<'s, T>, images: &Tensor<T>, pass: Pass) -> Result<ForwardOutput> {
        self.forward_with(tape, images, pass, self.cfg.binarization)
    }

    /// Forward pass over a preprocessed batch `[N, 3, S, S]`. ROIs are
    /// recomputed from the current global features on every call.
    pub fn forward_with<'s>(
        &'s self,
        tape: &mut Tape<'s, T>,
        images: &Tensor<T>,
        pass: Pass,
        strategy: Binarization,
    ) -> Result<ForwardOutput> {
        let x = tape.input(images.clone());
        let global = self.global.forward(tape, x, pass.global_train)?;
        let mut out = ForwardOutput { global, local: None, local_token: None, fusion: None, rois: Vec::new() };
        if !pass.run_local {
            return Ok(out);
        }
        out.rois = self.rois_from_features(tape.value(global.features), strategy)?;
        let patches = self.local_batch(images, &out.rois)?;
        let lx = tape.input(patches);
        let local = self.local.forward(tape, lx, pass.local_train)?;
        let token = if pass.detach_local_token {
            let v = tape.value(local.pooled).clone();
            tape.leaf(v, true)
        } else {
            local.pooled
        };
        out.local = Some(local);
        out.local_token = Some(token);
        if pass.run_fusion {
            out.fusion = Some(self.fuse(tape, global.pooled, token)?);
        }
        Ok(out)
    }

    /// Freezes everything outside the branches trained in `stage`.
    pub fn configure_stage(&mut self, stage: Stage) {
        self.store.set_all_frozen(true);
        match stage {
            Stage::Global => {
                self.store.set_frozen_prefix("global.", false);
            }
            Stage::Local => {
                self.store.set_frozen_prefix("local.", false);
            }
            Stage::Full => self.store.set_all_frozen(false),
        }
    }

    /// Rejects a stage whose predecessors have not completed.
    pub fn check_stage_order(&self, stage: Stage) -> Result<()> {
        let idx = Stage::ORDER.iter().position(|&s| s == stage).expect("known stage");
        for prev in &Stage::ORDER[..idx] {
            if !self.completed.contains(prev) {
                return Err(Error::StageOrder(format!("stage {} requires stage {} first", stage.label(), prev.label())));
            }
        }
        if let Some(later) = Stage::ORDER[idx + 1..].iter().find(|s| self.completed.contains(s)) {
            return Err(Error::StageOrder(format!(
                "stage {} cannot run after stage {}",
                stage.label(),
                later.label()
            )));
        }
        Ok(())
    }

    pub fn mark_completed(&mut self, stage: Stage) {
        if !self.completed.contains(&stage) {
            self.completed.push(stage);
        }
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.cfg, "completed": self.completed });
        checkpoint::save(&self.store, base, meta)?;
        Ok(())
    }

    /// Rebuilds the model from its checkpoint and restores every tensor.
    pub fn load(base: &Path) -> Result<Self> {
        let index = checkpoint::read_index(base)?;
        let cfg: ModelConfig = serde_json::from_value(index.meta["config"].clone())
            .map_err(|e| Error::File { path: base.to_path_buf(), msg: format!("bad model config: {e}") })?;
        let completed: Vec<Stage> = serde_json::from_value(index.meta["completed"].clone()).unwrap_or_default();
        let mut model = RadFormer::new(cfg)?;
        let (entries, _) = checkpoint::load::<T>(base)?;
        let report = checkpoint::import(&mut model.store, entries);
        if !report.is_exact() {
            return Err(Error::File { path: base.to_path_buf(), msg: format!("checkpoint does not match model: {report:?}") });
        }
        model.completed = completed;
        Ok(model)
    }

    /// Copies every tensor of a checkpoint whose name and shape match,
    /// leaving the rest at initialisation. Stage progress is not restored.
    pub fn warm_start(&mut self, base: &Path) -> Result<ImportReport> {
        let (entries, _) = checkpoint::load::<T>(base)?;
        let report = checkpoint::import(&mut self.store, entries);
        if report.loaded.is_empty() {
            return Err(Error::File { path: base.to_path_buf(), msg: "no tensor in the checkpoint matches the model".into() });
        }
        Ok(report)
    }
}
