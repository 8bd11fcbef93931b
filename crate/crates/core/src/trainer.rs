//! Staged training, cross-validation and ROI benchmarking.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radformer_tensor::{parallel, Element, ParamId, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::augment::GrayImage;
use crate::data::{augment, augment_box, AugmentConfig, Class, Manifest, SynthCorpus};
use crate::error::{Error, Result};
use crate::metrics::{argmax, evaluate, summarize, MetricsReport, Summary};
use crate::model::{ModelConfig, Pass, RadFormer, Stage};
use crate::roi::{roi_metrics, Binarization, BoundingBox, RoiMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 16,
            epochs: 60,
            decay_factor: 0.8,
            decay_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr0 > 0.0 && self.batch_size > 0 && self.epochs > 0 && self.decay_every > 0;
        let ranged = (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0;
        if !positive || !ranged {
            return Err(Error::config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// SGD with momentum; weight decay is added to the gradient.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    velocity: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new() -> Self {
        Sgd { velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Tensor<T>>, lr: f64, momentum: f64, weight_decay: f64) {
        let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
        for (&id, g) in grads {
            let p = store.param_mut(id);
            if p.frozen {
                continue;
            }
            let buf = self.velocity.entry(id).or_insert_with(|| vec![T::zero(); g.numel()]);
            for ((w, &gi), b) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                *b = mu * *b + (gi + wd * *w);
                *w = *w - lr * *b;
            }
        }
    }
}

/// Preprocessed images with labels and annotated boxes in the network frame.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub size: usize,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Class>,
    pub patients: Vec<String>,
    pub rois: Vec<Option<BoundingBox>>,
}

impl Dataset {
    fn from_images<'a>(
        items: impl Iterator<Item = (Result<GrayImage>, &'a crate::data::Sample)>,
        size: usize,
    ) -> Result<Self> {
        let cfg = AugmentConfig::for_size(size);
        let mut d = Dataset { size, images: Vec::new(), labels: Vec::new(), patients: Vec::new(), rois: Vec::new() };
        for (img, s) in items {
            let img = img?;
            d.rois.push(s.roi.map(|b| augment_box(&b, img.width, img.height, &cfg)));
            d.images.push(augment(&img, &cfg, true)?);
            d.labels.push(s.label);
            d.patients.push(s.patient_id.clone());
        }
        Ok(d)
    }

    pub fn from_manifest(m: &Manifest, size: usize) -> Result<Self> {
        Self::from_images(m.samples.iter().map(|s| (GrayImage::open(&m.resolve(&s.path)), s)), size)
    }

    pub fn from_synth(c: &SynthCorpus, size: usize) -> Result<Self> {
        Self::from_images(c.images.iter().cloned().map(Ok).zip(&c.manifest.samples), size)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * 3 * self.size * self.size);
        for &i in indices {
            data.extend(self.images[i].data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(Tensor::new([indices.len(), 3, self.size, self.size], data)?)
    }

    pub fn targets(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i].index()).collect()
    }

    pub fn indices_for(&self, patients: &BTreeSet<String>) -> Vec<usize> {
        (0..self.len()).filter(|&i| patients.contains(&self.patients[i])).collect()
    }

    pub fn unique_patients(&self) -> Vec<String> {
        self.patients.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: Option<usize>,
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Stage::ORDER.iter().position(|&x| x == stage).expect("known stage") as u64;
    rng.set_stream((s << 32) | epoch as u64);
    rng
}

/// Trains one stage on `indices`, freezing every parameter outside it.
pub fn stage_train<T: Element>(
    model: &mut RadFormer<T>,
    stage: Stage,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    model.check_stage_order(stage)?;
    if indices.is_empty() {
        return Err(Error::data("no training samples"));
    }
    if data.size != model.input_size() {
        return Err(Error::config(format!("dataset is {}px, model expects {}px", data.size, model.input_size())));
    }
    model.configure_stage(stage);
    let mut sgd = Sgd::new();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let pass = Pass::for_stage(stage);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let mut order = indices.to_vec();
        order.shuffle(&mut epoch_rng(cfg.seed, stage, epoch));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.batch::<T>(chunk)?;
            let targets = data.targets(chunk);
            let (loss, grads, updates, hits) = {
                let mut tape = Tape::with_store(&model.store);
                let out = model.forward(&mut tape, &x, pass)?;
                let logits = match stage {
                    Stage::Global => out.global.logits,
                    Stage::Local => out.local.expect("local pass").logits,
                    Stage::Full => out.fusion.as_ref().expect("fusion pass").logits,
                };
                let loss = match stage {
                    Stage::Full => {
                        let lg = tape.cross_entropy(out.global.logits, &targets)?;
                        let ll = tape.cross_entropy(out.local.expect("local pass").logits, &targets)?;
                        let lf = tape.cross_entropy(logits, &targets)?;
                        let s = tape.add(lg, ll)?;
                        tape.add(s, lf)?
                    }
                    _ => tape.cross_entropy(logits, &targets)?,
                };
                let values = tape.value(logits).to_f64_vec();
                let hits = values.chunks(3).zip(&targets).filter(|(row, &t)| argmax(row) == t).count();
                let grads = tape.backward(loss)?;
                let loss_value = tape.value(loss).item().to_f64_lossy();
                (loss_value, grads.into_params(), tape.take_running_updates(), hits)
            };
            model.store.apply_running_updates(&updates);
            sgd.step(&mut model.store, &grads, lr, cfg.momentum, cfg.weight_decay);
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let n = indices.len() as f64;
        let entry = EpochLog { fold: None, stage, epoch, lr, loss: loss_sum / n, train_accuracy: correct as f64 / n };
        log::debug!("{}", serde_json::to_string(&entry).unwrap_or_default());
        logs.push(entry);
    }
    model.mark_completed(stage);
    Ok(logs)
}

/// Class probabilities and ROIs for `indices`, in eval mode. The head is the
/// last trained one: fusion after the full stage, else local, else global.
pub fn predict<T: Element>(
    model: &RadFormer<T>,
    data: &Dataset,
    indices: &[usize],
    strategy: Binarization,
) -> Result<(Vec<Vec<f64>>, Vec<BoundingBox>)> {
    let head = if model.completed.contains(&Stage::Full) {
        Stage::Full
    } else if model.completed.contains(&Stage::Local) {
        Stage::Local
    } else {
        Stage::Global
    };
    let pass = Pass { run_local: head != Stage::Global, run_fusion: head == Stage::Full, ..Pass::eval() };
    let (mut probs, mut rois) = (Vec::new(), Vec::new());
    for chunk in indices.chunks(16) {
        let x = data.batch::<T>(chunk)?;
        let mut tape = Tape::inference(&model.store);
        let out = model.forward_with(&mut tape, &x, pass, strategy)?;
        let logits = match head {
            Stage::Global => out.global.logits,
            Stage::Local => out.local.expect("local pass").logits,
            Stage::Full => out.fusion.as_ref().expect("fusion pass").logits,
        };
        let p = tape.softmax(logits)?;
        probs.extend(tape.value(p).to_f64_vec().chunks(3).map(|c| c.to_vec()));
        if pass.run_local {
            rois.extend(out.rois);
        } else {
            rois.extend(model.rois_from_features(tape.value(out.global.features), strategy)?);
        }
    }
    Ok((probs, rois))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
}

/// Patient-level folds: shuffle the sorted patient ids with `seed` and deal
/// them round robin.
pub fn kfold_split(patients: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let mut ids: Vec<String> = patients.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.iter().any(|p| p.is_empty()) {
        return Err(Error::data("empty patient id"));
    }
    if k < 2 || k > ids.len() {
        return Err(Error::config(format!("cannot split {} patients into {k} folds", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    for (i, p) in ids.iter().enumerate() {
        folds[i % k].insert(p.clone());
    }
    Ok((0..k)
        .map(|f| FoldSplit {
            fold: f,
            validation: folds[f].clone(),
            train: folds.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, s)| s.iter().cloned()).collect(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Binarization,
    pub report: MetricsReport,
    /// Mean over samples with annotated boxes; absent if none.
    pub roi: Option<RoiMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub report: MetricsReport,
    pub strategies: Vec<StrategyResult>,
    #[serde(skip)]
    pub logs: Vec<EpochLog>,
}

pub fn mean_roi_metrics(pred: &[BoundingBox], annotated: &[Option<BoundingBox>], size: usize) -> Option<RoiMetrics> {
    let pairs: Vec<RoiMetrics> = pred
        .iter()
        .zip(annotated)
        .filter_map(|(p, a)| a.map(|a| roi_metrics(p, &a, size, size)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    Some(RoiMetrics {
        iou: pairs.iter().map(|m| m.iou).sum::<f64>() / n,
        intersection_fraction: pairs.iter().map(|m| m.intersection_fraction).sum::<f64>() / n,
        area_fraction: pairs.iter().map(|m| m.area_fraction).sum::<f64>() / n,
    })
}

/// Evaluates every strategy on `indices`.
pub fn benchmark_strategies<T: Element>(
    model: &RadFormer<T>,
    data: &Dataset,
    indices: &[usize],
    strategies: &[Binarization],
) -> Result<Vec<StrategyResult>> {
    let labels: Vec<Class> = indices.iter().map(|&i| data.labels[i]).collect();
    let annotated: Vec<Option<BoundingBox>> = indices.iter().map(|&i| data.rois[i]).collect();
    strategies
        .iter()
        .map(|&strategy| {
            let (probs, rois) = predict(model, data, indices, strategy)?;
            Ok(StrategyResult {
                strategy,
                report: evaluate(&probs, &labels)?,
                roi: mean_roi_metrics(&rois, &annotated, data.size),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CvConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stages: Vec<Stage>,
    pub folds: usize,
    /// Strategies benchmarked on each validation fold.
    pub strategies: Vec<Binarization>,
    pub parallel_folds: bool,
    /// Checkpoint every fold starts from.
    pub init: Option<PathBuf>,
}

fn run_fold(data: &Dataset, split: &FoldSplit, cfg: &CvConfig) -> Result<FoldResult> {
    let mut model = RadFormer::<f32>::new(cfg.model.clone())?;
    if let Some(base) = &cfg.init {
        let report = model.warm_start(base)?;
        log::info!("fold {}: {} tensors from {}, {} left at init", split.fold, report.loaded.len(), base.display(), report.missing.len());
    }
    let train = data.indices_for(&split.train);
    let val = data.indices_for(&split.validation);
    let mut logs = Vec::new();
    for &stage in &cfg.stages {
        for mut l in stage_train(&mut model, stage, data, &train, &cfg.train)? {
            l.fold = Some(split.fold);
            logs.push(l);
        }
    }
    let labels: Vec<Class> = val.iter().map(|&i| data.labels[i]).collect();
    let (probs, _) = predict(&model, data, &val, cfg.model.binarization)?;
    Ok(FoldResult {
        fold: split.fold,
        report: evaluate(&probs, &labels)?,
        strategies: benchmark_strategies(&model, data, &val, &cfg.strategies)?,
        logs,
    })
}

/// Patient-disjoint k-fold cross-validation. Results are ordered by fold
/// whether or not folds run concurrently.
pub fn cross_validate(data: &Dataset, cfg: &CvConfig) -> Result<Vec<FoldResult>> {
    let splits = kfold_split(&data.patients, cfg.folds, cfg.train.seed)?;
    if cfg.parallel_folds {
        parallel::map_indices(splits.len(), |f| run_fold(data, &splits[f], cfg)).into_iter().collect()
    } else {
        splits.iter().map(|s| run_fold(data, s, cfg)).collect()
    }
}

/// Column summaries of a strategy across folds: mIoU, mIntersection, area
/// fraction, then the classification columns.
pub fn strategy_summary(results: &[FoldResult], strategy: Binarization) -> Vec<Option<Summary>> {
    let picked: Vec<&StrategyResult> =
        results.iter().filter_map(|r| r.strategies.iter().find(|s| s.strategy == strategy)).collect();
    let mut out = vec![
        summarize(picked.iter().map(|s| s.roi.map(|m| m.iou))),
        summarize(picked.iter().map(|s| s.roi.map(|m| m.intersection_fraction))),
        summarize(picked.iter().map(|s| s.roi.map(|m| m.area_fraction))),
    ];
    let reports: Vec<MetricsReport> = picked.iter().map(|s| s.report.clone()).collect();
    out.extend(crate::metrics::summarize_reports(&reports));
    out
}
