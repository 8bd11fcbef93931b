use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use radformer_core::data::augment::GrayImage;
use radformer_core::data::{synth_generate, Class, Manifest, SynthConfig};
use radformer_core::explainer::{
    build_lexicon_map, explain as explain_image, feature_frequency, ExplainableModel, Explanation, LexiconMap,
    WeightHead, WeightMode, WeightOptions,
};
use radformer_core::export::{to_gray, write_json, write_pgm};
use radformer_core::metrics::evaluate as score;
use radformer_core::presets::preset_table_json;
use radformer_core::rig::GlyphRig;
use radformer_core::roi::Binarization;
use radformer_core::trainer::{
    benchmark_strategies, cross_validate, kfold_split, predict, stage_train, CvConfig, Dataset, FoldResult, TrainConfig,
};
use radformer_core::{Error, ModelConfig, RadFormer, Stage};

use crate::args::*;
use crate::report;

/// Usage errors exit with 2, data errors with 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::StageOrder(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("manifest {} not found", path.display())));
    }
    let m = Manifest::load(path)?;
    m.validate(true)?;
    Ok(m)
}

fn out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", path.display())))
}

fn checkpoint_exists(base: &Path) -> CliResult<()> {
    if base.with_extension("json").is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("checkpoint {} not found (expected {})", base.display(), base.with_extension("json").display())))
    }
}

fn model_config(o: &TrainOpts) -> CliResult<ModelConfig> {
    let mut cfg = ModelConfig::from_preset(&o.preset)?;
    cfg.binarization = o.binarize;
    cfg.seed = o.seed;
    Ok(cfg)
}

fn train_config(o: &TrainOpts) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr0: o.lr.unwrap_or(d.lr0),
        batch_size: o.batch.unwrap_or(d.batch_size),
        epochs: o.epochs.unwrap_or(d.epochs),
        seed: o.seed,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn stages_for(stage: StageArg) -> Vec<Stage> {
    match stage {
        StageArg::Global => vec![Stage::Global],
        StageArg::Local => vec![Stage::Local],
        StageArg::Full => vec![Stage::Full],
        StageArg::All => Stage::ORDER.to_vec(),
    }
}

/// Stages a fresh cross-validation model needs to reach `stage`.
fn stages_through(stage: StageArg) -> Vec<Stage> {
    let last = *stages_for(stage).last().expect("one stage");
    Stage::ORDER.iter().copied().take_while(|&s| s != last).chain([last]).collect()
}

fn load_model(base: &Path) -> CliResult<RadFormer<f32>> {
    checkpoint_exists(base)?;
    Ok(RadFormer::load(base)?)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let manifest = load_manifest(&a.manifest)?;
    let tcfg = train_config(&a.opts)?;
    let mcfg = model_config(&a.opts)?;
    out_dir(&a.out)?;
    if let Some(k) = a.folds {
        let data = Dataset::from_manifest(&manifest, mcfg.global.spec().input_size)?;
        if let Some(init) = &a.checkpoint {
            checkpoint_exists(init)?;
        }
        let label = mcfg.global.label();
        let cfg = CvConfig {
            model: mcfg,
            train: tcfg,
            stages: stages_through(a.stage),
            folds: k,
            strategies: vec![a.opts.binarize],
            parallel_folds: a.parallel_folds,
            init: a.checkpoint.clone(),
        };
        let results = cross_validate(&data, &cfg)?;
        let logs: Vec<_> = results.iter().flat_map(|r| r.logs.iter().cloned()).collect();
        report::write_logs(&a.out.join("log.jsonl"), &logs)?;
        report::write_fold_csv(&a.out.join("folds.csv"), &results)?;
        let reports: Vec<_> = results.iter().map(|r| r.report.clone()).collect();
        report::write_summary_csv(&a.out.join("table.csv"), &format!("radformer ({label})"), &reports)?;
        write_json(&a.out.join("results.json"), &results)?;
        let mean = reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64;
        println!("{k}-fold accuracy {mean:.3}; reports in {}", a.out.display());
        return Ok(());
    }

    let mut model = match &a.checkpoint {
        Some(base) => {
            let m = load_model(base)?;
            if m.cfg.global != mcfg.global && a.opts.preset != "toy" {
                log::warn!("checkpoint preset {} overrides --preset {}", m.cfg.global, a.opts.preset);
            }
            m
        }
        None => RadFormer::<f32>::new(mcfg)?,
    };
    let data = Dataset::from_manifest(&manifest, model.input_size())?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::new();
    for stage in stages_for(a.stage) {
        logs.extend(stage_train(&mut model, stage, &data, &all, &tcfg)?);
        model.save(&a.out.join(format!("model-{}", stage.label())))?;
        let last = logs.last().expect("at least one epoch");
        println!("stage {}: loss {:.4}, train accuracy {:.3}", stage.label(), last.loss, last.train_accuracy);
    }
    model.save(&a.out.join("model"))?;
    report::write_logs(&a.out.join("log.jsonl"), &logs)?;
    let (probs, _) = predict(&model, &data, &all, model.cfg.binarization)?;
    let r = score(&probs, &data.labels)?;
    write_json(&a.out.join("train_metrics.json"), &r)?;
    println!("checkpoint {}", a.out.join("model").display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let manifest = load_manifest(&a.manifest)?;
    let model = load_model(&a.checkpoint)?;
    out_dir(&a.out)?;
    let data = Dataset::from_manifest(&manifest, model.input_size())?;
    let all: Vec<usize> = (0..data.len()).collect();
    let strategy = a.binarize.unwrap_or(model.cfg.binarization);
    let (probs, rois) = predict(&model, &data, &all, strategy)?;
    let r = score(&probs, &data.labels)?;
    let mut w = csv::Writer::from_path(a.out.join("predictions.csv"))?;
    w.write_record(["path", "patient_id", "label", "predicted", "p_normal", "p_benign", "p_malignant", "x_min", "y_min", "x_max", "y_max"])?;
    for ((s, p), b) in manifest.samples.iter().zip(&probs).zip(&rois) {
        let pred = Class::from_index(radformer_core::metrics::argmax(p)).expect("three classes");
        let mut row = vec![s.path.display().to_string(), s.patient_id.clone(), s.label.name().into(), pred.name().into()];
        row.extend(p.iter().map(|v| format!("{v:.6}")));
        row.extend(b.as_array().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    write_json(&a.out.join("metrics.json"), &r)?;
    println!(
        "accuracy {:.3}, sensitivity {}, specificity {}",
        r.accuracy,
        r.sensitivity.map_or("n/a".into(), |v| format!("{v:.3}")),
        r.specificity.map_or("n/a".into(), |v| format!("{v:.3}"))
    );
    Ok(())
}

pub fn roi_bench(a: RoiBenchArgs) -> CliResult<()> {
    let manifest = load_manifest(&a.manifest)?;
    let strategies = if a.strategies.is_empty() { Binarization::TABLE.to_vec() } else { a.strategies.clone() };
    let results: Vec<FoldResult> = match &a.checkpoint {
        Some(base) => {
            let model = load_model(base)?;
            out_dir(&a.out)?;
            let data = Dataset::from_manifest(&manifest, model.input_size())?;
            require_boxes(&data)?;
            let groups: Vec<Vec<usize>> = if a.folds <= 1 {
                vec![(0..data.len()).collect()]
            } else {
                kfold_split(&data.patients, a.folds, a.opts.seed)?.iter().map(|s| data.indices_for(&s.validation)).collect()
            };
            groups
                .iter()
                .enumerate()
                .map(|(fold, idx)| {
                    let strategies = benchmark_strategies(&model, &data, idx, &strategies)?;
                    Ok(FoldResult { fold, report: strategies[0].report.clone(), strategies, logs: Vec::new() })
                })
                .collect::<CliResult<_>>()?
        }
        None => {
            let mcfg = model_config(&a.opts)?;
            let tcfg = train_config(&a.opts)?;
            out_dir(&a.out)?;
            let data = Dataset::from_manifest(&manifest, mcfg.global.spec().input_size)?;
            require_boxes(&data)?;
            let cfg = CvConfig {
                model: mcfg,
                train: tcfg,
                stages: Stage::ORDER.to_vec(),
                folds: a.folds,
                strategies: strategies.clone(),
                parallel_folds: a.parallel_folds,
                init: None,
            };
            let results = cross_validate(&data, &cfg)?;
            let logs: Vec<_> = results.iter().flat_map(|r| r.logs.iter().cloned()).collect();
            report::write_logs(&a.out.join("log.jsonl"), &logs)?;
            results
        }
    };
    report::write_roi_table(&a.out.join("roi_table.csv"), &results, &strategies)?;
    report::write_roi_folds(&a.out.join("roi_folds.csv"), &results)?;
    println!("{} strategies over {} folds; table in {}", strategies.len(), results.len(), a.out.join("roi_table.csv").display());
    Ok(())
}

fn require_boxes(data: &Dataset) -> CliResult<()> {
    if data.rois.iter().all(Option::is_none) {
        return Err(CliError::Data("no sample in the manifest has an annotated roi box".into()));
    }
    Ok(())
}

enum Explainer {
    Model(Box<RadFormer<f32>>),
    Rig(GlyphRig),
}

impl Explainer {
    fn open(source: &ModelSource, seed: u64, image_size: usize) -> CliResult<Self> {
        match &source.checkpoint {
            Some(base) => Ok(Explainer::Model(Box::new(load_model(base)?))),
            None => Ok(Explainer::Rig(GlyphRig::new(seed, image_size, &SynthConfig::default())?)),
        }
    }

    fn get(&self) -> &dyn ExplainableModel {
        match self {
            Explainer::Model(m) => m.as_ref(),
            Explainer::Rig(r) => r,
        }
    }
}

fn weight_options(w: &WeightArgs) -> WeightOptions {
    WeightOptions {
        mode: match w.weights {
            WeightArg::Gradient => WeightMode::Gradient,
            WeightArg::GradientXActivation => WeightMode::GradientTimesActivation,
        },
        head: match w.head {
            HeadArg::Fusion => WeightHead::Fusion,
            HeadArg::Local => WeightHead::Local,
        },
    }
}

fn check_epsilon(e: f64) -> CliResult<()> {
    if !(0.0..=1.0).contains(&e) {
        return Err(CliError::Usage(format!("--epsilon must be a fraction in [0, 1], got {e}")));
    }
    Ok(())
}

pub fn map(a: MapArgs) -> CliResult<()> {
    check_epsilon(a.weights.epsilon)?;
    let manifest = load_manifest(&a.manifest)?;
    let mut labelled = Vec::new();
    for s in &manifest.samples {
        let lex: BTreeSet<usize> = s.lexicons.iter().flatten().copied().collect();
        if !lex.is_empty() {
            labelled.push((GrayImage::open(&manifest.resolve(&s.path))?, lex));
        }
    }
    if labelled.is_empty() {
        return Err(CliError::Data("no image in the manifest carries lexicon labels".into()));
    }
    let model = Explainer::open(&a.source, a.weights.seed, labelled[0].0.width)?;
    let m = build_lexicon_map(model.get(), &manifest.vocabulary, &labelled, a.weights.epsilon, weight_options(&a.weights))?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    fs::write(&a.out, m.to_json())?;
    println!("{} labelled images, {} lexicons mapped, {} features", labelled.len(), m.r.len(), m.m.len());
    let names = |s: &BTreeSet<usize>| s.iter().map(|&l| m.name(l).to_string()).collect::<Vec<_>>().join(", ");
    if !m.residual.is_empty() {
        println!("unresolved (only seen together with others): {}", names(&m.residual));
    }
    if !m.unseen.is_empty() {
        println!("never labelled: {}", names(&m.unseen));
    }
    println!("map {}", a.out.display());
    Ok(())
}

fn nearest_upscale(values: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * factor * factor);
    for y in 0..h * factor {
        for x in 0..w * factor {
            out.push(values[(y / factor) * w + x / factor]);
        }
    }
    out
}

fn write_bundle(dir: &Path, stem: &str, e: &Explanation) -> CliResult<()> {
    write_json(&dir.join(format!("{stem}.json")), e)?;
    let (h, w) = e.map_size;
    let factor = (64 / h.max(w).max(1)).max(1);
    for (id, values) in &e.maps {
        let up = nearest_upscale(values, h, w, factor);
        write_pgm(&dir.join(format!("{stem}_feature{id}.pgm")), w * factor, h * factor, &to_gray(&up))?;
    }
    if !e.attention.is_empty() {
        let mut wtr = csv::Writer::from_path(dir.join(format!("{stem}_attention.csv")))?;
        wtr.write_record(["layer", "head", "query", "key", "score"])?;
        for rec in &e.attention {
            for (q, row) in rec.scores.iter().enumerate() {
                for (k, s) in row.iter().enumerate() {
                    wtr.write_record([rec.layer.to_string(), rec.head.to_string(), q.to_string(), k.to_string(), format!("{s:.8}")])?;
                }
            }
        }
        wtr.flush()?;
    }
    Ok(())
}

pub fn explain(a: ExplainArgs) -> CliResult<()> {
    check_epsilon(a.weights.epsilon)?;
    if !a.map.is_file() {
        return Err(CliError::Usage(format!(
            "lexicon map {} not found; build one first with `radformer map --manifest <labelled manifest> --out {}`",
            a.map.display(),
            a.map.display()
        )));
    }
    let map = LexiconMap::from_json(&fs::read_to_string(&a.map)?)?;
    let items: Vec<(PathBuf, Option<Class>)> = match &a.manifest {
        Some(p) => {
            let m = load_manifest(p)?;
            m.samples.iter().map(|s| (m.resolve(&s.path), Some(s.label))).collect()
        }
        None => a.images.iter().map(|p| (p.clone(), None)).collect(),
    };
    for (p, _) in &items {
        if !p.is_file() {
            return Err(CliError::Usage(format!("image {} not found", p.display())));
        }
    }
    out_dir(&a.out)?;
    let first = GrayImage::open(&items[0].0)?;
    let model = Explainer::open(&a.source, a.weights.seed, first.width)?;
    let opts = weight_options(&a.weights);
    let mut groups: BTreeMap<String, Vec<Explanation>> = BTreeMap::new();
    for (i, (path, label)) in items.iter().enumerate() {
        let img = GrayImage::open(path)?;
        let e = explain_image(model.get(), &img, &map, a.weights.epsilon, opts)?;
        let stem = format!("{i:04}_{}", path.file_stem().map_or("image".into(), |s| s.to_string_lossy()));
        write_bundle(&a.out, &stem, &e)?;
        let lexicons = if e.lexicons.is_empty() { "-".to_string() } else { e.lexicons.join("; ") };
        println!("{}: {} [{}]", path.display(), e.predicted, lexicons);
        let class = label.map_or_else(|| e.predicted.clone(), |c| c.name().to_string());
        groups.entry(class).or_default().push(e.clone());
        groups.entry("all".into()).or_default().push(e);
    }
    let mut w = csv::Writer::from_path(a.out.join("frequency.csv"))?;
    w.write_record(["group", "images", "feature", "frequency"])?;
    for (group, es) in &groups {
        for (id, f) in feature_frequency(es) {
            w.write_record([group.clone(), es.len().to_string(), id.to_string(), format!("{f:.6}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        patients: a.patients,
        images_per_patient: a.images_per_patient,
        size: a.size,
        folds: a.folds,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg)?;
    out_dir(&a.out)?;
    let path = corpus.write(&a.out)?;
    for w in &corpus.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} images from {} patients; manifest {}", corpus.images.len(), cfg.patients, path.display());
    Ok(())
}

pub fn presets(a: PresetsArgs) -> CliResult<()> {
    let json = preset_table_json();
    match a.out {
        Some(p) => fs::write(p, json)?,
        None => print!("{json}"),
    }
    Ok(())
}
