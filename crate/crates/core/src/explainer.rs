//! Feature weights, lexicon mapping and per-image explanations.

use std::collections::{BTreeMap, BTreeSet};

use radformer_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::augment::GrayImage;
use crate::data::{augment, AugmentConfig, Class};
use crate::error::{Error, Result};
use crate::fusion::{attention_records, AttentionRecord};
use crate::model::{Pass, RadFormer};
use crate::roi::{BoundingBox, FeatureMap};

pub const MAX_VOCABULARY: usize = 16;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const TOP_K: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Gradient,
    GradientTimesActivation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightHead {
    #[default]
    Fusion,
    Local,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WeightOptions {
    pub mode: WeightMode,
    pub head: WeightHead,
}

/// Everything the explainer needs from one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub predicted: Class,
    pub probabilities: Vec<f64>,
    /// One weight per local feature channel.
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
    pub activations: FeatureMap,
    pub roi: Option<BoundingBox>,
    pub attention: Vec<AttentionRecord>,
}

pub trait ExplainableModel {
    fn feature_dim(&self) -> usize;
    fn analyze(&self, image: &GrayImage, opts: WeightOptions) -> Result<Analysis>;
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Gradient of `logits[0, class]` with respect to `token` (first row).
/// Zero when the token does not reach the logit.
pub fn logit_gradient<T: Element>(tape: &mut Tape<'_, T>, logits: Var, class: usize, token: Var) -> Result<Vec<f64>> {
    let d = tape.shape(token).last().copied().unwrap_or(0);
    let picked = tape.pick(logits, class)?;
    let grads = tape.backward_retain(picked, &[token])?;
    Ok(match grads.get(token) {
        Some(g) => g.data()[..d].iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; d],
    })
}

impl<T: Element> ExplainableModel for RadFormer<T> {
    fn feature_dim(&self) -> usize {
        self.local.backbone.feature_channels()
    }

    fn analyze(&self, image: &GrayImage, opts: WeightOptions) -> Result<Analysis> {
        let s = self.input_size();
        let x = augment(image, &AugmentConfig::for_size(s), false)?;
        let x: Tensor<T> = x.cast::<T>().reshape([1, 3, s, s])?;
        let mut tape = Tape::with_store(&self.store);
        let pass = Pass { detach_local_token: true, ..Pass::eval() };
        let out = self.forward(&mut tape, &x, pass)?;
        let (local, token, fusion) = match (out.local, out.local_token, out.fusion) {
            (Some(l), Some(t), Some(f)) => (l, t, f),
            _ => return Err(Error::config("explanation needs the local branch and the fusion")),
        };
        let fused: Vec<f64> = tape.value(fusion.logits).to_f64_vec();
        let predicted = Class::from_index(argmax(&fused)).expect("three classes");
        let head_logits = match opts.head {
            WeightHead::Fusion => fusion.logits,
            WeightHead::Local => self.local.head.forward(&mut tape, token)?,
        };
        let head_values = tape.value(head_logits).to_f64_vec();
        let pooled = tape.value(token).to_f64_vec();
        let activations = FeatureMap::from_batch(tape.value(local.features), 0)?;
        let scores: Vec<Tensor<T>> = fusion.attention.iter().map(|&a| tape.value(a).clone()).collect();
        let mut weights = logit_gradient(&mut tape, head_logits, argmax(&head_values), token)?;
        if opts.mode == WeightMode::GradientTimesActivation {
            for (w, a) in weights.iter_mut().zip(&pooled) {
                *w *= a;
            }
        }
        Ok(Analysis {
            predicted,
            probabilities: softmax(&fused),
            weights,
            pooled,
            activations,
            roi: out.rois.first().copied(),
            attention: attention_records(&scores, self.cfg.heads, 0),
        })
    }
}

/// Argmax (smallest index on ties) plus every `j` with `|W* − W_j| ≤ ε`.
pub fn find_top_feature_ids(w: &[f64], epsilon: f64) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    if w.is_empty() {
        return out;
    }
    let best = argmax(w);
    out.insert(best);
    for (j, &v) in w.iter().enumerate() {
        if (w[best] - v).abs() <= epsilon {
            out.insert(j);
        }
    }
    out
}

/// `frac · |W*|`.
pub fn relative_epsilon(w: &[f64], frac: f64) -> f64 {
    w.get(argmax(w)).map_or(0.0, |m| frac * m.abs())
}

/// Indices of the `k` largest weights, descending, smallest index on ties.
pub fn top_k(w: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// One labelled image reduced to its top feature ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelledFeatures {
    pub lexicons: BTreeSet<usize>,
    pub features: BTreeSet<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LexiconMap {
    pub vocabulary: Vec<String>,
    pub r: BTreeMap<usize, BTreeSet<usize>>,
    pub m: BTreeMap<usize, usize>,
    /// Lexicons seen in the data that no difference could isolate.
    pub residual: BTreeSet<usize>,
    /// Lexicons that never appear in a non-empty label set.
    pub unseen: BTreeSet<usize>,
    /// Features claimed by more than one lexicon; `m` keeps the last.
    pub shared: BTreeMap<usize, BTreeSet<usize>>,
}

fn canonical_order(keys: impl Iterator<Item = BTreeSet<usize>>) -> Vec<BTreeSet<usize>> {
    let mut v: Vec<BTreeSet<usize>> = keys.collect();
    v.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.iter().cmp(b.iter())));
    v
}

/// Lexicon/feature mapping from per-image top feature sets.
pub fn map_from_features(vocabulary: &[String], data: &[LabelledFeatures]) -> Result<LexiconMap> {
    let k = vocabulary.len();
    if k == 0 || k > MAX_VOCABULARY {
        return Err(Error::config(format!("vocabulary size {k} outside 1..={MAX_VOCABULARY}")));
    }
    let mut s: BTreeMap<BTreeSet<usize>, BTreeSet<usize>> = BTreeMap::new();
    for item in data {
        if item.lexicons.is_empty() {
            continue;
        }
        if let Some(&bad) = item.lexicons.iter().find(|&&l| l >= k) {
            return Err(Error::data(format!("lexicon id {bad} outside the vocabulary")));
        }
        s.entry(item.lexicons.clone()).or_default().extend(item.features.iter().copied());
    }
    let seen: BTreeSet<usize> = s.keys().flatten().copied().collect();
    let mut r: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (set, feats) in &s {
        if set.len() == 1 {
            r.insert(*set.first().expect("singleton"), feats.clone());
        }
    }
    loop {
        let mut changed = false;
        let keys = canonical_order(s.keys().cloned());
        for x in &keys {
            for y in &keys {
                if x == y {
                    continue;
                }
                let diff: Vec<usize> = x.difference(y).copied().collect();
                if diff.len() != 1 || r.contains_key(&diff[0]) {
                    continue;
                }
                let l = diff[0];
                let feats: BTreeSet<usize> = s[x].difference(&s[y]).copied().collect();
                r.insert(l, feats.clone());
                s.insert(BTreeSet::from([l]), feats);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut m = BTreeMap::new();
    let mut shared: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&l, feats) in &r {
        for &f in feats {
            if let Some(prev) = m.insert(f, l) {
                let e = shared.entry(f).or_default();
                e.insert(prev);
                e.insert(l);
            }
        }
    }
    Ok(LexiconMap {
        vocabulary: vocabulary.to_vec(),
        residual: seen.iter().filter(|l| !r.contains_key(l)).copied().collect(),
        unseen: (0..k).filter(|l| !seen.contains(l)).collect(),
        r,
        m,
        shared,
    })
}

/// Runs the model over every labelled image and maps its top features.
/// `epsilon` is a fraction of `|W*|` per image.
pub fn build_lexicon_map<M: ExplainableModel + ?Sized>(
    model: &M,
    vocabulary: &[String],
    data: &[(GrayImage, BTreeSet<usize>)],
    epsilon: f64,
    opts: WeightOptions,
) -> Result<LexiconMap> {
    if vocabulary.len() > MAX_VOCABULARY {
        return Err(Error::config(format!("vocabulary size {} exceeds {MAX_VOCABULARY}", vocabulary.len())));
    }
    let mut items = Vec::new();
    for (img, lexicons) in data.iter().filter(|(_, l)| !l.is_empty()) {
        let a = model.analyze(img, opts)?;
        let eps = relative_epsilon(&a.weights, epsilon);
        items.push(LabelledFeatures { lexicons: lexicons.clone(), features: find_top_feature_ids(&a.weights, eps) });
    }
    if items.is_empty() {
        return Err(Error::data("no images with lexicon labels"));
    }
    map_from_features(vocabulary, &items)
}

#[derive(Serialize, Deserialize)]
struct MapDocument {
    vocabulary: Vec<String>,
    lexicons: BTreeMap<String, Vec<usize>>,
    features: BTreeMap<usize, String>,
    residual: Vec<String>,
    unseen: Vec<String>,
    shared: BTreeMap<usize, Vec<String>>,
}

impl LexiconMap {
    pub fn name(&self, l: usize) -> &str {
        self.vocabulary.get(l).map_or("?", |s| s.as_str())
    }

    pub fn to_json(&self) -> String {
        let names = |set: &BTreeSet<usize>| set.iter().map(|&l| self.name(l).to_string()).collect::<Vec<_>>();
        let doc = MapDocument {
            vocabulary: self.vocabulary.clone(),
            lexicons: self.r.iter().map(|(&l, f)| (self.name(l).to_string(), f.iter().copied().collect())).collect(),
            features: self.m.iter().map(|(&f, &l)| (f, self.name(l).to_string())).collect(),
            residual: names(&self.residual),
            unseen: names(&self.unseen),
            shared: self.shared.iter().map(|(&f, ls)| (f, names(ls))).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("map serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MapDocument = serde_json::from_str(text)?;
        let id = |name: &str| {
            doc.vocabulary
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| Error::data(format!("lexicon {name:?} not in the map vocabulary")))
        };
        let ids = |names: &[String]| names.iter().map(|n| id(n)).collect::<Result<BTreeSet<usize>>>();
        let mut r = BTreeMap::new();
        for (name, f) in &doc.lexicons {
            r.insert(id(name)?, f.iter().copied().collect());
        }
        let mut m = BTreeMap::new();
        for (&f, name) in &doc.features {
            m.insert(f, id(name)?);
        }
        let mut shared = BTreeMap::new();
        for (&f, names) in &doc.shared {
            shared.insert(f, ids(names)?);
        }
        Ok(LexiconMap {
            residual: ids(&doc.residual)?,
            unseen: ids(&doc.unseen)?,
            vocabulary: doc.vocabulary,
            r,
            m,
            shared,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub id: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub predicted: String,
    pub probabilities: Vec<f64>,
    pub roi: Option<[usize; 4]>,
    pub top_features: Vec<FeatureScore>,
    /// Features within ε of the best positive weight.
    pub selected: Vec<usize>,
    pub lexicons: Vec<String>,
    pub unmatched: Vec<usize>,
    #[serde(skip)]
    pub maps: Vec<(usize, Vec<f64>)>,
    #[serde(skip)]
    pub map_size: (usize, usize),
    #[serde(skip)]
    pub attention: Vec<AttentionRecord>,
}

pub fn explain<M: ExplainableModel + ?Sized>(
    model: &M,
    image: &GrayImage,
    map: &LexiconMap,
    epsilon: f64,
    opts: WeightOptions,
) -> Result<Explanation> {
    let a = model.analyze(image, opts)?;
    Ok(explanation_from(&a, map, epsilon))
}

pub fn explanation_from(a: &Analysis, map: &LexiconMap, epsilon: f64) -> Explanation {
    let top = top_k(&a.weights, TOP_K);
    let eps = relative_epsilon(&a.weights, epsilon);
    let selected: Vec<usize> =
        find_top_feature_ids(&a.weights, eps).into_iter().filter(|&j| a.weights[j] > 0.0).collect();
    let mut lexicons: Vec<String> = Vec::new();
    let mut unmatched = Vec::new();
    for &f in &selected {
        match map.m.get(&f) {
            Some(&l) => {
                let name = map.name(l).to_string();
                if !lexicons.contains(&name) {
                    lexicons.push(name);
                }
            }
            None => unmatched.push(f),
        }
    }
    Explanation {
        predicted: a.predicted.name().to_string(),
        probabilities: a.probabilities.clone(),
        roi: a.roi.map(|b| b.as_array()),
        top_features: top.iter().map(|&id| FeatureScore { id, weight: a.weights[id] }).collect(),
        selected,
        lexicons,
        unmatched,
        maps: top.iter().map(|&id| (id, a.activations.channel(id).to_vec())).collect(),
        map_size: (a.activations.height, a.activations.width),
        attention: a.attention.clone(),
    }
}

/// Fraction of explanations listing each feature among their top features,
/// most frequent first.
pub fn feature_frequency(explanations: &[Explanation]) -> Vec<(usize, f64)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in explanations {
        let ids: BTreeSet<usize> = e.top_features.iter().map(|f| f.id).collect();
        for id in ids {
            *counts.entry(id).or_default() += 1;
        }
    }
    let n = explanations.len().max(1) as f64;
    let mut out: Vec<(usize, f64)> = counts.into_iter().map(|(id, c)| (id, c as f64 / n)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}
