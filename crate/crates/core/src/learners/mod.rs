//! The desk-scale learner: a fixed per-pixel feature map feeding a small
//! softmax head trained by mini-batch SGD, plus multi-view fusion.

mod features;
pub mod head;
mod io;
mod views;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::metrics::ClassMapping;
use crate::seed_path;
use crate::seeds;

pub use features::FeatureSpec;
pub use head::{HeadShape, Target};
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use views::ViewSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub channels: usize,
    pub num_classes: usize,
    /// Hidden tanh units; 0 gives a linear softmax head.
    pub hidden: usize,
    pub features: FeatureSpec,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self { channels: 1, num_classes: 2, hidden: 2, features: FeatureSpec::default() }
    }
}

impl ArchSpec {
    pub fn head_shape(&self) -> HeadShape {
        HeadShape { input: self.features.dim(self.channels), hidden: self.hidden, classes: self.num_classes }
    }

    pub fn layers(&self) -> usize {
        self.head_shape().layers()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { epochs: 12, batch_size: 64, learning_rate: 0.05, lr_decay: 0.85, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(Error::InvalidField { field, reason: reason.into() });
        if self.batch_size == 0 {
            return bad("hyper.batch_size", "must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("hyper.learning_rate", "must be positive and finite");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("hyper.lr_decay", "must lie in (0, 1]");
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad("hyper.momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("hyper.weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicy {
    Fresh,
    ContinuedFrom { model_id: String },
    /// Teacher weights with the top `reinit_layers` layers redrawn.
    PartialFrom { model_id: String, reinit_layers: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub init: InitPolicy,
    /// Sorted ids of every sample the model was trained on.
    pub trained_on: Vec<String>,
    /// Digest over `(id, label digest)` pairs of the training set.
    pub fingerprint: String,
    pub epochs: usize,
    pub ground_truth_items: usize,
    pub pseudo_items: usize,
}

/// Per-feature affine normalisation fitted on a model's first training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub id: String,
    pub arch: ArchSpec,
    pub input_norm: InputNorm,
    weights: Vec<f64>,
    pub provenance: Provenance,
}

impl Model {
    /// Assembles a model from parts, e.g. hand-built weights.
    pub fn from_parts(
        id: impl Into<String>,
        arch: ArchSpec,
        input_norm: InputNorm,
        weights: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let shape = arch.head_shape();
        if weights.len() != shape.num_params() {
            return Err(Error::DimMismatch(format!(
                "{} weights for a head with {} parameters",
                weights.len(),
                shape.num_params()
            )));
        }
        if input_norm.mean.len() != shape.input || input_norm.scale.len() != shape.input {
            return Err(Error::DimMismatch("input normalisation does not match feature count".into()));
        }
        if weights.iter().chain(&input_norm.mean).chain(&input_norm.scale).any(|v| !v.is_finite()) {
            return Err(Error::InvalidField { field: "weights", reason: "non-finite value".into() });
        }
        Ok(Self { id: id.into(), arch, input_norm, weights, provenance })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    fn normalised_features(&self, image: &Image) -> Vec<f64> {
        let mut x = self.arch.features.extract(image);
        normalise(&mut x, &self.input_norm);
        x
    }
}

fn normalise(x: &mut [f64], norm: &InputNorm) {
    let f = norm.mean.len();
    for row in x.chunks_exact_mut(f) {
        for ((v, m), s) in row.iter_mut().zip(&norm.mean).zip(&norm.scale) {
            *v = (*v - m) * s;
        }
    }
}

fn fit_norm(x: &[f64], f: usize) -> InputNorm {
    let n = (x.len() / f).max(1) as f64;
    let mut mean = vec![0.0; f];
    for row in x.chunks_exact(f) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; f];
    for row in x.chunks_exact(f) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var.iter().map(|s| 1.0 / (s / n).sqrt().max(1e-6)).collect();
    InputNorm { mean, scale }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub sample_id: String,
    pub image: Image,
    pub label: LabelMap,
    pub source: SourceTag,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSet {
    pub items: Vec<TrainItem>,
    /// Items whose labels live in this mapping's coarse class space are
    /// supervised through it; full-class items use the plain loss.
    pub loss_class_mapping: Option<ClassMapping>,
}

impl TrainSet {
    pub fn sorted_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.items.iter().map(|i| i.sample_id.clone()).collect();
        ids.sort();
        ids
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut pairs: Vec<(&str, String)> =
            self.items.iter().map(|i| (i.sample_id.as_str(), i.label.digest())).collect();
        pairs.sort();
        let mut h = Sha256::new();
        for (id, d) in pairs {
            h.update(id.as_bytes());
            h.update([0]);
            h.update(d.as_bytes());
            h.update([0]);
        }
        h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
    }
}

/// How a student's weights start.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    Fresh,
    Continue(&'a Model),
    Partial { from: &'a Model, reinit_layers: usize },
}

/// Trains a model. The result is a pure function of the arguments.
pub fn train(arch: &ArchSpec, set: &TrainSet, init: Init<'_>, hyper: &Hyper, seed: u64) -> Result<Model> {
    hyper.validate()?;
    if set.items.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let shape = arch.head_shape();
    let f = shape.input;
    if let Some(m) = &set.loss_class_mapping {
        m.validate()?;
        if m.source_classes != arch.num_classes {
            return Err(Error::DimMismatch(format!(
                "loss mapping is defined on {} classes, model predicts {}",
                m.source_classes, arch.num_classes
            )));
        }
    }

    let mut inputs = Vec::new();
    let mut targets: Vec<Target<'_>> = Vec::new();
    for item in &set.items {
        if item.image.channels() != arch.channels {
            return Err(Error::DimMismatch(format!(
                "`{}` has {} channels, model expects {}",
                item.sample_id,
                item.image.channels(),
                arch.channels
            )));
        }
        if item.label.dims() != (item.image.height(), item.image.width()) {
            return Err(Error::DimMismatch(format!("label of `{}` does not match its image", item.sample_id)));
        }
        let reduced = match &set.loss_class_mapping {
            Some(m) if item.label.num_classes() == m.target_classes => Some(m),
            _ if item.label.num_classes() == arch.num_classes => None,
            _ => {
                return Err(Error::DimMismatch(format!(
                    "label of `{}` has {} classes, model predicts {}",
                    item.sample_id,
                    item.label.num_classes(),
                    arch.num_classes
                )))
            }
        };
        inputs.extend(arch.features.extract(&item.image));
        targets.extend(item.label.data().iter().map(|&class| Target { class, reduced }));
    }

    let (mut weights, input_norm, policy) = match init {
        Init::Fresh => {
            let norm = fit_norm(&inputs, f);
            let w = shape.init(&mut seeds::rng(seed_path!(seed, "init")));
            (w, norm, InitPolicy::Fresh)
        }
        Init::Continue(teacher) => {
            check_compatible(arch, teacher)?;
            (
                teacher.weights.clone(),
                teacher.input_norm.clone(),
                InitPolicy::ContinuedFrom { model_id: teacher.id.clone() },
            )
        }
        Init::Partial { from, reinit_layers } => {
            check_compatible(arch, from)?;
            let mut w = from.weights.clone();
            shape.reinit_top(&mut w, reinit_layers, &mut seeds::rng(seed_path!(seed, "init")));
            let policy = if reinit_layers == 0 {
                InitPolicy::ContinuedFrom { model_id: from.id.clone() }
            } else {
                InitPolicy::PartialFrom { model_id: from.id.clone(), reinit_layers }
            };
            (w, from.input_norm.clone(), policy)
        }
    };
    normalise(&mut inputs, &input_norm);

    let n = targets.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = vec![0.0; weights.len()];
    let mut grad = vec![0.0; weights.len()];
    let mut ws = head::Workspace::new(&shape);
    let mut lr = hyper.learning_rate;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut seeds::rng(seed_path!(seed, "epoch", epoch)));
        for (b, batch) in order.chunks(hyper.batch_size).enumerate() {
            grad.fill(0.0);
            let mut loss = 0.0;
            for &i in batch {
                loss += head::accumulate(&shape, &weights, &inputs[i * f..(i + 1) * f], targets[i], &mut ws, &mut grad);
            }
            let m = batch.len() as f64;
            loss /= m;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {b} (lr {lr:.3e}, batch size {})",
                    batch.len()
                )));
            }
            for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let step = g / m + hyper.weight_decay * *w;
                *v = hyper.momentum * *v - lr * step;
                *w += *v;
            }
        }
        lr *= hyper.lr_decay;
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Training("weights diverged to non-finite values".into()));
    }

    let trained_on = set.sorted_ids();
    let fingerprint = set.fingerprint();
    let ground_truth_items = set.items.iter().filter(|i| i.source == SourceTag::GroundTruth).count();
    let provenance = Provenance {
        seed,
        init: policy,
        trained_on,
        fingerprint: fingerprint.clone(),
        epochs: hyper.epochs,
        ground_truth_items,
        pseudo_items: set.items.len() - ground_truth_items,
    };
    Ok(Model { id: format!("model-{}-{seed:016x}", &fingerprint[..8]), arch: arch.clone(), input_norm, weights, provenance })
}

fn check_compatible(arch: &ArchSpec, teacher: &Model) -> Result<()> {
    if &teacher.arch != arch {
        return Err(Error::DimMismatch(format!("teacher `{}` has a different architecture", teacher.id)));
    }
    Ok(())
}

/// Per-pixel class probabilities, row-major with classes innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl ScoreGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * num_classes {
            return Err(Error::DimMismatch("score grid size".into()));
        }
        Ok(Self { height, width, num_classes, data })
    }

    /// One-hot scores of a label map.
    pub fn one_hot(label: &LabelMap) -> Self {
        let k = label.num_classes();
        let mut data = vec![0.0; label.data().len() * k];
        for (p, &c) in label.data().iter().enumerate() {
            data[p * k + usize::from(c)] = 1.0;
        }
        Self { height: label.height(), width: label.width(), num_classes: k, data }
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.num_classes..(p + 1) * self.num_classes]
    }

    /// Highest-scoring class per pixel; ties go to the lowest index.
    pub fn argmax(&self) -> LabelMap {
        let data = self
            .data
            .chunks_exact(self.num_classes)
            .map(|s| {
                let mut best = 0;
                for (k, v) in s.iter().enumerate() {
                    if *v > s[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.height, self.width, self.num_classes, data).expect("argmax is in range")
    }

    /// Sums probabilities within each coarse class.
    pub fn reduce(&self, mapping: &ClassMapping) -> Result<ScoreGrid> {
        if mapping.source_classes != self.num_classes {
            return Err(Error::DimMismatch("mapping does not match score classes".into()));
        }
        let k = mapping.target_classes;
        let mut data = vec![0.0; self.height * self.width * k];
        for (p, s) in self.data.chunks_exact(self.num_classes).enumerate() {
            for (c, v) in s.iter().enumerate() {
                data[p * k + usize::from(mapping.table[c])] += v;
            }
        }
        ScoreGrid::new(self.height, self.width, k, data)
    }
}

pub fn predict(model: &Model, image: &Image) -> Result<(LabelMap, ScoreGrid)> {
    if image.channels() != model.arch.channels {
        return Err(Error::DimMismatch(format!(
            "image has {} channels, model `{}` expects {}",
            image.channels(),
            model.id,
            model.arch.channels
        )));
    }
    let shape = model.arch.head_shape();
    let x = model.normalised_features(image);
    let mut ws = head::Workspace::new(&shape);
    let k = shape.classes;
    let mut data = vec![0.0; image.pixels() * k];
    for (row, out) in x.chunks_exact(shape.input).zip(data.chunks_exact_mut(k)) {
        head::forward(&shape, &model.weights, row, &mut ws, out);
    }
    let scores = ScoreGrid::new(image.height(), image.width(), k, data)?;
    Ok((scores.argmax(), scores))
}

/// Prediction in a coarse class space: fine probabilities are summed per group.
pub fn predict_reduced(model: &Model, image: &Image, mapping: &ClassMapping) -> Result<LabelMap> {
    let (_, scores) = predict(model, image)?;
    Ok(scores.reduce(mapping)?.argmax())
}

/// Per-pixel modal class; ties go to the lowest class index.
pub fn fuse_majority(predictions: &[LabelMap]) -> Result<LabelMap> {
    let first = predictions.first().ok_or_else(|| Error::DimMismatch("no predictions to fuse".into()))?;
    for p in predictions {
        if p.dims() != first.dims() || p.num_classes() != first.num_classes() {
            return Err(Error::DimMismatch("predictions disagree on shape or class count".into()));
        }
    }
    let k = first.num_classes();
    let mut votes = vec![0usize; k];
    let data = (0..first.data().len())
        .map(|i| {
            votes.fill(0);
            for p in predictions {
                votes[usize::from(p.data()[i])] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(first.height(), first.width(), k, data)
}

/// Predicts through every view (transform, predict, invert) and fuses by majority vote.
pub fn predict_multiview(models: &BTreeMap<ViewSpec, Model>, views: &[ViewSpec], image: &Image) -> Result<LabelMap> {
    let preds = view_predictions(models, views, image)?;
    fuse_majority(&preds)
}

/// The per-view predictions, already mapped back to the original grid.
pub fn view_predictions(
    models: &BTreeMap<ViewSpec, Model>,
    views: &[ViewSpec],
    image: &Image,
) -> Result<Vec<LabelMap>> {
    views
        .iter()
        .map(|v| {
            let model = models.get(v).ok_or_else(|| Error::MissingModel(format!("no model for view `{}`", v.id())))?;
            let (label, _) = predict(model, &v.apply_image(image))?;
            Ok(v.invert_label(&label))
        })
        .collect()
}

/// Trains one fresh model per view on transformed copies of the training set.
pub fn train_multiview(
    arch: &ArchSpec,
    set: &TrainSet,
    views: &[ViewSpec],
    hyper: &Hyper,
    seed: u64,
) -> Result<BTreeMap<ViewSpec, Model>> {
    views
        .iter()
        .map(|v| {
            let view_set = TrainSet {
                items: set
                    .items
                    .iter()
                    .map(|i| TrainItem {
                        sample_id: i.sample_id.clone(),
                        image: v.apply_image(&i.image),
                        label: v.apply_label(&i.label),
                        source: i.source,
                    })
                    .collect(),
                loss_class_mapping: set.loss_class_mapping.clone(),
            };
            let m = train(arch, &view_set, Init::Fresh, hyper, seed_path!(seed, "view", v.id()))?;
            Ok((*v, m.with_id(format!("view-{}", v.id()))))
        })
        .collect()
}

#[cfg(test)]
mod tests;
