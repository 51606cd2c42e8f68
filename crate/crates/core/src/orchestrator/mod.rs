//! Training schedules: continual self-learning, scratch retraining (STSO)
//! and alternate cross-subset training (ATSO), with per-generation
//! evaluation and a pseudo-label provenance ledger.

mod artifacts;
mod reduced;
mod store;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{partition_reference_k, DatasetBundle, Image, LabelMap, PartitionSpec};
use crate::error::{Error, Result};
use crate::learners::{self, ArchSpec, Hyper, Init, InitPolicy, Model, SourceTag, TrainItem, TrainSet};
use crate::metrics::{reduce_classes, ClassMapping, CrossEvalMatrix, Scorer};
use crate::seed_path;

pub use artifacts::{cross_eval_csv, generations_csv, write_run_artifacts};
pub use reduced::{run_reduced_class_protocol, ReducedProtocolReport, ReducedRow, StageTwoInit};
pub use store::{audit_cross_subset, audit_unique_writes, AuditSummary, LedgerEntry, PseudoLabelStore, StoreEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SelfLearning,
    Stso,
    Atso,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::SelfLearning, Mode::Stso, Mode::Atso];

    pub fn tag(self) -> &'static str {
        match self {
            Mode::SelfLearning => "self_learning",
            Mode::Stso => "stso",
            Mode::Atso => "atso",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Mode::SelfLearning => "Self-learning",
            Mode::Stso => "STSO",
            Mode::Atso => "ATSO",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// How much of the head a scratch-mode student redraws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScratchDepth {
    /// Fresh weights and a freshly fitted input normalisation.
    Full,
    /// Keep the teacher's lower layers; redraw the top `n`. Zero means no
    /// reinitialisation at all.
    Layers(usize),
}

/// Whether random streams differ between modes run on the same seed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedDerivation {
    /// Same initial model and per-generation seeds in every mode.
    #[default]
    Shared,
    /// Seeds additionally keyed by the mode.
    ModeTagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub mode: Mode,
    pub generations: usize,
    pub arch: ArchSpec,
    pub hyper: Hyper,
    pub scratch_depth: ScratchDepth,
    pub seed: u64,
    pub seed_derivation: SeedDerivation,
    pub scorer: Scorer,
    /// Train the subset models of a generation in parallel.
    pub concurrent: bool,
    pub num_subsets: usize,
    pub report_global_dsc: bool,
    /// Pseudo labels, losses and scores live in this mapping's coarse space.
    pub loss_mapping: Option<ClassMapping>,
}

impl RunSettings {
    pub fn new(mode: Mode, generations: usize, seed: u64) -> Self {
        Self {
            mode,
            generations,
            arch: ArchSpec::default(),
            hyper: Hyper::default(),
            scratch_depth: ScratchDepth::Full,
            seed,
            seed_derivation: SeedDerivation::Shared,
            scorer: Scorer::Dice,
            concurrent: true,
            num_subsets: 2,
            report_global_dsc: false,
            loss_mapping: None,
        }
    }

    fn base_seed(&self) -> u64 {
        match self.seed_derivation {
            SeedDerivation::Shared => self.seed,
            SeedDerivation::ModeTagged => seed_path!(self.seed, "mode", self.mode.tag()),
        }
    }

    pub fn validate(&self, bundle: &DatasetBundle) -> Result<()> {
        self.hyper.validate()?;
        if self.arch.num_classes != bundle.num_classes() {
            return Err(Error::InvalidField {
                field: "arch.num_classes",
                reason: format!("{} but the data has {} classes", self.arch.num_classes, bundle.num_classes()),
            });
        }
        if let Some(s) = bundle.labeled().first() {
            if s.image.channels() != self.arch.channels {
                return Err(Error::InvalidField {
                    field: "arch.channels",
                    reason: format!("{} but images have {} channels", self.arch.channels, s.image.channels()),
                });
            }
        }
        if let Some(m) = &self.loss_mapping {
            m.validate()?;
            if m.source_classes != bundle.num_classes() {
                return Err(Error::InvalidField {
                    field: "class_mapping.source_classes",
                    reason: format!("{} but the data has {} classes", m.source_classes, bundle.num_classes()),
                });
            }
        }
        if self.mode == Mode::Atso && self.num_subsets < 2 {
            return Err(Error::InvalidField { field: "num_subsets", reason: "needs at least 2".into() });
        }
        Ok(())
    }

    fn mapping(&self) -> Option<&ClassMapping> {
        self.loss_mapping.as_ref()
    }
}

/// Scores of one generation (or of the final merged model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: usize,
    /// `G0`..`GT`, or `final` for the merged model of a cross-subset run.
    pub row: String,
    pub mode: Mode,
    /// Accuracy of the labels this generation assigns to R.
    pub reference: f64,
    /// The same, restricted to each reference subset (cross-subset runs).
    pub subsets: Vec<f64>,
    pub test: f64,
    pub test_global_dsc: Option<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub metric: String,
    pub generations: usize,
    pub rows: Vec<GenerationReport>,
    pub cross_eval: Vec<CrossEvalMatrix>,
    pub final_model: String,
    pub audit: AuditSummary,
}

impl RunReport {
    pub fn row(&self, name: &str) -> Option<&GenerationReport> {
        self.rows.iter().find(|r| r.row == name)
    }

    /// Test score of the model the run hands back.
    pub fn final_test(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test)
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub mode: Mode,
    pub t: usize,
    pub generations: usize,
    pub partition: Option<PartitionSpec>,
    pub registry: BTreeMap<String, Model>,
    pub initial: String,
    /// Live model ids: one for continual/scratch modes, one per subset otherwise.
    pub current: Vec<String>,
    /// Model ids of every generation, in order.
    pub lineage: Vec<Vec<String>>,
    pub store: PseudoLabelStore,
    pub reports: Vec<GenerationReport>,
    pub cross_eval: Vec<CrossEvalMatrix>,
    pub final_model: Option<String>,
}

impl RunState {
    pub fn model(&self, id: &str) -> Result<&Model> {
        self.registry.get(id).ok_or_else(|| Error::MissingModel(id.to_owned()))
    }

    fn register(&mut self, m: Model) -> String {
        let id = m.id.clone();
        self.registry.insert(id.clone(), m);
        id
    }

    /// The model the run hands back: the merge model of a cross-subset run,
    /// otherwise the latest generation.
    pub fn output_model(&self) -> Result<&Model> {
        match &self.final_model {
            Some(id) => self.model(id),
            None => self.model(&self.current[0]),
        }
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub state: RunState,
}

fn labeled_items(bundle: &DatasetBundle) -> Vec<TrainItem> {
    bundle
        .training()
        .labeled()
        .map(|(id, image, label)| TrainItem {
            sample_id: id.to_owned(),
            image: image.clone(),
            label: label.clone(),
            source: SourceTag::GroundTruth,
        })
        .collect()
}

fn pseudo_items<'a>(
    bundle: &DatasetBundle,
    store: &PseudoLabelStore,
    ids: impl IntoIterator<Item = &'a String>,
) -> Result<Vec<TrainItem>> {
    let scope = bundle.training();
    ids.into_iter()
        .map(|id| {
            Ok(TrainItem {
                sample_id: id.clone(),
                image: scope.reference_image(id)?.clone(),
                label: store.label(id)?.clone(),
                source: SourceTag::Pseudo,
            })
        })
        .collect()
}

/// Hard labels from `model`, reduced to the coarse space when a mapping is set.
fn predict_labels(model: &Model, images: &[&Image], mapping: Option<&ClassMapping>) -> Result<Vec<LabelMap>> {
    images
        .par_iter()
        .map(|img| match mapping {
            Some(m) => learners::predict_reduced(model, img, m),
            None => Ok(learners::predict(model, img)?.0),
        })
        .collect()
}

fn label_reference(
    bundle: &DatasetBundle,
    model: &Model,
    ids: &[String],
    mapping: Option<&ClassMapping>,
) -> Result<Vec<LabelMap>> {
    let scope = bundle.training();
    let images = ids.iter().map(|id| scope.reference_image(id)).collect::<Result<Vec<_>>>()?;
    predict_labels(model, &images, mapping)
}

fn train_student(
    bundle: &DatasetBundle,
    settings: &RunSettings,
    store: &PseudoLabelStore,
    ids: &[String],
    init: Init<'_>,
    seed: u64,
    id: String,
) -> Result<Model> {
    let mut items = labeled_items(bundle);
    items.extend(pseudo_items(bundle, store, ids)?);
    let set = TrainSet { items, loss_class_mapping: settings.loss_mapping.clone() };
    Ok(learners::train(&settings.arch, &set, init, &settings.hyper, seed)?.with_id(id))
}

fn all_reference_ids(bundle: &DatasetBundle) -> Vec<String> {
    let mut ids: Vec<String> = bundle.reference_ids().map(str::to_owned).collect();
    ids.sort();
    ids
}

/// Trains M0 on S alone and sets up the run state.
pub fn train_initial(bundle: &DatasetBundle, settings: &RunSettings) -> Result<RunState> {
    settings.validate(bundle)?;
    if bundle.labeled().is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let set = TrainSet { items: labeled_items(bundle), loss_class_mapping: None };
    let m0 = learners::train(&settings.arch, &set, Init::Fresh, &settings.hyper, seed_path!(settings.base_seed(), "initial"))?
        .with_id("M0");
    let partition = match settings.mode {
        Mode::Atso => Some(partition_reference_k(bundle, settings.num_subsets, seed_path!(settings.seed, "partition"))?),
        _ => None,
    };
    let slots = partition.as_ref().map_or(1, PartitionSpec::len);
    let mut state = RunState {
        mode: settings.mode,
        t: 0,
        generations: settings.generations,
        partition,
        registry: BTreeMap::new(),
        initial: "M0".into(),
        current: vec!["M0".into(); slots],
        lineage: vec![vec!["M0".into(); slots]],
        store: PseudoLabelStore::new(),
        reports: Vec::new(),
        cross_eval: Vec::new(),
        final_model: None,
    };
    state.register(m0);
    Ok(state)
}

fn check_step(state: &RunState, mode: Mode) -> Result<()> {
    if state.mode != mode {
        return Err(Error::InvalidState(format!("{} step on a {} run", mode, state.mode)));
    }
    if state.t >= state.generations {
        return Err(Error::InvalidState(format!("all {} generations already ran", state.generations)));
    }
    Ok(())
}

/// Relabels all of R with the current model and trains the next student.
fn single_model_round(state: &mut RunState, bundle: &DatasetBundle, settings: &RunSettings) -> Result<()> {
    let t = state.t;
    let teacher = state.model(&state.current[0])?.clone();
    let ids = all_reference_ids(bundle);
    let labels = label_reference(bundle, &teacher, &ids, settings.mapping())?;
    for (id, label) in ids.iter().zip(labels) {
        state.store.write(id, label, &teacher, t, None);
    }
    let init = match (state.mode, settings.scratch_depth) {
        (Mode::SelfLearning, _) => Init::Continue(&teacher),
        (_, ScratchDepth::Full) => Init::Fresh,
        (_, ScratchDepth::Layers(n)) => Init::Partial { from: &teacher, reinit_layers: n },
    };
    let seed = seed_path!(settings.base_seed(), "student", t + 1);
    let student = train_student(bundle, settings, &state.store, &ids, init, seed, format!("M{}", t + 1))?;
    let id = state.register(student);
    state.current = vec![id.clone()];
    state.lineage.push(vec![id]);
    state.t += 1;
    Ok(())
}

/// One continual round: the student starts from the teacher's weights.
pub fn self_learning_round(state: &mut RunState, bundle: &DatasetBundle, settings: &RunSettings) -> Result<()> {
    check_step(state, Mode::SelfLearning)?;
    single_model_round(state, bundle, settings)
}

/// One scratch round: like [`self_learning_round`] but the student is
/// reinitialised according to `scratch_depth`.
pub fn stso_round(state: &mut RunState, bundle: &DatasetBundle, settings: &RunSettings) -> Result<()> {
    check_step(state, Mode::Stso)?;
    single_model_round(state, bundle, settings)
}

/// Labels for every subset from the model of the next subset (cyclically),
/// so no subset is ever labeled by a model that trained on it.
/// Sample ids of one subset, their new labels and the producing model's id.
type CrossLabels = (Vec<String>, Vec<LabelMap>, String);

fn cross_labels(
    state: &RunState,
    bundle: &DatasetBundle,
    settings: &RunSettings,
) -> Result<Vec<CrossLabels>> {
    let partition = state.partition.as_ref().ok_or_else(|| Error::InvalidState("run has no partition".into()))?;
    let k = partition.len();
    (0..k)
        .map(|i| {
            let producer = state.model(&state.current[(i + 1) % k])?;
            let ids = partition.subset(i).to_vec();
            let labels = label_reference(bundle, producer, &ids, settings.mapping())?;
            Ok((ids, labels, producer.id.clone()))
        })
        .collect()
}

fn write_cross_labels(state: &mut RunState, labels: Vec<(Vec<String>, Vec<LabelMap>, String)>, generation: usize) -> Result<()> {
    for (i, (ids, maps, producer)) in labels.into_iter().enumerate() {
        let producer = state.model(&producer)?.clone();
        for (id, label) in ids.iter().zip(maps) {
            state.store.write(id, label, &producer, generation, Some(i));
        }
    }
    Ok(())
}

/// One cross-subset generation: each subset is relabeled by the other
/// subset's model, then every subset model is retrained from scratch on S
/// plus its own subset.
pub fn atso_generation(state: &mut RunState, bundle: &DatasetBundle, settings: &RunSettings) -> Result<()> {
    check_step(state, Mode::Atso)?;
    let t = state.t;
    let labels = cross_labels(state, bundle, settings)?;
    write_cross_labels(state, labels, t)?;
    let partition = state.partition.clone().expect("checked by cross_labels");
    let base = settings.base_seed();
    let train_one = |i: usize| {
        let seed = seed_path!(base, "student", t + 1, i);
        train_student(bundle, settings, &state.store, partition.subset(i), Init::Fresh, seed, format!("M{}.{}", t + 1, i + 1))
    };
    let students: Vec<Model> = if settings.concurrent {
        (0..partition.len()).into_par_iter().map(train_one).collect::<Result<_>>()?
    } else {
        (0..partition.len()).map(train_one).collect::<Result<_>>()?
    };
    let ids: Vec<String> = students.into_iter().map(|m| state.register(m)).collect();
    state.current = ids.clone();
    state.lineage.push(ids);
    state.t += 1;
    Ok(())
}

/// A fresh model on S plus cross-assigned labels from the current subset
/// models. Nothing is written to the store.
fn merge_model(
    state: &RunState,
    bundle: &DatasetBundle,
    settings: &RunSettings,
    labels: &[(Vec<String>, Vec<LabelMap>, String)],
    id: String,
) -> Result<Model> {
    let mut items = labeled_items(bundle);
    let scope = bundle.training();
    for (ids, maps, _) in labels {
        for (sid, label) in ids.iter().zip(maps) {
            items.push(TrainItem {
                sample_id: sid.clone(),
                image: scope.reference_image(sid)?.clone(),
                label: label.clone(),
                source: SourceTag::Pseudo,
            });
        }
    }
    let set = TrainSet { items, loss_class_mapping: settings.loss_mapping.clone() };
    let seed = seed_path!(settings.base_seed(), "merge", state.t);
    Ok(learners::train(&settings.arch, &set, Init::Fresh, &settings.hyper, seed)?.with_id(id))
}

/// Trains the output model of a cross-subset run on S and every subset's
/// latest cross-assigned labels. With zero generations the store stays
/// empty and the model sees S only.
pub fn final_merge_train(state: &mut RunState, bundle: &DatasetBundle, settings: &RunSettings) -> Result<Model> {
    if state.mode != Mode::Atso {
        return Err(Error::InvalidState("final merge only applies to cross-subset runs".into()));
    }
    if state.t != state.generations {
        return Err(Error::InvalidState(format!("final merge at generation {} of {}", state.t, state.generations)));
    }
    let labels = if state.generations == 0 { Vec::new() } else { cross_labels(state, bundle, settings)? };
    if !labels.is_empty() {
        write_cross_labels(state, labels, state.t)?;
    }
    let stored: Vec<(Vec<String>, Vec<LabelMap>, String)> = vec![(
        state.store.entries().keys().cloned().collect(),
        state.store.entries().values().map(|e| e.label.clone()).collect(),
        String::new(),
    )];
    let model = merge_model(state, bundle, settings, &stored, "final".into())?;
    state.final_model = Some(state.register(model.clone()));
    Ok(model)
}

/// Ground truth and images for evaluation, in the run's label space.
struct EvalData<'a> {
    ref_ids: Vec<String>,
    ref_images: Vec<&'a Image>,
    ref_truth: Vec<LabelMap>,
    test_images: Vec<&'a Image>,
    test_truth: Vec<LabelMap>,
}

impl<'a> EvalData<'a> {
    fn new(bundle: &'a DatasetBundle, mapping: Option<&ClassMapping>) -> Result<Self> {
        let scope = bundle.evaluation();
        let reduce = |l: &LabelMap| match mapping {
            Some(m) => reduce_classes(l, m),
            None => Ok(l.clone()),
        };
        let mut ref_ids = Vec::new();
        let mut ref_images = Vec::new();
        let mut ref_truth = Vec::new();
        let mut refs: Vec<_> = scope.reference_samples().iter().collect();
        refs.sort_by(|a, b| a.id.cmp(&b.id));
        for s in refs {
            ref_truth.push(reduce(scope.reference_truth(&s.id)?)?);
            ref_ids.push(s.id.clone());
            ref_images.push(&s.image);
        }
        let test = scope.test();
        let test_truth = test
            .iter()
            .map(|s| reduce(s.label.as_ref().expect("test samples carry ground truth")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ref_ids, ref_images, ref_truth, test_images: test.iter().map(|s| &s.image).collect(), test_truth })
    }

    fn index(&self, ids: &[String]) -> Vec<usize> {
        ids.iter().map(|id| self.ref_ids.binary_search(id).expect("reference id")).collect()
    }

    fn score_reference(&self, scorer: &Scorer, preds: &[LabelMap], idx: &[usize]) -> Result<f64> {
        let truth: Vec<LabelMap> = idx.iter().map(|&i| self.ref_truth[i].clone()).collect();
        scorer.score(preds, &truth)
    }
}

struct Evaluator<'a> {
    bundle: &'a DatasetBundle,
    settings: &'a RunSettings,
    data: EvalData<'a>,
}

impl Evaluator<'_> {
    fn test_scores(&self, model: &Model) -> Result<(f64, Option<f64>)> {
        let preds = predict_labels(model, &self.data.test_images, self.settings.mapping())?;
        let test = self.settings.scorer.score(&preds, &self.data.test_truth)?;
        let global = if self.settings.report_global_dsc {
            Some(Scorer::GlobalDice.score(&preds, &self.data.test_truth)?)
        } else {
            None
        };
        Ok((test, global))
    }

    fn reference_preds(&self, model: &Model) -> Result<Vec<LabelMap>> {
        predict_labels(model, &self.data.ref_images, self.settings.mapping())
    }

    fn single(&self, state: &RunState, row: String, started: Instant) -> Result<GenerationReport> {
        let model = state.model(&state.current[0])?;
        let all: Vec<usize> = (0..self.data.ref_ids.len()).collect();
        let reference = self.data.score_reference(&self.settings.scorer, &self.reference_preds(model)?, &all)?;
        let (test, test_global_dsc) = self.test_scores(model)?;
        Ok(GenerationReport {
            generation: state.t,
            row,
            mode: state.mode,
            reference,
            subsets: Vec::new(),
            test,
            test_global_dsc,
            wall_time: started.elapsed(),
        })
    }

    /// Cross-evaluation of a subset generation. The test score belongs to a
    /// merge model trained on this generation's cross-assigned labels; at the
    /// last generation that model is the run's final model.
    fn cross(&self, state: &mut RunState, started: Instant) -> Result<GenerationReport> {
        let partition = state.partition.clone().expect("cross-subset run");
        let k = partition.len();
        let scorer = &self.settings.scorer;
        let preds: Vec<Vec<LabelMap>> =
            state.current.iter().map(|id| self.reference_preds(state.model(id)?)).collect::<Result<_>>()?;
        let subset_idx: Vec<Vec<usize>> = (0..k).map(|j| self.data.index(partition.subset(j))).collect();
        let pick = |m: usize, j: usize| -> Vec<LabelMap> { subset_idx[j].iter().map(|&i| preds[m][i].clone()).collect() };
        let mut entries = vec![vec![0.0; k]; k];
        for (m, row) in entries.iter_mut().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = self.data.score_reference(scorer, &pick(m, j), &subset_idx[j])?;
            }
        }
        let mut merged_preds = Vec::new();
        let mut merged_idx = Vec::new();
        let mut subsets = Vec::new();
        for j in 0..k {
            let p = pick((j + 1) % k, j);
            subsets.push(entries[(j + 1) % k][j]);
            merged_preds.extend(p);
            merged_idx.extend(subset_idx[j].iter().copied());
        }
        let reference = self.data.score_reference(scorer, &merged_preds, &merged_idx)?;

        let test_model = if state.t == 0 {
            state.model(&state.initial)?.clone()
        } else if state.t == state.generations {
            final_merge_train(state, self.bundle, self.settings)?
        } else {
            let labels = cross_labels(state, self.bundle, self.settings)?;
            let probe = merge_model(state, self.bundle, self.settings, &labels, format!("merge@G{}", state.t))?;
            state.register(probe.clone());
            probe
        };
        let (test, test_global_dsc) = self.test_scores(&test_model)?;
        state.cross_eval.push(CrossEvalMatrix {
            generation: state.t,
            entries,
            merged_reference_score: reference,
            test_score: test,
        });
        Ok(GenerationReport {
            generation: state.t,
            row: format!("G{}", state.t),
            mode: state.mode,
            reference,
            subsets,
            test,
            test_global_dsc,
            wall_time: started.elapsed(),
        })
    }

    fn generation(&self, state: &mut RunState, started: Instant) -> Result<GenerationReport> {
        match state.mode {
            Mode::Atso => self.cross(state, started),
            _ => self.single(state, format!("G{}", state.t), started),
        }
    }

    fn final_row(&self, state: &RunState) -> Result<GenerationReport> {
        let started = Instant::now();
        let model = state.output_model()?;
        let all: Vec<usize> = (0..self.data.ref_ids.len()).collect();
        let reference = self.data.score_reference(&self.settings.scorer, &self.reference_preds(model)?, &all)?;
        let (test, test_global_dsc) = self.test_scores(model)?;
        Ok(GenerationReport {
            generation: state.t,
            row: "final".into(),
            mode: state.mode,
            reference,
            subsets: Vec::new(),
            test,
            test_global_dsc,
            wall_time: started.elapsed(),
        })
    }
}

/// Runs a full schedule: M0, `generations` rounds of the mode's step, the
/// final merge for cross-subset runs, evaluation of every generation and
/// the ledger audit.
pub fn run(bundle: &DatasetBundle, settings: &RunSettings) -> Result<RunOutcome> {
    settings.validate(bundle)?;
    let evaluator = Evaluator { bundle, settings, data: EvalData::new(bundle, settings.mapping())? };
    let started = Instant::now();
    let mut state = train_initial(bundle, settings)?;
    let g0 = evaluator.generation(&mut state, started)?;
    state.reports.push(g0);
    for t in 0..settings.generations {
        let started = Instant::now();
        let step = match settings.mode {
            Mode::SelfLearning => self_learning_round(&mut state, bundle, settings),
            Mode::Stso => stso_round(&mut state, bundle, settings),
            Mode::Atso => atso_generation(&mut state, bundle, settings),
        };
        step.map_err(|e| e.at_generation(t + 1))?;
        let report = evaluator.generation(&mut state, started).map_err(|e| e.at_generation(t + 1))?;
        log::debug!(
            "{} seed {} G{}: reference {:.4}, test {:.4}",
            settings.mode,
            settings.seed,
            t + 1,
            report.reference,
            report.test
        );
        state.reports.push(report);
    }
    if settings.mode == Mode::Atso {
        if state.final_model.is_none() {
            final_merge_train(&mut state, bundle, settings)?;
        }
        let row = evaluator.final_row(&state)?;
        state.reports.push(row);
    }
    let audit = audit_run(&state, bundle, settings)?;
    if !audit.passed() {
        return Err(Error::InvalidState(format!("ledger audit failed: {}", audit.problems.join("; "))));
    }
    let report = RunReport {
        mode: settings.mode,
        seed: settings.seed,
        metric: settings.scorer.name().into(),
        generations: settings.generations,
        rows: state.reports.clone(),
        cross_eval: state.cross_eval.clone(),
        final_model: state.output_model()?.id.clone(),
        audit,
    };
    Ok(RunOutcome { report, state })
}

/// Runs a schedule with labeled data from `source` and the reference and
/// test sets of `target`. G0 is the direct-transfer baseline.
pub fn run_transfer(source: &DatasetBundle, target: &DatasetBundle, settings: &RunSettings) -> Result<RunOutcome> {
    let bundle = DatasetBundle::for_transfer(source, target)?;
    let settings = RunSettings { report_global_dsc: true, ..settings.clone() };
    run(&bundle, &settings)
}

/// Checks the labeling rules of the run's mode against its ledger.
pub fn audit_run(state: &RunState, bundle: &DatasetBundle, settings: &RunSettings) -> Result<AuditSummary> {
    let ledger = state.store.ledger();
    let mut audit = AuditSummary { ledger_entries: ledger.len(), ..AuditSummary::default() };
    audit_unique_writes(ledger, &mut audit);
    match state.mode {
        Mode::Atso => {
            let partition = state.partition.as_ref().ok_or_else(|| Error::InvalidState("no partition".into()))?;
            audit_cross_subset(ledger, &partition.subsets, &mut audit);
            for ids in state.lineage.iter().skip(1) {
                for id in ids {
                    if state.model(id)?.provenance.init != InitPolicy::Fresh {
                        audit.init_violations += 1;
                        audit.problem(format!("subset model `{id}` was not trained from scratch"));
                    }
                }
            }
            let final_model = state.output_model()?;
            let mut expected: Vec<String> = bundle.training().labeled_ids();
            if state.generations > 0 {
                expected.extend(bundle.reference_ids().map(str::to_owned));
            }
            expected.sort();
            let ok = final_model.provenance.trained_on == expected;
            audit.final_fingerprint_ok = Some(ok);
            if !ok {
                audit.problem("final model was not trained on exactly S and R".into());
            }
        }
        mode => {
            for e in ledger {
                let expected = &state.lineage[e.generation][0];
                if &e.producer != expected {
                    audit.producer_violations += 1;
                    audit.problem(format!("`{}` at G{} labeled by `{}`", e.sample_id, e.generation, e.producer));
                }
            }
            for (g, ids) in state.lineage.iter().enumerate().skip(1) {
                let teacher = state.lineage[g - 1][0].clone();
                let init = &state.model(&ids[0])?.provenance.init;
                let ok = match (mode, settings.scratch_depth) {
                    (Mode::SelfLearning, _) | (_, ScratchDepth::Layers(0)) => {
                        *init == InitPolicy::ContinuedFrom { model_id: teacher }
                    }
                    (_, ScratchDepth::Full) => *init == InitPolicy::Fresh,
                    (_, ScratchDepth::Layers(n)) => {
                        *init == InitPolicy::PartialFrom { model_id: teacher, reinit_layers: n }
                    }
                };
                if !ok {
                    audit.init_violations += 1;
                    audit.problem(format!("student `{}` has initialisation {init:?}", ids[0]));
                }
            }
        }
    }
    audit.training_reference_truth_reads = bundle.access_log().training_reference_truth_reads();
    if audit.training_reference_truth_reads > 0 {
        audit.problem(format!("{} reference truth reads from training code", audit.training_reference_truth_reads));
    }
    Ok(audit)
}
