//! Staged training through a coarse class space: cross-subset training on
//! reduced pseudo labels, then fine-tuning on full-class pseudo labels.

use serde::{Deserialize, Serialize};

use super::{all_reference_ids, label_reference, labeled_items, pseudo_items, run, Mode, RunReport, RunSettings};
use super::PseudoLabelStore;
use crate::datasets::{DatasetBundle, LabelMap};
use crate::error::{Error, Result};
use crate::learners::{self, Init, Model, TrainSet};
use crate::metrics::{pooled_class_iou, reduce_classes, AbsentClassPolicy, ClassMapping, Scorer};
use crate::seed_path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTwoInit {
    Continued,
    Fresh,
}

/// Class-wise test IoU of one protocol stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedRow {
    pub tag: String,
    pub classes: usize,
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedProtocolReport {
    pub seed: u64,
    pub fine_classes: usize,
    pub coarse_classes: usize,
    pub rows: Vec<ReducedRow>,
    pub runs: Vec<RunReport>,
}

impl ReducedProtocolReport {
    pub fn row(&self, tag: &str) -> Option<&ReducedRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    pub fn tags(fine: usize, coarse: usize) -> [String; 8] {
        [
            format!("STSO_{fine}"),
            format!("ATSO_{fine}"),
            format!("STSO_{coarse}"),
            format!("ATSO_{coarse}"),
            format!("STSO_{coarse}->{fine}@1"),
            format!("ATSO_{coarse}->{fine}@1"),
            format!("ATSO_{coarse}->{fine}"),
            format!("ATSO_{coarse}->{fine}_fresh"),
        ]
    }

    /// The staged protocol's final row.
    pub fn staged(&self) -> Option<&ReducedRow> {
        self.row(&format!("ATSO_{}->{}", self.coarse_classes, self.fine_classes))
    }

    /// Plain full-class cross-subset training.
    pub fn direct(&self) -> Option<&ReducedRow> {
        self.row(&format!("ATSO_{}", self.fine_classes))
    }
}

fn test_row(tag: String, model: &Model, bundle: &DatasetBundle, mapping: Option<&ClassMapping>) -> Result<ReducedRow> {
    let test = bundle.evaluation().test();
    let mut preds = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    for s in test {
        let truth = s.label.as_ref().expect("test samples carry ground truth");
        let (pred, truth): (LabelMap, LabelMap) = match mapping {
            Some(m) => (learners::predict_reduced(model, &s.image, m)?, reduce_classes(truth, m)?),
            None => (learners::predict(model, &s.image)?.0, truth.clone()),
        };
        preds.push(pred);
        truths.push(truth);
    }
    let class_iou = pooled_class_iou(&preds, &truths)?;
    let present: Vec<f64> = class_iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(ReducedRow { tag, classes: class_iou.len(), class_iou, miou })
}

/// Runs scratch and cross-subset training in the full and the coarse class
/// space, then fine-tunes the coarse cross-subset model on its own
/// full-class pseudo labels (continued, plus a fresh-init variant).
///
/// `settings.mode` and `settings.loss_mapping` are ignored; scores are
/// dataset-level class IoU.
pub fn run_reduced_class_protocol(
    bundle: &DatasetBundle,
    mapping: &ClassMapping,
    settings: &RunSettings,
) -> Result<ReducedProtocolReport> {
    mapping.validate()?;
    if mapping.source_classes != bundle.num_classes() {
        return Err(Error::DimMismatch(format!(
            "mapping covers {} classes, data has {}",
            mapping.source_classes,
            bundle.num_classes()
        )));
    }
    let (fine, coarse) = (mapping.source_classes, mapping.target_classes);
    let tags = ReducedProtocolReport::tags(fine, coarse);
    let base = RunSettings {
        scorer: Scorer::Miou { policy: AbsentClassPolicy::Exclude },
        loss_mapping: None,
        ..settings.clone()
    };
    let mut rows = Vec::new();
    let mut runs = Vec::new();

    let mut finals = Vec::new();
    for (mode, reduced) in [(Mode::Stso, false), (Mode::Atso, false), (Mode::Stso, true), (Mode::Atso, true)] {
        let s = RunSettings { mode, loss_mapping: reduced.then(|| mapping.clone()), ..base.clone() };
        let outcome = run(bundle, &s)?;
        let model = outcome.state.output_model()?.clone();
        runs.push(outcome.report);
        finals.push(model);
    }
    rows.push(test_row(tags[0].clone(), &finals[0], bundle, None)?);
    rows.push(test_row(tags[1].clone(), &finals[1], bundle, None)?);
    rows.push(test_row(tags[2].clone(), &finals[2], bundle, Some(mapping))?);
    rows.push(test_row(tags[3].clone(), &finals[3], bundle, Some(mapping))?);
    rows.push(test_row(tags[4].clone(), &finals[2], bundle, None)?);
    rows.push(test_row(tags[5].clone(), &finals[3], bundle, None)?);

    // Stage two: full-class labels from the coarse cross-subset model.
    let teacher = &finals[3];
    let ids = all_reference_ids(bundle);
    let labels = label_reference(bundle, teacher, &ids, None)?;
    let mut store = PseudoLabelStore::new();
    for (id, label) in ids.iter().zip(labels) {
        store.write(id, label, teacher, settings.generations + 1, None);
    }
    let mut items = labeled_items(bundle);
    items.extend(pseudo_items(bundle, &store, &ids)?);
    let set = TrainSet { items, loss_class_mapping: None };
    let seed = seed_path!(settings.seed, "stage2");
    for (tag, init) in [(&tags[6], StageTwoInit::Continued), (&tags[7], StageTwoInit::Fresh)] {
        let init = match init {
            StageTwoInit::Continued => Init::Continue(teacher),
            StageTwoInit::Fresh => Init::Fresh,
        };
        let model = learners::train(&base.arch, &set, init, &base.hyper, seed)?.with_id(tag.clone());
        rows.push(test_row(tag.clone(), &model, bundle, None)?);
    }
    Ok(ReducedProtocolReport { seed: settings.seed, fine_classes: fine, coarse_classes: coarse, rows, runs })
}
