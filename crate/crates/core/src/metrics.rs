//! Segmentation scores: Dice (per case and global), class-wise IoU and mIoU,
//! class reduction, and the per-subset cross-evaluation matrix.
//!
//! All scores are ratios of integer pixel counts computed in f64.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{BinaryMask, LabelMap};
use crate::error::{Error, Result};

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimMismatch(format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// Intersection and summed sizes of two foreground sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl DiceCounts {
    pub fn of(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        check_dims((pred.height, pred.width), (truth.height, truth.width))?;
        let mut c = Self::default();
        for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
            c.intersection += u64::from(p && t);
            c.pred += u64::from(p);
            c.truth += u64::from(t);
        }
        Ok(c)
    }

    /// `2|Y∩Z| / (|Y| + |Z|)`; 1 when both sets are empty.
    pub fn score(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

impl std::ops::AddAssign for DiceCounts {
    fn add_assign(&mut self, o: Self) {
        self.intersection += o.intersection;
        self.pred += o.pred;
        self.truth += o.truth;
    }
}

pub fn dsc(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    Ok(DiceCounts::of(pred, truth)?.score())
}

/// Dice over all cases pooled into one volume.
pub fn global_dsc(preds: &[BinaryMask], truths: &[BinaryMask]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: truths.len() });
    }
    let mut total = DiceCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        total += DiceCounts::of(p, t)?;
    }
    Ok(total.score())
}

fn check_labels(pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    check_dims(pred.dims(), truth.dims())?;
    if pred.num_classes() != truth.num_classes() {
        return Err(Error::DimMismatch(format!(
            "{} classes vs {} classes",
            pred.num_classes(),
            truth.num_classes()
        )));
    }
    Ok(())
}

/// IoU of one class; `None` when the class is absent from both maps.
pub fn class_iou(pred: &LabelMap, truth: &LabelMap, class: usize) -> Result<Option<f64>> {
    check_labels(pred, truth)?;
    if class >= pred.num_classes() {
        return Err(Error::ClassOutOfRange { class, num_classes: pred.num_classes() });
    }
    let c = class as u8;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        inter += u64::from(p == c && t == c);
        union += u64::from(p == c || t == c);
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// How classes absent from both prediction and truth enter the mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassPolicy {
    #[default]
    Exclude,
    CountAsZero,
}

fn mean_of(per_class: &[Option<f64>], policy: AbsentClassPolicy) -> f64 {
    let vals: Vec<f64> = match policy {
        AbsentClassPolicy::Exclude => per_class.iter().flatten().copied().collect(),
        AbsentClassPolicy::CountAsZero => per_class.iter().map(|v| v.unwrap_or(0.0)).collect(),
    };
    if vals.is_empty() {
        1.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn miou(pred: &LabelMap, truth: &LabelMap) -> Result<f64> {
    miou_with(pred, truth, AbsentClassPolicy::Exclude)
}

pub fn miou_with(pred: &LabelMap, truth: &LabelMap, policy: AbsentClassPolicy) -> Result<f64> {
    let per_class = (0..pred.num_classes())
        .map(|c| class_iou(pred, truth, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(&per_class, policy))
}

/// Class-wise IoU accumulated over a whole set of maps (the dataset-level
/// convention used for natural-image benchmarks).
pub fn pooled_class_iou(preds: &[LabelMap], truths: &[LabelMap]) -> Result<Vec<Option<f64>>> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: truths.len() });
    }
    let k = preds.first().map_or(0, LabelMap::num_classes);
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    for (p, t) in preds.iter().zip(truths) {
        check_labels(p, t)?;
        if p.num_classes() != k {
            return Err(Error::DimMismatch("maps disagree on class count".into()));
        }
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let (a, b) = (usize::from(a), usize::from(b));
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    Ok(inter.iter().zip(&union).map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64)).collect())
}

pub fn pooled_miou(preds: &[LabelMap], truths: &[LabelMap], policy: AbsentClassPolicy) -> Result<f64> {
    Ok(mean_of(&pooled_class_iou(preds, truths)?, policy))
}

/// Total map from a fine class set onto a coarse one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMapping {
    pub source_classes: usize,
    pub target_classes: usize,
    pub table: Vec<u8>,
}

impl ClassMapping {
    pub fn new(source_classes: usize, target_classes: usize, table: Vec<u8>) -> Result<Self> {
        let m = Self { source_classes, target_classes, table };
        m.validate()?;
        Ok(m)
    }

    pub fn identity(k: usize) -> Self {
        Self { source_classes: k, target_classes: k, table: (0..k).map(|c| c as u8).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.table.len() != self.source_classes {
            return Err(Error::InvalidField {
                field: "class_mapping.table",
                reason: format!("has {} entries for {} source classes", self.table.len(), self.source_classes),
            });
        }
        if !(2..=256).contains(&self.target_classes) {
            return Err(Error::InvalidField {
                field: "class_mapping.target_classes",
                reason: format!("{} not in [2, 256]", self.target_classes),
            });
        }
        if let Some(&bad) = self.table.iter().find(|&&t| usize::from(t) >= self.target_classes) {
            return Err(Error::InvalidField {
                field: "class_mapping.table",
                reason: format!("entry {bad} >= target_classes {}", self.target_classes),
            });
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.source_classes == self.target_classes && self.table.iter().enumerate().all(|(i, &t)| usize::from(t) == i)
    }

    /// `other ∘ self`.
    pub fn then(&self, other: &ClassMapping) -> Result<ClassMapping> {
        if other.source_classes != self.target_classes {
            return Err(Error::DimMismatch("mappings do not compose".into()));
        }
        ClassMapping::new(
            self.source_classes,
            other.target_classes,
            self.table.iter().map(|&t| other.table[usize::from(t)]).collect(),
        )
    }
}

pub fn reduce_classes(label: &LabelMap, mapping: &ClassMapping) -> Result<LabelMap> {
    if label.num_classes() != mapping.source_classes {
        return Err(Error::DimMismatch(format!(
            "label has {} classes, mapping expects {}",
            label.num_classes(),
            mapping.source_classes
        )));
    }
    let data = label.data().iter().map(|&v| mapping.table[usize::from(v)]).collect();
    LabelMap::new(label.height(), label.width(), mapping.target_classes, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Global,
}

/// Named per-item scores and their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: String,
    pub per_item: BTreeMap<String, f64>,
    pub aggregation: Aggregation,
    pub aggregate: f64,
    pub item_count: usize,
}

impl MetricReport {
    /// Per-case Dice and its mean over paired masks.
    pub fn dice(ids: &[String], preds: &[BinaryMask], truths: &[BinaryMask]) -> Result<Self> {
        if preds.len() != truths.len() || ids.len() != preds.len() {
            return Err(Error::LengthMismatch { left: preds.len(), right: truths.len() });
        }
        let mut per_item = BTreeMap::new();
        for ((id, p), t) in ids.iter().zip(preds).zip(truths) {
            per_item.insert(id.clone(), dsc(p, t)?);
        }
        let aggregate = if per_item.is_empty() {
            0.0
        } else {
            per_item.values().sum::<f64>() / per_item.len() as f64
        };
        Ok(Self {
            metric_name: "dsc".into(),
            item_count: per_item.len(),
            per_item,
            aggregation: Aggregation::Mean,
            aggregate,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,metric,value\n");
        for (id, v) in &self.per_item {
            let _ = writeln!(s, "{id},{},{v}", self.metric_name);
        }
        s
    }
}

/// How a set of predictions is scored against truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scorer {
    /// Mean per-case Dice of the foreground (every class other than 0).
    #[default]
    Dice,
    /// Dataset-level mean IoU.
    Miou {
        #[serde(default)]
        policy: AbsentClassPolicy,
    },
    /// Dice of the foreground over all cases pooled together.
    GlobalDice,
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Dice => "dsc",
            Scorer::Miou { .. } => "miou",
            Scorer::GlobalDice => "global_dsc",
        }
    }

    pub fn score(&self, preds: &[LabelMap], truths: &[LabelMap]) -> Result<f64> {
        if preds.len() != truths.len() {
            return Err(Error::LengthMismatch { left: preds.len(), right: truths.len() });
        }
        if preds.is_empty() {
            return Err(Error::InvalidState("nothing to score".into()));
        }
        match self {
            Scorer::Dice => {
                let mut total = 0.0;
                for (p, t) in preds.iter().zip(truths) {
                    check_labels(p, t)?;
                    total += dsc(&p.foreground_mask(), &t.foreground_mask())?;
                }
                Ok(total / preds.len() as f64)
            }
            Scorer::Miou { policy } => pooled_miou(preds, truths, *policy),
            Scorer::GlobalDice => {
                let p: Vec<BinaryMask> = preds.iter().map(LabelMap::foreground_mask).collect();
                let t: Vec<BinaryMask> = truths.iter().map(LabelMap::foreground_mask).collect();
                global_dsc(&p, &t)
            }
        }
    }
}

/// Scores of both subset models on both reference subsets for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalMatrix {
    pub generation: usize,
    /// `entries[model][subset]`: score of subset model `model` on subset `subset`.
    pub entries: Vec<Vec<f64>>,
    /// Score of the cross-assigned labels on all of R.
    pub merged_reference_score: f64,
    pub test_score: f64,
}

impl CrossEvalMatrix {
    pub const CSV_HEADER: &'static str = "generation,M1@R1,M2@R1,M1@R2,M2@R2,merged_R,test";

    /// One row in the column order `M1@R1, M2@R1, M1@R2, M2@R2, merged, test`.
    pub fn csv_row(&self) -> String {
        let e = &self.entries;
        format!(
            "{},{},{},{},{},{},{}",
            self.generation, e[0][0], e[1][0], e[0][1], e[1][1], self.merged_reference_score, self.test_score
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    fn labels(k: usize, data: &[u8]) -> LabelMap {
        LabelMap::new(1, data.len(), k, data.to_vec()).unwrap()
    }

    #[test]
    fn dice_edge_cases() {
        assert_eq!(dsc(&mask(&[1, 1, 0]), &mask(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(dsc(&mask(&[1, 0, 0]), &mask(&[0, 1, 0])).unwrap(), 0.0);
        assert_eq!(dsc(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert_eq!(dsc(&mask(&[0, 0]), &mask(&[1, 0])).unwrap(), 0.0);
        // |Y| = 3, |Z| = 4, |Y∩Z| = 2
        let y = mask(&[1, 1, 1, 0, 0, 0]);
        let z = mask(&[0, 1, 1, 1, 1, 0]);
        assert_eq!(dsc(&y, &z).unwrap(), 4.0 / 7.0);
        assert!(dsc(&mask(&[1]), &mask(&[1, 0])).is_err());
    }

    #[test]
    fn global_dice_pools_cases() {
        let preds = [mask(&[1, 0, 0, 0]), mask(&[1, 1, 1, 0, 0, 0])];
        let truths = [mask(&[1, 0, 0, 0]), mask(&[0, 0, 0, 1, 1, 1])];
        assert_eq!(global_dsc(&preds, &truths).unwrap(), 0.25);
        let mean = (dsc(&preds[0], &truths[0]).unwrap() + dsc(&preds[1], &truths[1]).unwrap()) / 2.0;
        assert_eq!(mean, 0.5);
        assert_eq!(global_dsc(&preds[..1], &truths[..1]).unwrap(), dsc(&preds[0], &truths[0]).unwrap());
        assert!(matches!(global_dsc(&preds, &truths[..1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn iou_cases() {
        let truth = labels(2, &[0, 0, 1, 1]);
        let pred = labels(2, &[0, 0, 0, 0]);
        assert_eq!(class_iou(&pred, &truth, 0).unwrap(), Some(0.5));
        assert_eq!(class_iou(&pred, &truth, 1).unwrap(), Some(0.0));
        assert_eq!(miou(&pred, &truth).unwrap(), 0.25);
        assert_eq!(miou(&truth, &truth).unwrap(), 1.0);
        assert!(matches!(class_iou(&pred, &truth, 2), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn absent_classes_policy() {
        let t = labels(3, &[0, 0, 1, 1]);
        let p = labels(3, &[0, 0, 1, 1]);
        assert_eq!(class_iou(&p, &t, 2).unwrap(), None);
        assert_eq!(miou(&p, &t).unwrap(), 1.0);
        assert!((miou_with(&p, &t, AbsentClassPolicy::CountAsZero).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reduction_by_table() {
        let m = ClassMapping::new(3, 2, vec![0, 0, 1]).unwrap();
        let r = reduce_classes(&labels(3, &[0, 1, 2, 2]), &m).unwrap();
        assert_eq!(r.data(), &[0, 0, 1, 1]);
        assert_eq!(r.num_classes(), 2);
        let l = labels(3, &[2, 1, 0]);
        assert_eq!(reduce_classes(&l, &ClassMapping::identity(3)).unwrap(), l);
        assert!(ClassMapping::new(3, 2, vec![0, 2, 1]).is_err());
        assert!(reduce_classes(&labels(2, &[0]), &m).is_err());
    }

    #[test]
    fn metric_report_csv() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let r = MetricReport::dice(&ids, &[mask(&[1]), mask(&[1])], &[mask(&[1]), mask(&[0])]).unwrap();
        assert_eq!(r.aggregate, 0.5);
        assert_eq!(r.to_csv(), "sample_id,metric,value\na,dsc,1\nb,dsc,0\n");
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(a in proptest::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, _)| crate::seed_path!(seed, i).is_multiple_of(2)).collect();
            let ma = BinaryMask::new(1, a.len(), a.clone()).unwrap();
            let mb = BinaryMask::new(1, b.len(), b).unwrap();
            prop_assert_eq!(dsc(&ma, &mb).unwrap(), dsc(&mb, &ma).unwrap());
        }

        #[test]
        fn reduction_composes(data in proptest::collection::vec(0u8..6, 1..40), t1 in proptest::collection::vec(0u8..4, 6), t2 in proptest::collection::vec(0u8..2, 4)) {
            let l = labels(6, &data);
            let m1 = ClassMapping::new(6, 4, t1).unwrap();
            let m2 = ClassMapping::new(4, 2, t2).unwrap();
            let twice = reduce_classes(&reduce_classes(&l, &m1).unwrap(), &m2).unwrap();
            let once = reduce_classes(&l, &m1.then(&m2).unwrap()).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
