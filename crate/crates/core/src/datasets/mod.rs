//! Synthetic segmentation tasks: image and label containers, the blob
//! generator, domain shifts, reference-set partitioning and file IO.

mod generator;
mod io;
mod shift;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub use generator::{gen_synthetic_task, GeneratorSpec};
pub use io::{
    load_bundle, load_image, load_mask, read_mask, save_bundle, save_image, save_mask, write_mask,
    BundleManifest, ManifestEntry, IMAGE_MAGIC, MASK_MAGIC,
};
pub use shift::{apply_domain_shift, ShiftSpec};

/// Dense real-valued feature grid, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::DimMismatch("image must have at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimMismatch(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidField { field: "image.data", reason: "non-finite value".into() });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.pixels() as f64;
        self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::InvalidField {
                field: "num_classes",
                reason: format!("{num_classes} not in [2, 256]"),
            });
        }
        if data.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "label data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| usize::from(v) >= num_classes) {
            return Err(Error::ClassOutOfRange { class: usize::from(bad), num_classes });
        }
        Ok(Self { height, width, num_classes, data })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn class_mask(&self, class: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    /// Every non-background (class != 0) pixel.
    pub fn foreground_mask(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.data.iter().map(|&v| v != 0).collect(),
        }
    }

    /// Stable content digest, used by the pseudo-label ledger.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.height as u32).to_le_bytes());
        h.update((self.width as u32).to_le_bytes());
        h.update((self.num_classes as u32).to_le_bytes());
        h.update(&self.data);
        h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "mask has {} values, expected {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "S")]
    Labeled,
    #[serde(rename = "R")]
    Reference,
    #[serde(rename = "E")]
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: Option<LabelMap>,
    pub domain: DomainTag,
    /// Pixels covered by an inserted anomaly region (zero when none).
    pub anomaly_pixels: usize,
}

/// A labeled set S, a reference set R whose ground truth is only reachable
/// through [`EvalScope`], and a test set E.
#[derive(Debug)]
pub struct DatasetBundle {
    labeled: Vec<Sample>,
    reference: Vec<Sample>,
    test: Vec<Sample>,
    num_classes: usize,
    gen_spec: Option<GeneratorSpec>,
    seed: Option<u64>,
    shift: Option<ShiftSpec>,
    access: AccessLog,
}

impl Clone for DatasetBundle {
    fn clone(&self) -> Self {
        Self {
            labeled: self.labeled.clone(),
            reference: self.reference.clone(),
            test: self.test.clone(),
            num_classes: self.num_classes,
            gen_spec: self.gen_spec.clone(),
            seed: self.seed,
            shift: self.shift.clone(),
            access: AccessLog::default(),
        }
    }
}

impl PartialEq for DatasetBundle {
    fn eq(&self, other: &Self) -> bool {
        self.labeled == other.labeled
            && self.reference == other.reference
            && self.test == other.test
            && self.num_classes == other.num_classes
    }
}

impl DatasetBundle {
    pub fn new(
        labeled: Vec<Sample>,
        reference: Vec<Sample>,
        test: Vec<Sample>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in labeled.iter().chain(&reference).chain(&test) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidField {
                    field: "sample.id",
                    reason: format!("duplicate sample id `{}`", s.id),
                });
            }
            if let Some(l) = &s.label {
                if l.dims() != (s.image.height(), s.image.width()) {
                    return Err(Error::DimMismatch(format!("label of `{}` does not match its image", s.id)));
                }
                if l.num_classes() != num_classes {
                    return Err(Error::DimMismatch(format!(
                        "label of `{}` has {} classes, bundle has {}",
                        s.id,
                        l.num_classes(),
                        num_classes
                    )));
                }
            }
        }
        for s in labeled.iter().chain(&test) {
            if s.label.is_none() {
                return Err(Error::InvalidField {
                    field: "sample.label",
                    reason: format!("`{}` must carry ground truth", s.id),
                });
            }
        }
        Ok(Self {
            labeled,
            reference,
            test,
            num_classes,
            gen_spec: None,
            seed: None,
            shift: None,
            access: AccessLog::default(),
        })
    }

    pub(crate) fn with_provenance(
        mut self,
        gen_spec: Option<GeneratorSpec>,
        seed: Option<u64>,
        shift: Option<ShiftSpec>,
    ) -> Self {
        self.gen_spec = gen_spec;
        self.seed = seed;
        self.shift = shift;
        self
    }

    /// Labeled source set S with the reference and test sets of `target`,
    /// for transfer experiments.
    pub fn for_transfer(source: &DatasetBundle, target: &DatasetBundle) -> Result<Self> {
        if source.num_classes != target.num_classes {
            return Err(Error::DimMismatch(format!(
                "source has {} classes, target has {}",
                source.num_classes, target.num_classes
            )));
        }
        let b = Self::new(
            source.labeled.clone(),
            target.reference.clone(),
            target.test.clone(),
            source.num_classes,
        )?;
        Ok(b.with_provenance(target.gen_spec.clone(), target.seed, target.shift.clone()))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn gen_spec(&self) -> Option<&GeneratorSpec> {
        self.gen_spec.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn shift(&self) -> Option<&ShiftSpec> {
        self.shift.as_ref()
    }

    pub fn labeled(&self) -> &[Sample] {
        &self.labeled
    }

    pub fn test(&self) -> &[Sample] {
        &self.test
    }

    pub fn reference_len(&self) -> usize {
        self.reference.len()
    }

    pub fn reference_ids(&self) -> impl Iterator<Item = &str> {
        self.reference.iter().map(|s| s.id.as_str())
    }

    pub fn reference_image(&self, id: &str) -> Option<&Image> {
        self.reference.iter().find(|s| s.id == id).map(|s| &s.image)
    }

    pub fn role_of(&self, id: &str) -> Option<Role> {
        if self.labeled.iter().any(|s| s.id == id) {
            Some(Role::Labeled)
        } else if self.reference.iter().any(|s| s.id == id) {
            Some(Role::Reference)
        } else if self.test.iter().any(|s| s.id == id) {
            Some(Role::Test)
        } else {
            None
        }
    }

    /// All samples with their roles, for persistence.
    pub(crate) fn all_samples(&self) -> impl Iterator<Item = (Role, &Sample)> {
        self.labeled
            .iter()
            .map(|s| (Role::Labeled, s))
            .chain(self.reference.iter().map(|s| (Role::Reference, s)))
            .chain(self.test.iter().map(|s| (Role::Test, s)))
    }

    /// Data access for training code. Reference ground truth is not reachable.
    pub fn training(&self) -> TrainScope<'_> {
        TrainScope { bundle: self }
    }

    /// Data access for evaluation code, including reference ground truth.
    pub fn evaluation(&self) -> EvalScope<'_> {
        EvalScope { bundle: self }
    }

    pub fn access_log(&self) -> AccessSummary {
        self.access.summary()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Scope {
    Training,
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Access {
    Image,
    Truth,
}

#[derive(Debug, Default)]
struct AccessLog {
    counts: Mutex<BTreeMap<(Scope, Role, Access), usize>>,
    denied: Mutex<BTreeMap<String, usize>>,
}

impl AccessLog {
    fn record(&self, scope: Scope, role: Role, access: Access) {
        *self.counts.lock().unwrap().entry((scope, role, access)).or_default() += 1;
    }

    fn deny(&self, id: &str) {
        *self.denied.lock().unwrap().entry(id.to_owned()).or_default() += 1;
    }

    fn summary(&self) -> AccessSummary {
        AccessSummary {
            counts: self.counts.lock().unwrap().clone(),
            denied_truth_requests: self.denied.lock().unwrap().values().sum(),
        }
    }
}

/// Snapshot of data requests made against a bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessSummary {
    pub counts: BTreeMap<(Scope, Role, Access), usize>,
    /// Training-scope requests for reference ground truth (always refused).
    pub denied_truth_requests: usize,
}

impl AccessSummary {
    pub fn get(&self, scope: Scope, role: Role, access: Access) -> usize {
        self.counts.get(&(scope, role, access)).copied().unwrap_or(0)
    }

    /// Reference ground-truth reads issued from training code.
    pub fn training_reference_truth_reads(&self) -> usize {
        self.get(Scope::Training, Role::Reference, Access::Truth) + self.denied_truth_requests
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainScope<'a> {
    bundle: &'a DatasetBundle,
}

impl<'a> TrainScope<'a> {
    pub fn labeled(&self) -> impl Iterator<Item = (&'a str, &'a Image, &'a LabelMap)> + 'a {
        let log = &self.bundle.access;
        self.bundle.labeled.iter().map(move |s| {
            log.record(Scope::Training, Role::Labeled, Access::Truth);
            (s.id.as_str(), &s.image, s.label.as_ref().expect("labeled samples carry ground truth"))
        })
    }

    pub fn labeled_ids(&self) -> Vec<String> {
        self.bundle.labeled.iter().map(|s| s.id.clone()).collect()
    }

    pub fn reference_image(&self, id: &str) -> Result<&'a Image> {
        let s = self
            .bundle
            .reference
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownSample(id.to_owned()))?;
        self.bundle.access.record(Scope::Training, Role::Reference, Access::Image);
        Ok(&s.image)
    }

    /// Ground truth for a labeled sample. Requests for any other sample are
    /// refused and logged.
    pub fn truth(&self, id: &str) -> Result<&'a LabelMap> {
        match self.bundle.labeled.iter().find(|s| s.id == id) {
            Some(s) => {
                self.bundle.access.record(Scope::Training, Role::Labeled, Access::Truth);
                Ok(s.label.as_ref().expect("labeled samples carry ground truth"))
            }
            None => {
                self.bundle.access.deny(id);
                Err(Error::InvalidState(format!("ground truth of `{id}` is not visible to training")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalScope<'a> {
    bundle: &'a DatasetBundle,
}

impl<'a> EvalScope<'a> {
    pub fn reference_truth(&self, id: &str) -> Result<&'a LabelMap> {
        let s = self
            .bundle
            .reference
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownSample(id.to_owned()))?;
        self.bundle.access.record(Scope::Evaluation, Role::Reference, Access::Truth);
        s.label
            .as_ref()
            .ok_or_else(|| Error::InvalidState(format!("reference sample `{id}` has no ground truth")))
    }

    pub fn reference_samples(&self) -> &'a [Sample] {
        &self.bundle.reference
    }

    pub fn test(&self) -> &'a [Sample] {
        self.bundle.access.record(Scope::Evaluation, Role::Test, Access::Truth);
        &self.bundle.test
    }
}

/// A fixed split of the reference set into balanced, disjoint subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub subsets: Vec<Vec<String>>,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn subset(&self, i: usize) -> &[String] {
        &self.subsets[i]
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn subset_of(&self, id: &str) -> Option<usize> {
        self.subsets.iter().position(|s| s.iter().any(|x| x == id))
    }
}

/// Two-way balanced random split of R.
pub fn partition_reference(bundle: &DatasetBundle, seed: u64) -> Result<PartitionSpec> {
    partition_reference_k(bundle, 2, seed)
}

pub fn partition_reference_k(bundle: &DatasetBundle, k: usize, seed: u64) -> Result<PartitionSpec> {
    let n = bundle.reference_len();
    if k < 2 {
        return Err(Error::InvalidField { field: "num_subsets", reason: format!("{k} < 2") });
    }
    if n < k {
        return Err(Error::ReferenceTooSmall(n));
    }
    let mut ids: Vec<String> = bundle.reference_ids().map(str::to_owned).collect();
    ids.sort();
    ids.shuffle(&mut seeds::rng(crate::seed_path!(seed, "partition")));
    let mut subsets = vec![Vec::new(); k];
    let base = n / k;
    let extra = n % k;
    let mut it = ids.into_iter();
    for (i, subset) in subsets.iter_mut().enumerate() {
        let size = base + usize::from(i < extra);
        subset.extend(it.by_ref().take(size));
        subset.sort();
    }
    Ok(PartitionSpec { subsets, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn tiny_sample(id: &str, label: Option<u8>) -> Sample {
        Sample {
            id: id.into(),
            image: Image::zeros(2, 2, 1),
            label: label.map(|c| LabelMap::filled(2, 2, 2, c).unwrap()),
            domain: DomainTag::Source,
            anomaly_pixels: 0,
        }
    }

    fn bundle_with_reference(n: usize) -> DatasetBundle {
        let reference = (0..n).map(|i| tiny_sample(&format!("r{i:03}"), Some(1))).collect();
        DatasetBundle::new(vec![tiny_sample("s0", Some(0))], reference, vec![], 2).unwrap()
    }

    #[test]
    fn label_map_rejects_out_of_range_class() {
        let err = LabelMap::new(1, 2, 2, vec![0, 2]).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { class: 2, num_classes: 2 }));
    }

    #[test]
    fn image_rejects_non_finite() {
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = DatasetBundle::new(
            vec![tiny_sample("a", Some(0))],
            vec![tiny_sample("a", Some(1))],
            vec![],
            2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn partition_of_nine_is_five_four() {
        let p = partition_reference(&bundle_with_reference(9), 3).unwrap();
        assert_eq!(p.subset(0).len(), 5);
        assert_eq!(p.subset(1).len(), 4);
    }

    #[test]
    fn partition_is_deterministic() {
        let b = bundle_with_reference(20);
        assert_eq!(partition_reference(&b, 11).unwrap(), partition_reference(&b, 11).unwrap());
        assert_ne!(partition_reference(&b, 11).unwrap(), partition_reference(&b, 12).unwrap());
    }

    #[test]
    fn partition_needs_two_reference_samples() {
        assert!(matches!(
            partition_reference(&bundle_with_reference(1), 0),
            Err(Error::ReferenceTooSmall(1))
        ));
    }

    #[test]
    fn training_scope_refuses_reference_truth() {
        let b = bundle_with_reference(3);
        assert!(b.training().truth("r000").is_err());
        assert!(b.training().truth("s0").is_ok());
        assert_eq!(b.access_log().training_reference_truth_reads(), 1);
        b.evaluation().reference_truth("r001").unwrap();
        assert_eq!(b.access_log().get(Scope::Evaluation, Role::Reference, Access::Truth), 1);
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 2usize..120, seed in any::<u64>()) {
            let b = bundle_with_reference(n);
            let p = partition_reference(&b, seed).unwrap();
            let a: BTreeSet<_> = p.subset(0).iter().cloned().collect();
            let c: BTreeSet<_> = p.subset(1).iter().cloned().collect();
            prop_assert!(a.is_disjoint(&c));
            let union: BTreeSet<_> = a.union(&c).cloned().collect();
            let all: BTreeSet<_> = b.reference_ids().map(str::to_owned).collect();
            prop_assert_eq!(union, all);
            prop_assert!(p.subset(0).len().abs_diff(p.subset(1).len()) <= 1);
        }
    }
}
