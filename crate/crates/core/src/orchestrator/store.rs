//! Pseudo-label store with an append-only provenance ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::LabelMap;
use crate::error::{Error, Result};
use crate::learners::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub label: LabelMap,
    pub producer: String,
    /// Generation of the producing model.
    pub generation: usize,
}

/// One write to the store. Carries enough of the producer's provenance to
/// audit the labeling rules without access to the models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: usize,
    pub sample_id: String,
    /// Reference subset the sample belongs to (cross-subset runs only).
    pub subset: Option<usize>,
    pub generation: usize,
    pub producer: String,
    pub producer_fingerprint: String,
    pub producer_trained_on: Vec<String>,
    pub label_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelStore {
    entries: BTreeMap<String, StoreEntry>,
    ledger: Vec<LedgerEntry>,
}

impl PseudoLabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the current label of `sample_id` and appends a ledger entry.
    pub fn write(
        &mut self,
        sample_id: &str,
        label: LabelMap,
        producer: &Model,
        generation: usize,
        subset: Option<usize>,
    ) {
        self.ledger.push(LedgerEntry {
            seq: self.ledger.len(),
            sample_id: sample_id.to_owned(),
            subset,
            generation,
            producer: producer.id.clone(),
            producer_fingerprint: producer.provenance.fingerprint.clone(),
            producer_trained_on: producer.provenance.trained_on.clone(),
            label_digest: label.digest(),
        });
        self.entries.insert(sample_id.to_owned(), StoreEntry { label, producer: producer.id.clone(), generation });
    }

    pub fn get(&self, sample_id: &str) -> Option<&StoreEntry> {
        self.entries.get(sample_id)
    }

    pub fn label(&self, sample_id: &str) -> Result<&LabelMap> {
        self.entries
            .get(sample_id)
            .map(|e| &e.label)
            .ok_or_else(|| Error::InvalidState(format!("no pseudo label stored for `{sample_id}`")))
    }

    pub fn entries(&self) -> &BTreeMap<String, StoreEntry> {
        &self.entries
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Outcome of the post-run ledger checks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub ledger_entries: usize,
    pub cross_subset_checked: usize,
    pub cross_subset_violations: usize,
    pub producer_violations: usize,
    pub init_violations: usize,
    pub duplicate_writes: usize,
    pub training_reference_truth_reads: usize,
    /// Whether the final model was trained on exactly S plus all of R.
    pub final_fingerprint_ok: Option<bool>,
    pub problems: Vec<String>,
}

impl AuditSummary {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }

    pub(crate) fn problem(&mut self, msg: String) {
        if self.problems.len() < 20 {
            self.problems.push(msg);
        }
    }
}

/// Checks that no ledger entry on subset `i` came from a model that saw subset `i`.
pub fn audit_cross_subset(ledger: &[LedgerEntry], subsets: &[Vec<String>], audit: &mut AuditSummary) {
    for e in ledger {
        let Some(i) = e.subset else {
            audit.problem(format!("ledger entry {} for `{}` has no subset", e.seq, e.sample_id));
            audit.cross_subset_violations += 1;
            continue;
        };
        audit.cross_subset_checked += 1;
        let own = &subsets[i];
        if !own.iter().any(|id| id == &e.sample_id) {
            audit.cross_subset_violations += 1;
            audit.problem(format!("`{}` is not in subset {i}", e.sample_id));
        }
        if let Some(leak) = e.producer_trained_on.iter().find(|id| own.binary_search(id).is_ok()) {
            audit.cross_subset_violations += 1;
            audit.problem(format!(
                "label for `{}` (subset {i}) came from `{}`, which trained on `{leak}`",
                e.sample_id, e.producer
            ));
        }
    }
}

/// Counts samples written more than once with the same generation tag.
pub fn audit_unique_writes(ledger: &[LedgerEntry], audit: &mut AuditSummary) {
    let mut seen = BTreeMap::new();
    for e in ledger {
        *seen.entry((e.generation, e.sample_id.as_str())).or_insert(0usize) += 1;
    }
    for ((g, id), n) in seen {
        if n > 1 {
            audit.duplicate_writes += n - 1;
            audit.problem(format!("`{id}` written {n} times at generation {g}"));
        }
    }
}
