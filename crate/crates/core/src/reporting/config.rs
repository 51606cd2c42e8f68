//! Experiment configuration: one JSON document, validated before any compute.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::Layout;
use crate::benchmarks;
use crate::datasets::{apply_domain_shift, gen_synthetic_task, load_bundle, DatasetBundle, GeneratorSpec, ShiftSpec};
use crate::error::{Error, Result};
use crate::learners::{ArchSpec, Hyper};
use crate::metrics::{ClassMapping, Scorer};
use crate::orchestrator::{Mode, RunSettings, ScratchDepth, SeedDerivation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub num_seeds: usize,
    pub base_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { num_seeds: 1, base_seed: 0 }
    }
}

impl SweepConfig {
    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        let base = self.base_seed;
        (0..self.num_seeds as u64).map(move |i| base + i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Layouts written next to the bundle after a sweep.
    pub layouts: Vec<Layout>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { layouts: vec![Layout::Table1, Layout::Csv, Layout::Json] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mode of single runs (`run`, `transfer`).
    pub mode: Mode,
    /// Modes covered by a sweep.
    pub modes: Vec<Mode>,
    #[serde(alias = "T")]
    pub generations: usize,
    /// Seed of single runs.
    pub seed: u64,
    pub generator: GeneratorSpec,
    /// Saved dataset to use instead of generating one.
    pub manifest: Option<PathBuf>,
    /// Target-domain shift; required by transfer runs.
    pub shift: Option<ShiftSpec>,
    pub arch: ArchSpec,
    pub hyper: Hyper,
    pub scratch_depth: ScratchDepth,
    pub seed_derivation: SeedDerivation,
    pub scorer: Scorer,
    pub concurrent: bool,
    pub num_subsets: usize,
    /// JSON class mapping for the reduced-class protocol.
    pub class_mapping: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
    pub report: ReportOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = RunSettings::new(Mode::Atso, 3, 0);
        Self {
            mode: Mode::Atso,
            modes: Mode::ALL.to_vec(),
            generations: s.generations,
            seed: 0,
            generator: GeneratorSpec::default(),
            manifest: None,
            shift: None,
            arch: s.arch,
            hyper: s.hyper,
            scratch_depth: s.scratch_depth,
            seed_derivation: s.seed_derivation,
            scorer: s.scorer,
            concurrent: s.concurrent,
            num_subsets: s.num_subsets,
            class_mapping: None,
            output_dir: PathBuf::from("out"),
            sweep: SweepConfig::default(),
            report: ReportOptions::default(),
        }
    }
}

fn config_err(path: &str, reason: impl ToString) -> Error {
    Error::Config { path: path.to_owned(), reason: reason.to_string() }
}

/// Reads and validates a config file. Relative paths inside it resolve
/// against the file's directory.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.manifest, &mut cfg.class_mapping].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    if cfg.output_dir.is_relative() {
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(if path == "." { "<root>" } else { &path }, e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweep.num_seeds == 0 {
            return Err(config_err("sweep.num_seeds", "must be at least 1"));
        }
        if self.modes.is_empty() {
            return Err(config_err("modes", "must name at least one mode"));
        }
        if self.manifest.is_none() {
            self.generator.validate().map_err(|e| config_err("generator", e))?;
        }
        if let Some(s) = &self.shift {
            s.validate().map_err(|e| config_err("shift", e))?;
        }
        self.hyper.validate()?;
        if self.num_subsets < 2 {
            return Err(config_err("num_subsets", "must be at least 2"));
        }
        if self.arch.num_classes < 2 {
            return Err(config_err("arch.num_classes", "must be at least 2"));
        }
        if self.manifest.is_none() {
            if self.arch.num_classes != self.generator.num_classes {
                return Err(config_err(
                    "arch.num_classes",
                    format!("{} but generator.num_classes is {}", self.arch.num_classes, self.generator.num_classes),
                ));
            }
            if self.arch.channels != self.generator.channels {
                return Err(config_err(
                    "arch.channels",
                    format!("{} but generator.channels is {}", self.arch.channels, self.generator.channels),
                ));
            }
        }
        Ok(())
    }

    pub fn settings(&self, mode: Mode, seed: u64) -> RunSettings {
        RunSettings {
            arch: self.arch.clone(),
            hyper: self.hyper.clone(),
            scratch_depth: self.scratch_depth,
            seed_derivation: self.seed_derivation,
            scorer: self.scorer,
            concurrent: self.concurrent,
            num_subsets: self.num_subsets,
            ..RunSettings::new(mode, self.generations, seed)
        }
    }

    /// The task for `seed`: the saved dataset, or a generated one.
    pub fn dataset(&self, seed: u64) -> Result<DatasetBundle> {
        match &self.manifest {
            Some(m) => load_bundle(m),
            None => gen_synthetic_task(&self.generator, seed),
        }
    }

    /// Labeled source and shifted target for `seed`.
    pub fn transfer_pair(&self, seed: u64) -> Result<(DatasetBundle, DatasetBundle)> {
        let shift = self.shift.clone().ok_or_else(|| config_err("shift", "transfer runs need a shift"))?;
        match &self.manifest {
            Some(m) => {
                let source = load_bundle(m)?;
                let target = apply_domain_shift(&source, &shift, seed)?;
                Ok((source, target))
            }
            None => benchmarks::transfer_pair(&self.generator, &shift, seed),
        }
    }

    pub fn class_mapping(&self) -> Result<ClassMapping> {
        let path = self.class_mapping.as_ref().ok_or_else(|| config_err("class_mapping", "required by the reduced protocol"))?;
        let text = fs::read_to_string(path).map_err(|e| config_err("class_mapping", format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let m: ClassMapping = serde_path_to_error::deserialize(de)
            .map_err(|e| config_err(&format!("class_mapping.{}", e.path()), e.into_inner()))?;
        m.validate().map_err(|e| config_err("class_mapping", e))?;
        Ok(m)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse_config_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.generations, 3);
    }

    #[test]
    fn zero_generation_cross_subset_is_valid() {
        let c = parse_config_str(r#"{"mode": "atso", "T": 0}"#).unwrap();
        assert_eq!((c.mode, c.generations), (Mode::Atso, 0));
    }

    #[test]
    fn errors_name_the_field() {
        let path = |text: &str| match parse_config_str(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("{other:?}"),
        };
        assert_eq!(path(r#"{"sweep": {"num_seeds": -3}}"#), "sweep.num_seeds");
        assert_eq!(path(r#"{"sweep": {"num_seeds": 0}}"#), "sweep.num_seeds");
        assert_eq!(path(r#"{"mode": "sideways"}"#), "mode");
        assert_eq!(path(r#"{"hyper": {"epochs": 2, "bogus": 1}}"#), "hyper.bogus");
        assert_eq!(path(r#"{"surprise": true}"#), "surprise");
        assert_eq!(path(r#"{"shift": {"contrast": 99.0}}"#), "shift");
        assert_eq!(path(r#"{"arch": {"num_classes": 3}}"#), "arch.num_classes");
    }

    #[test]
    fn hyper_range_errors_name_the_field() {
        match parse_config_str(r#"{"hyper": {"learning_rate": -1.0}}"#) {
            Err(Error::InvalidField { field, .. }) => assert_eq!(field, "hyper.learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
