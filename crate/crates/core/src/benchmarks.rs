//! The fixed synthetic benchmarks used for trend checks.

use crate::datasets::{apply_domain_shift, gen_synthetic_task, DatasetBundle, GeneratorSpec, ShiftSpec};
use crate::error::Result;
use crate::learners::ArchSpec;
use crate::metrics::ClassMapping;
use crate::seed_path;

/// Binary task: 6 labeled, 56 reference and 20 test images.
pub fn standard(seed: u64) -> Result<DatasetBundle> {
    gen_synthetic_task(&GeneratorSpec::default(), seed)
}

/// Contrast stretch of the target domain.
pub fn transfer_shift() -> ShiftSpec {
    ShiftSpec { contrast: 1.3, ..ShiftSpec::identity() }
}

/// Source and target task drawn from independent streams of `spec`, the
/// target passed through `shift`.
pub fn transfer_pair(spec: &GeneratorSpec, shift: &ShiftSpec, seed: u64) -> Result<(DatasetBundle, DatasetBundle)> {
    let source = gen_synthetic_task(spec, seed_path!(seed, "source"))?;
    let target = gen_synthetic_task(spec, seed_path!(seed, "target"))?;
    let target = apply_domain_shift(&target, shift, seed_path!(seed, "shift"))?;
    Ok((source, target))
}

/// Many-class task with a coarse grouping and a learner sized for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedClassBenchmark {
    pub generator: GeneratorSpec,
    pub mapping: ClassMapping,
    pub arch: ArchSpec,
}

/// Twelve classes on three channels, classes 3, 7 and 11 rare; the palette
/// orders classes along one axis, so contiguous runs form the coarse groups.
pub fn reduced_class() -> ReducedClassBenchmark {
    let generator = GeneratorSpec {
        channels: 3,
        num_classes: 12,
        rare_classes: vec![3, 7, 11],
        blobs_per_class: (0, 1),
        blob_radius: (2.5, 5.0),
        noise: 0.5,
        gain_jitter: 0.3,
        offset_jitter: 0.5,
        contrast_jitter: 0.3,
        foreground_band: (0.05, 0.8),
        ..GeneratorSpec::default()
    };
    let mapping = ClassMapping::new(12, 4, vec![0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3]).expect("valid grouping");
    let arch = ArchSpec { channels: 3, num_classes: 12, hidden: 16, ..ArchSpec::default() };
    ReducedClassBenchmark { generator, mapping, arch }
}
