//! Pseudo-label error statistics, the loss-estimation bound and a stylized
//! simulation of how label bias propagates across generations.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetBundle, LabelMap};
use crate::error::{Error, Result};
use crate::learners::ScoreGrid;
use crate::orchestrator::PseudoLabelStore;
use crate::{seed_path, seeds};

/// Pixel-level disagreement between a pseudo label and the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub sample_id: String,
    pub generation: usize,
    /// `confusion[truth][pseudo]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    /// Per class: (pseudo count - truth count) / pixels.
    pub class_rates: Vec<f64>,
    /// Signed foreground error: (pseudo foreground - truth foreground) / pixels.
    pub bias: f64,
    /// Fraction of pixels whose pseudo label is wrong.
    pub magnitude: f64,
}

impl NoiseRecord {
    pub fn new(sample_id: &str, generation: usize, pseudo: &LabelMap, truth: &LabelMap) -> Result<Self> {
        if pseudo.dims() != truth.dims() || pseudo.num_classes() != truth.num_classes() {
            return Err(Error::DimMismatch(format!("pseudo label and truth of `{sample_id}` differ in shape")));
        }
        let k = truth.num_classes();
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.data().iter().zip(pseudo.data()) {
            confusion[usize::from(t)][usize::from(p)] += 1;
        }
        Ok(Self::from_confusion(sample_id.to_owned(), generation, confusion))
    }

    pub fn from_confusion(sample_id: String, generation: usize, confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let pixels: u64 = confusion.iter().flatten().sum();
        let n = pixels.max(1) as f64;
        let truth_count = |c: usize| confusion[c].iter().sum::<u64>();
        let pseudo_count = |c: usize| confusion.iter().map(|row| row[c]).sum::<u64>();
        let class_rates = (0..k).map(|c| (pseudo_count(c) as f64 - truth_count(c) as f64) / n).collect();
        let truth_fg = pixels - truth_count(0);
        let pseudo_fg = pixels - pseudo_count(0);
        let wrong = pixels - (0..k).map(|c| confusion[c][c]).sum::<u64>();
        Self {
            sample_id,
            generation,
            confusion,
            class_rates,
            bias: (pseudo_fg as f64 - truth_fg as f64) / n,
            magnitude: wrong as f64 / n,
        }
    }

    pub fn pixels(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Pixel-pooled statistics of every record sharing a generation tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationNoise {
    pub generation: usize,
    pub samples: usize,
    pub bias: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelBiasReport {
    pub records: Vec<NoiseRecord>,
    pub per_generation: Vec<GenerationNoise>,
    /// Reference samples with no stored pseudo label.
    pub skipped: usize,
}

/// Pools the confusion counts of `records` into one record per generation.
pub fn aggregate_by_generation(records: &[NoiseRecord]) -> Vec<GenerationNoise> {
    let mut pooled: std::collections::BTreeMap<usize, (usize, Vec<Vec<u64>>)> = Default::default();
    for r in records {
        let (n, acc) = pooled.entry(r.generation).or_insert_with(|| (0, vec![vec![0; r.confusion.len()]; r.confusion.len()]));
        *n += 1;
        for (a, b) in acc.iter_mut().flatten().zip(r.confusion.iter().flatten()) {
            *a += b;
        }
    }
    pooled
        .into_iter()
        .map(|(generation, (samples, confusion))| {
            let r = NoiseRecord::from_confusion(String::new(), generation, confusion);
            GenerationNoise { generation, samples, bias: r.bias, magnitude: r.magnitude }
        })
        .collect()
}

/// Compares every stored pseudo label on R with its ground truth.
pub fn estimate_label_bias(store: &PseudoLabelStore, bundle: &DatasetBundle) -> Result<LabelBiasReport> {
    let eval = bundle.evaluation();
    let mut records = Vec::new();
    let mut skipped = 0;
    for id in bundle.reference_ids() {
        let Some(entry) = store.get(id) else {
            skipped += 1;
            continue;
        };
        records.push(NoiseRecord::new(id, entry.generation, &entry.label, eval.reference_truth(id)?)?);
    }
    if skipped > 0 {
        log::warn!("{skipped} reference samples have no pseudo label");
    }
    let per_generation = aggregate_by_generation(&records);
    Ok(LabelBiasReport { records, per_generation, skipped })
}

/// Both sides of the loss-estimation bound under the L1 norm over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn l1(a: &ScoreGrid, b: &ScoreGrid) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum()
}

/// `lhs = | |y - f| - |y* - f| |`, `rhs = |y - y*|`.
pub fn check_estimation_bound(y: &ScoreGrid, y_star: &ScoreGrid, f_out: &ScoreGrid) -> Result<BoundCheck> {
    let shape = |g: &ScoreGrid| (g.height, g.width, g.num_classes, g.data.len());
    if shape(y) != shape(y_star) || shape(y) != shape(f_out) {
        return Err(Error::DimMismatch(format!(
            "score grids {:?}, {:?}, {:?}",
            shape(y),
            shape(y_star),
            shape(f_out)
        )));
    }
    let lhs = (l1(y, f_out) - l1(y_star, f_out)).abs();
    let rhs = l1(y, y_star);
    Ok(BoundCheck { lhs, rhs, holds: lhs <= rhs + 1e-12 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Continual,
    Scratch,
    CrossSubset,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Continual, Regime::Scratch, Regime::CrossSubset];

    pub fn tag(self) -> &'static str {
        match self {
            Regime::Continual => "continual",
            Regime::Scratch => "scratch",
            Regime::CrossSubset => "cross_subset",
        }
    }
}

/// Stylized bias dynamics. With persistence `p`, attenuation `a`, injection
/// `m + s*xi` and cross transfer `c`, one generation maps the bias `b` to
///
/// - continual: `p*b + m + s*xi`
/// - scratch: `a*p*b + m + s*xi`
/// - cross_subset: `a*p*b_other + c*m + s*xi`, two chains, reported as their mean.
///
/// Attenuation models the smaller share of the inherited error in the loss of
/// a freshly initialized student; cross transfer is the fraction of a
/// teacher's new error that carries over to data it was not trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationSpec {
    pub regime: Regime,
    pub generations: usize,
    pub initial_bias: f64,
    pub injection_mean: f64,
    pub injection_sd: f64,
    pub persistence: f64,
    pub attenuation: f64,
    pub cross_transfer: f64,
    pub trials: usize,
}

impl Default for PropagationSpec {
    fn default() -> Self {
        Self {
            regime: Regime::Continual,
            generations: 5,
            initial_bias: 0.05,
            injection_mean: 0.03,
            injection_sd: 0.01,
            persistence: 0.6,
            attenuation: 0.5,
            cross_transfer: 0.5,
            trials: 500,
        }
    }
}

impl PropagationSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidField { field, reason: format!("{v} is outside [0, 1]") })
            }
        };
        unit("persistence", self.persistence)?;
        unit("attenuation", self.attenuation)?;
        unit("cross_transfer", self.cross_transfer)?;
        if self.trials == 0 {
            return Err(Error::InvalidField { field: "trials", reason: "must be at least 1".into() });
        }
        for (field, v) in [("initial_bias", self.initial_bias), ("injection_mean", self.injection_mean)] {
            if !v.is_finite() {
                return Err(Error::InvalidField { field, reason: format!("{v} is not finite") });
            }
        }
        if !(self.injection_sd.is_finite() && self.injection_sd >= 0.0) {
            return Err(Error::InvalidField { field: "injection_sd", reason: format!("{} is negative", self.injection_sd) });
        }
        Ok(())
    }
}

/// `bias[trial][generation]`, generation 0 included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectories {
    pub regime: Regime,
    pub bias: Vec<Vec<f64>>,
}

impl Trajectories {
    pub const CSV_HEADER: &'static str = "trial,generation,regime,bias";

    /// Rows without the header.
    pub fn csv_rows(&self, out: &mut String) {
        for (trial, traj) in self.bias.iter().enumerate() {
            for (g, b) in traj.iter().enumerate() {
                let _ = writeln!(out, "{trial},{g},{},{b}", self.regime.tag());
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        self.csv_rows(&mut s);
        s
    }

    pub fn final_biases(&self) -> Vec<f64> {
        self.bias.iter().map(|t| *t.last().expect("trajectories include generation 0")).collect()
    }

    pub fn summary(&self) -> BiasSummary {
        BiasSummary::of(self.regime, &self.final_biases())
    }
}

/// Mean final bias with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub regime: Regime,
    pub trials: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl BiasSummary {
    pub fn of(regime: Regime, values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let half = 1.96 * sd / n.sqrt();
        Self { regime, trials: values.len(), mean, sd, ci_low: mean - half, ci_high: mean + half }
    }

    pub fn disjoint_from(&self, other: &BiasSummary) -> bool {
        self.ci_high < other.ci_low || other.ci_high < self.ci_low
    }
}

fn simulate_trial(spec: &PropagationSpec, seed: u64) -> Vec<f64> {
    // One noise stream per chain, shared by every regime.
    let mut rngs = [seeds::rng(seed_path!(seed, "chain", 0u64)), seeds::rng(seed_path!(seed, "chain", 1u64))];
    let mut xi = |chain: usize| -> f64 { rngs[chain].sample(StandardNormal) };
    let (p, a, m, s) = (spec.persistence, spec.attenuation, spec.injection_mean, spec.injection_sd);
    let mut out = Vec::with_capacity(spec.generations + 1);
    match spec.regime {
        Regime::Continual | Regime::Scratch => {
            let keep = if spec.regime == Regime::Continual { p } else { a * p };
            let mut b = spec.initial_bias;
            out.push(b);
            for _ in 0..spec.generations {
                b = keep * b + m + s * xi(0);
                out.push(b);
            }
        }
        Regime::CrossSubset => {
            let mut b = [spec.initial_bias; 2];
            out.push(spec.initial_bias);
            for _ in 0..spec.generations {
                let e = [xi(0), xi(1)];
                b = [a * p * b[1] + spec.cross_transfer * m + s * e[0], a * p * b[0] + spec.cross_transfer * m + s * e[1]];
                out.push(0.5 * (b[0] + b[1]));
            }
        }
    }
    out
}

/// Runs `spec.trials` independent trials; trial `i` draws from
/// `seed_path!(seed, "trial", i)` regardless of regime.
pub fn simulate_error_propagation(spec: &PropagationSpec, seed: u64) -> Result<Trajectories> {
    spec.validate()?;
    let bias = (0..spec.trials).into_par_iter().map(|i| simulate_trial(spec, seed_path!(seed, "trial", i))).collect();
    Ok(Trajectories { regime: spec.regime, bias })
}

/// All three regimes under one spec, with their summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationComparison {
    pub spec: PropagationSpec,
    pub seed: u64,
    pub summaries: Vec<BiasSummary>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectories>,
}

impl PropagationComparison {
    pub fn summary(&self, regime: Regime) -> &BiasSummary {
        self.summaries.iter().find(|s| s.regime == regime).expect("every regime is simulated")
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Trajectories::CSV_HEADER);
        for t in &self.trajectories {
            t.csv_rows(&mut s);
        }
        s
    }
}

pub fn compare_regimes(spec: &PropagationSpec, seed: u64) -> Result<PropagationComparison> {
    let trajectories = Regime::ALL
        .iter()
        .map(|&regime| simulate_error_propagation(&PropagationSpec { regime, ..spec.clone() }, seed))
        .collect::<Result<Vec<_>>>()?;
    let summaries = trajectories.iter().map(Trajectories::summary).collect();
    Ok(PropagationComparison { spec: spec.clone(), seed, summaries, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(data: Vec<u8>, k: usize) -> LabelMap {
        LabelMap::new(1, data.len(), k, data).unwrap()
    }

    #[test]
    fn exact_labels_have_no_error() {
        let t = label(vec![0, 1, 1, 0, 2], 3);
        let r = NoiseRecord::new("a", 1, &t, &t).unwrap();
        assert_eq!((r.bias, r.magnitude), (0.0, 0.0));
        assert!(r.class_rates.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn over_segmentation_gives_positive_bias() {
        // Truth has 3 foreground pixels out of 10; pseudo adds 2 more.
        let t = label(vec![0, 0, 0, 1, 1, 1, 0, 0, 0, 0], 2);
        let p = label(vec![0, 0, 1, 1, 1, 1, 1, 0, 0, 0], 2);
        let r = NoiseRecord::new("a", 0, &p, &t).unwrap();
        assert_eq!(r.bias, 2.0 / 10.0);
        assert_eq!(r.magnitude, 2.0 / 10.0);
        assert_eq!(r.class_rates, vec![-0.2, 0.2]);
    }

    #[test]
    fn pooled_magnitude_is_pixel_error() {
        let t = [label(vec![0, 1, 1, 0], 2), label(vec![1, 1, 0, 0, 0, 0], 2)];
        let p = [label(vec![1, 1, 0, 0], 2), label(vec![1, 0, 0, 0, 0, 1], 2)];
        let recs: Vec<_> = t.iter().zip(&p).map(|(t, p)| NoiseRecord::new("x", 2, p, t).unwrap()).collect();
        let agg = aggregate_by_generation(&recs);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].magnitude, 1.0 - 6.0 / 10.0);
        assert_eq!(agg[0].samples, 2);
    }

    #[test]
    fn bound_is_tight_at_both_ends() {
        let y = ScoreGrid::new(1, 2, 2, vec![0.7, 0.3, 0.1, 0.9]).unwrap();
        let ys = ScoreGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for f in [&ys, &y] {
            let c = check_estimation_bound(&y, &ys, f).unwrap();
            assert!((c.lhs - c.rhs).abs() < 1e-12);
            assert!(c.holds);
        }
        let bad = ScoreGrid::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert!(check_estimation_bound(&y, &ys, &bad).is_err());
    }

    #[test]
    fn zero_noise_keeps_zero_bias() {
        let spec = PropagationSpec { initial_bias: 0.0, injection_mean: 0.0, injection_sd: 0.0, trials: 3, ..Default::default() };
        for regime in Regime::ALL {
            let t = simulate_error_propagation(&PropagationSpec { regime, ..spec.clone() }, 1).unwrap();
            assert!(t.bias.iter().flatten().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn unit_attenuation_makes_scratch_match_continual() {
        let spec = PropagationSpec { attenuation: 1.0, trials: 20, ..Default::default() };
        let c = simulate_error_propagation(&spec, 4).unwrap();
        let s = simulate_error_propagation(&PropagationSpec { regime: Regime::Scratch, ..spec }, 4).unwrap();
        assert_eq!(c.bias, s.bias);
    }

    #[test]
    fn simulation_is_seeded() {
        let spec = PropagationSpec { regime: Regime::CrossSubset, trials: 16, ..Default::default() };
        assert_eq!(simulate_error_propagation(&spec, 9).unwrap(), simulate_error_propagation(&spec, 9).unwrap());
        assert_ne!(simulate_error_propagation(&spec, 9).unwrap(), simulate_error_propagation(&spec, 10).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(PropagationSpec { trials: 0, ..Default::default() }.validate().is_err());
        assert!(PropagationSpec { persistence: 1.5, ..Default::default() }.validate().is_err());
        assert!(PropagationSpec { injection_sd: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn continual_default_levels_off() {
        // The noise-free recursion reaches within 5% of its fixed point by G5.
        let s = PropagationSpec::default();
        let fixed = s.injection_mean / (1.0 - s.persistence);
        let b5 = (0..5).fold(s.initial_bias, |b, _| s.persistence * b + s.injection_mean);
        assert!((b5 - fixed).abs() / fixed < 0.05, "{b5} vs {fixed}");
    }

    proptest! {
        #[test]
        fn magnitude_bounds_bias(pairs in proptest::collection::vec((0u8..3, 0u8..3), 1..64)) {
            let (t, p): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let r = NoiseRecord::new("a", 0, &label(p, 3), &label(t, 3)).unwrap();
            prop_assert!(r.magnitude + 1e-15 >= r.bias.abs());
            prop_assert_eq!(r.pixels(), r.confusion.iter().flatten().sum::<u64>());
        }

        #[test]
        fn bound_holds(v in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 1..40)) {
            let n = v.len();
            let y = ScoreGrid::new(1, n, 1, v.iter().map(|t| t.0).collect()).unwrap();
            let ys = ScoreGrid::new(1, n, 1, v.iter().map(|t| t.1).collect()).unwrap();
            let f = ScoreGrid::new(1, n, 1, v.iter().map(|t| t.2).collect()).unwrap();
            prop_assert!(check_estimation_bound(&y, &ys, &f).unwrap().holds);
        }
    }
}
