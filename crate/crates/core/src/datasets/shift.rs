use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gen_synthetic_task, DatasetBundle, DomainTag, Sample};
use crate::error::{Error, Result};
use crate::seed_path;
use crate::seeds;

/// Parametric warp from a source domain to a target domain.
///
/// Applied per image and channel: `v' = scale * (m + contrast * (v - m)) + offset`
/// where `m` is the channel mean, followed by optional anomaly insertion.
/// A `shape_drift` other than 1 regenerates the task with blob radii scaled
/// by that factor before the warp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// In (0, 10].
    pub intensity_scale: f64,
    /// In [-10, 10].
    pub intensity_offset: f64,
    /// In (0, 5].
    pub contrast: f64,
    /// In [0.25, 4].
    pub shape_drift: f64,
    /// In [0, 1].
    pub anomaly_rate: f64,
    /// Additive anomaly appearance, in [-10, 10].
    pub anomaly_strength: f64,
    /// Anomaly disc radius in pixels, in (0, 64].
    pub anomaly_radius: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            intensity_scale: 1.0,
            intensity_offset: 0.0,
            contrast: 1.0,
            shape_drift: 1.0,
            anomaly_rate: 0.0,
            anomaly_strength: 1.0,
            anomaly_radius: 2.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, ok: bool| {
            if v.is_finite() && ok {
                Ok(())
            } else {
                Err(Error::InvalidShift(format!("{name} = {v} is outside its documented range")))
            }
        };
        check("intensity_scale", self.intensity_scale, self.intensity_scale > 0.0 && self.intensity_scale <= 10.0)?;
        check("intensity_offset", self.intensity_offset, self.intensity_offset.abs() <= 10.0)?;
        check("contrast", self.contrast, self.contrast > 0.0 && self.contrast <= 5.0)?;
        check("shape_drift", self.shape_drift, (0.25..=4.0).contains(&self.shape_drift))?;
        check("anomaly_rate", self.anomaly_rate, (0.0..=1.0).contains(&self.anomaly_rate))?;
        check("anomaly_strength", self.anomaly_strength, self.anomaly_strength.abs() <= 10.0)?;
        check("anomaly_radius", self.anomaly_radius, self.anomaly_radius > 0.0 && self.anomaly_radius <= 64.0)?;
        Ok(())
    }
}

pub fn apply_domain_shift(bundle: &DatasetBundle, shift: &ShiftSpec, seed: u64) -> Result<DatasetBundle> {
    shift.validate()?;
    let base = if shift.shape_drift != 1.0 {
        let (spec, gen_seed) = match (bundle.gen_spec(), bundle.seed()) {
            (Some(s), Some(seed)) => (s, seed),
            _ => {
                return Err(Error::InvalidShift(
                    "shape_drift needs a generated bundle (generator spec and seed)".into(),
                ))
            }
        };
        let mut drifted = spec.clone();
        drifted.blob_radius.0 *= shift.shape_drift;
        drifted.blob_radius.1 *= shift.shape_drift;
        gen_synthetic_task(&drifted, gen_seed)?
    } else {
        bundle.clone()
    };

    let warp = |s: &Sample| -> Result<Sample> {
        let mut out = s.clone();
        out.domain = DomainTag::Target;
        let ch = out.image.channels();
        let means: Vec<f64> = (0..ch).map(|c| out.image.channel_mean(c)).collect();
        let photometric = shift.intensity_scale != 1.0 || shift.contrast != 1.0 || shift.intensity_offset != 0.0;
        for (i, v) in out.image.data_mut().iter_mut().enumerate().filter(|_| photometric) {
            let m = means[i % ch];
            *v = shift.intensity_scale * (m + shift.contrast * (*v - m)) + shift.intensity_offset;
        }
        let mut rng = seeds::rng(seed_path!(seed, "anomaly", s.id.as_str()));
        if shift.anomaly_rate > 0.0 && rng.random::<f64>() < shift.anomaly_rate {
            out.anomaly_pixels = insert_anomaly(&mut out, shift, &mut rng);
        }
        Ok(out)
    };

    let labeled = base.labeled.iter().map(warp).collect::<Result<Vec<_>>>()?;
    let reference = base.reference.iter().map(warp).collect::<Result<Vec<_>>>()?;
    let test = base.test.iter().map(warp).collect::<Result<Vec<_>>>()?;
    let out = DatasetBundle::new(labeled, reference, test, base.num_classes)?;
    Ok(out.with_provenance(base.gen_spec.clone(), base.seed, Some(shift.clone())))
}

/// Adds a soft disc centred on a random foreground pixel (any pixel when the
/// image has no foreground). Labels are left unchanged: the anomaly alters the
/// appearance of whatever tissue it sits in. Returns the covered pixel count.
fn insert_anomaly(s: &mut Sample, shift: &ShiftSpec, rng: &mut impl Rng) -> usize {
    let (h, w) = (s.image.height(), s.image.width());
    let fg: Vec<usize> = s
        .label
        .as_ref()
        .map(|l| l.data().iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i).collect())
        .unwrap_or_default();
    let centre = if fg.is_empty() { rng.random_range(0..h * w) } else { fg[rng.random_range(0..fg.len())] };
    let (cy, cx) = ((centre / w) as f64 + 0.5, (centre % w) as f64 + 0.5);
    let ch = s.image.channels();
    let amplitude = shift.anomaly_strength * shift.intensity_scale;
    let mut covered = 0;
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            let m = 1.0 / (1.0 + ((d - shift.anomaly_radius) / 0.75).exp());
            if m > 0.5 {
                covered += 1;
            }
            for c in 0..ch {
                let v = s.image.get(y, x, c) + amplitude * m;
                s.image.set(y, x, c, v);
            }
        }
    }
    covered
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::GeneratorSpec;

    fn bundle() -> DatasetBundle {
        let spec = GeneratorSpec { n_labeled: 2, n_reference: 6, n_test: 4, ..GeneratorSpec::default() };
        gen_synthetic_task(&spec, 5).unwrap()
    }

    #[test]
    fn identity_shift_keeps_images() {
        let b = bundle();
        let s = apply_domain_shift(&b, &ShiftSpec::identity(), 1).unwrap();
        for (x, y) in b.labeled().iter().zip(s.labeled()) {
            assert_eq!(x.image, y.image);
            assert_eq!(y.domain, DomainTag::Target);
        }
    }

    #[test]
    fn full_anomaly_rate_marks_every_sample() {
        let shift = ShiftSpec { anomaly_rate: 1.0, ..ShiftSpec::identity() };
        let s = apply_domain_shift(&bundle(), &shift, 2).unwrap();
        let all = s.labeled().iter().chain(s.test()).chain(s.evaluation().reference_samples());
        for smp in all {
            assert!(smp.anomaly_pixels > 0, "{} has no anomaly", smp.id);
        }
    }

    #[test]
    fn rescale_moves_mean_by_factor() {
        let b = bundle();
        let shift = ShiftSpec { intensity_scale: 1.7, contrast: 0.6, ..ShiftSpec::identity() };
        let s = apply_domain_shift(&b, &shift, 3).unwrap();
        // independent recomputation of per-image means
        for (x, y) in b.test().iter().zip(s.test()) {
            let before: f64 = x.image.data().iter().sum::<f64>() / x.image.data().len() as f64;
            let after: f64 = y.image.data().iter().sum::<f64>() / y.image.data().len() as f64;
            assert!((after / before - 1.7).abs() <= 0.017, "{after} vs {before}");
        }
    }

    #[test]
    fn shape_drift_regenerates_consistent_labels() {
        let b = bundle();
        let shift = ShiftSpec { shape_drift: 1.5, ..ShiftSpec::identity() };
        let s = apply_domain_shift(&b, &shift, 3).unwrap();
        let frac = |b: &DatasetBundle| -> f64 {
            b.test().iter().map(|s| s.label.as_ref().unwrap().foreground_mask().count()).sum::<usize>() as f64
        };
        assert!(frac(&s) > frac(&b));
        let again = apply_domain_shift(&b, &shift, 3).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn rejects_out_of_range() {
        for shift in [
            ShiftSpec { intensity_scale: 0.0, ..ShiftSpec::identity() },
            ShiftSpec { anomaly_rate: 1.5, ..ShiftSpec::identity() },
            ShiftSpec { shape_drift: 8.0, ..ShiftSpec::identity() },
            ShiftSpec { contrast: f64::NAN, ..ShiftSpec::identity() },
        ] {
            assert!(matches!(apply_domain_shift(&bundle(), &shift, 0), Err(Error::InvalidShift(_))));
        }
    }
}
