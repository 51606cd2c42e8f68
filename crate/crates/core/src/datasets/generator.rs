use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, DomainTag, Image, LabelMap, Role, Sample};
use crate::error::{Error, Result};
use crate::seed_path;
use crate::seeds;

/// Parameters of the blob-on-texture task family.
///
/// Each non-background class is drawn as soft-edged elliptical blobs with a
/// fixed per-class appearance vector. Images vary in gain, offset and class
/// contrast, carry smooth background texture plus white noise, and may contain
/// background-labeled distractor blobs that mimic a foreground class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub n_labeled: usize,
    pub n_reference: usize,
    pub n_test: usize,
    /// Inclusive range of blobs drawn per foreground class.
    pub blobs_per_class: (usize, usize),
    /// Range of blob semi-axis lengths, in pixels.
    pub blob_radius: (f64, f64),
    /// Width of the soft edge, in pixels.
    pub edge_softness: f64,
    pub background_level: f64,
    /// Norm of each class's appearance vector.
    pub class_contrast: f64,
    /// Per-image multiplicative jitter on class contrast (log-normal sigma).
    pub contrast_jitter: f64,
    /// Per-image log-normal sigma of the global gain.
    pub gain_jitter: f64,
    /// Per-image sd of the global intensity offset.
    pub offset_jitter: f64,
    pub texture: f64,
    pub noise: f64,
    /// Expected number of distractor blobs per image.
    pub distractor_rate: f64,
    /// Distractor appearance as a fraction of the mimicked class's appearance.
    pub distractor_level: f64,
    /// Classes that appear less often and smaller.
    pub rare_classes: Vec<usize>,
    /// Probability that a blob of a rare class is kept (its area also shrinks by this factor).
    pub rare_scale: f64,
    /// Allowed range of the non-background pixel fraction per image.
    pub foreground_band: (f64, f64),
}

impl Default for GeneratorSpec {
    /// The standard binary benchmark: 6 labeled, 56 reference, 20 test images.
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            channels: 1,
            num_classes: 2,
            n_labeled: 6,
            n_reference: 56,
            n_test: 20,
            blobs_per_class: (1, 2),
            blob_radius: (3.0, 6.0),
            edge_softness: 1.0,
            background_level: 1.0,
            class_contrast: 1.0,
            contrast_jitter: 0.5,
            gain_jitter: 0.6,
            offset_jitter: 1.5,
            texture: 0.0,
            noise: 0.15,
            distractor_rate: 0.0,
            distractor_level: 0.8,
            rare_classes: Vec::new(),
            rare_scale: 0.3,
            foreground_band: (0.02, 0.6),
        }
    }
}

const MAX_SHAPE_ATTEMPTS: usize = 64;

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("num_classes = {} (need 2..=256)", self.num_classes));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("height, width and channels must be positive".into());
        }
        if self.n_labeled == 0 || self.n_reference == 0 || self.n_test == 0 {
            return bad("n_labeled, n_reference and n_test must be positive".into());
        }
        let reals = [
            self.blob_radius.0,
            self.blob_radius.1,
            self.edge_softness,
            self.background_level,
            self.class_contrast,
            self.contrast_jitter,
            self.gain_jitter,
            self.offset_jitter,
            self.texture,
            self.noise,
            self.distractor_rate,
            self.distractor_level,
            self.rare_scale,
            self.foreground_band.0,
            self.foreground_band.1,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        if self.blobs_per_class.0 > self.blobs_per_class.1 {
            return bad("blobs_per_class min exceeds max".into());
        }
        if !(self.blob_radius.0 > 0.0 && self.blob_radius.0 <= self.blob_radius.1) {
            return bad("blob_radius must satisfy 0 < min <= max".into());
        }
        if self.edge_softness <= 0.0 {
            return bad("edge_softness must be positive".into());
        }
        let non_negative = [
            self.contrast_jitter,
            self.gain_jitter,
            self.offset_jitter,
            self.texture,
            self.noise,
            self.distractor_rate,
        ];
        if non_negative.iter().any(|v| *v < 0.0) {
            return bad("jitter, texture, noise and distractor_rate must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.rare_scale) {
            return bad("rare_scale must lie in [0, 1]".into());
        }
        let (lo, hi) = self.foreground_band;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("foreground_band must satisfy 0 <= min <= max <= 1".into());
        }
        if let Some(&c) = self.rare_classes.iter().find(|&&c| c == 0 || c >= self.num_classes) {
            return bad(format!("rare class {c} must be a foreground class"));
        }
        Ok(())
    }

    /// Appearance vector of every class; class 0 is the zero vector.
    pub fn palette(&self) -> Vec<Vec<f64>> {
        let k = self.num_classes;
        let c = self.channels;
        let mut out = vec![vec![0.0; c]; k];
        let fg = k - 1;
        for (i, v) in out.iter_mut().enumerate().skip(1) {
            let j = i - 1;
            match c {
                1 => v[0] = self.class_contrast * (j + 1) as f64 / fg as f64,
                2 => {
                    let phi = std::f64::consts::TAU * j as f64 / fg as f64;
                    v[0] = self.class_contrast * phi.cos();
                    v[1] = self.class_contrast * phi.sin();
                }
                _ => {
                    // Fibonacci sphere in the first three channels.
                    let z = 1.0 - 2.0 * (j as f64 + 0.5) / fg as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let phi = j as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
                    v[0] = self.class_contrast * r * phi.cos();
                    v[1] = self.class_contrast * r * phi.sin();
                    v[2] = self.class_contrast * z;
                }
            }
        }
        out
    }
}

/// Generate a task. Every sample is a pure function of `(spec, seed, role, index)`.
pub fn gen_synthetic_task(spec: &GeneratorSpec, seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    let palette = spec.palette();
    let plan: Vec<(Role, usize)> = (0..spec.n_labeled)
        .map(|i| (Role::Labeled, i))
        .chain((0..spec.n_reference).map(|i| (Role::Reference, i)))
        .chain((0..spec.n_test).map(|i| (Role::Test, i)))
        .collect();
    let samples: Vec<(Role, Sample)> = plan
        .par_iter()
        .map(|&(role, i)| generate_sample(spec, &palette, seed, role, i).map(|s| (role, s)))
        .collect::<Result<_>>()?;
    let mut labeled = Vec::new();
    let mut reference = Vec::new();
    let mut test = Vec::new();
    for (role, s) in samples {
        match role {
            Role::Labeled => labeled.push(s),
            Role::Reference => reference.push(s),
            Role::Test => test.push(s),
        }
    }
    let bundle = DatasetBundle::new(labeled, reference, test, spec.num_classes)?;
    Ok(bundle.with_provenance(Some(spec.clone()), Some(seed), None))
}

pub(crate) fn sample_id(role: Role, index: usize) -> String {
    let prefix = match role {
        Role::Labeled => 's',
        Role::Reference => 'r',
        Role::Test => 'e',
    };
    format!("{prefix}{index:03}")
}

fn role_tag(role: Role) -> &'static str {
    match role {
        Role::Labeled => "S",
        Role::Reference => "R",
        Role::Test => "E",
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, spec: &GeneratorSpec, area_scale: f64) -> Self {
        let (lo, hi) = spec.blob_radius;
        let s = area_scale.sqrt();
        let theta: f64 = rng.random::<f64>() * std::f64::consts::PI;
        Self {
            cy: rng.random::<f64>() * spec.height as f64,
            cx: rng.random::<f64>() * spec.width as f64,
            ry: (lo + (hi - lo) * rng.random::<f64>()) * s,
            rx: (lo + (hi - lo) * rng.random::<f64>()) * s,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Soft membership in [0, 1]; 0.5 on the nominal boundary.
    fn membership(&self, y: f64, x: f64, softness: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let d = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        let scale = 0.5 * (self.rx + self.ry);
        logistic((1.0 - d) * scale / softness)
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut f: Vec<f64> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for _ in 0..2 {
        f = box_blur(&f, h, w, 2);
    }
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64;
    let sd = var.sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    f
}

fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    s += src[yy * w + xx];
                }
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

fn draw_shapes(
    rng: &mut ChaCha8Rng,
    spec: &GeneratorSpec,
) -> (Vec<u8>, Vec<Vec<f64>>, f64) {
    let (h, w) = (spec.height, spec.width);
    let k = spec.num_classes;
    // memberships[c][p]
    let mut member = vec![vec![0.0f64; h * w]; k];
    for (class, m) in member.iter_mut().enumerate().skip(1) {
        let rare = spec.rare_classes.contains(&class);
        let (lo, hi) = spec.blobs_per_class;
        let n = rng.random_range(lo..=hi);
        for _ in 0..n {
            if rare && rng.random::<f64>() >= spec.rare_scale {
                continue;
            }
            let blob = Blob::random(rng, spec, if rare { spec.rare_scale.max(0.05) } else { 1.0 });
            for y in 0..h {
                for x in 0..w {
                    let v = blob.membership(y as f64 + 0.5, x as f64 + 0.5, spec.edge_softness);
                    let cell = &mut m[y * w + x];
                    *cell = cell.max(v);
                }
            }
        }
    }
    let mut labels = vec![0u8; h * w];
    let mut fg = 0usize;
    for p in 0..h * w {
        let mut best = 0usize;
        let mut best_v = 0.5;
        for (c, m) in member.iter().enumerate().skip(1) {
            if m[p] > best_v {
                best_v = m[p];
                best = c;
            }
        }
        labels[p] = best as u8;
        fg += usize::from(best != 0);
    }
    (labels, member, fg as f64 / (h * w) as f64)
}

fn generate_sample(
    spec: &GeneratorSpec,
    palette: &[Vec<f64>],
    seed: u64,
    role: Role,
    index: usize,
) -> Result<Sample> {
    let mut rng = seeds::rng(seed_path!(seed, "sample", role_tag(role), index));
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let gain = (spec.gain_jitter * rng.sample::<f64, _>(StandardNormal)).exp();
    let offset = spec.offset_jitter * rng.sample::<f64, _>(StandardNormal);
    let contrast = (spec.contrast_jitter * rng.sample::<f64, _>(StandardNormal)).exp();

    let mut shapes = None;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let (labels, member, frac) = draw_shapes(&mut rng, spec);
        let (lo, hi) = spec.foreground_band;
        let all_background_allowed = spec.blobs_per_class.1 == 0;
        if all_background_allowed || (lo..=hi).contains(&frac) {
            shapes = Some((labels, member));
            break;
        }
    }
    let (labels, member) = shapes.ok_or_else(|| {
        Error::InvalidSpec(format!(
            "could not place shapes inside foreground_band {:?} after {MAX_SHAPE_ATTEMPTS} attempts",
            spec.foreground_band
        ))
    })?;

    // Distractors: background-labeled blobs that borrow a foreground class's look.
    let mut distractor = vec![vec![0.0f64; ch]; h * w];
    if spec.num_classes > 1 && spec.distractor_rate > 0.0 {
        let whole = spec.distractor_rate.floor() as usize;
        let n = whole + usize::from(rng.random::<f64>() < spec.distractor_rate.fract());
        for _ in 0..n {
            let mimic = rng.random_range(1..spec.num_classes);
            let blob = Blob::random(&mut rng, spec, 0.6);
            for (p, px) in distractor.iter_mut().enumerate() {
                let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
                let m = blob.membership(y, x, spec.edge_softness);
                for (c, d) in px.iter_mut().enumerate() {
                    let v = spec.distractor_level * palette[mimic][c] * m;
                    if v.abs() > d.abs() {
                        *d = v;
                    }
                }
            }
        }
    }

    let textures: Vec<Vec<f64>> = (0..ch).map(|_| smooth_field(&mut rng, h, w)).collect();
    let mut data = vec![0.0; h * w * ch];
    for p in 0..h * w {
        // Blend class appearance by soft membership, capped at total weight 1.
        let total: f64 = member.iter().skip(1).map(|m| m[p]).sum();
        let norm = if total > 1.0 { total } else { 1.0 };
        for c in 0..ch {
            let mut signal = 0.0;
            for (class, m) in member.iter().enumerate().skip(1) {
                signal += palette[class][c] * m[p] / norm;
            }
            let clean = spec.texture * textures[c][p] + contrast * signal + distractor[p][c] * contrast;
            let noise = spec.noise * rng.sample::<f64, _>(StandardNormal);
            data[p * ch + c] = spec.background_level + offset + gain * clean + noise;
        }
    }

    let image = Image::new(h, w, ch, data)?;
    let label = LabelMap::new(h, w, spec.num_classes, labels)?;
    Ok(Sample {
        id: sample_id(role, index),
        image,
        label: Some(label),
        domain: DomainTag::Source,
        anomaly_pixels: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorSpec {
        GeneratorSpec { n_labeled: 2, n_reference: 4, n_test: 3, ..GeneratorSpec::default() }
    }

    #[test]
    fn counts_match_spec() {
        let spec = GeneratorSpec { n_labeled: 6, n_reference: 56, n_test: 20, ..GeneratorSpec::default() };
        let b = gen_synthetic_task(&spec, 7).unwrap();
        assert_eq!(b.labeled().len(), 6);
        assert_eq!(b.reference_len(), 56);
        assert_eq!(b.test().len(), 20);
    }

    #[test]
    fn same_seed_same_bundle() {
        let a = gen_synthetic_task(&small(), 3).unwrap();
        let b = gen_synthetic_task(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_task(&small(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_blobs_no_noise_gives_constant_background() {
        let spec = GeneratorSpec {
            blobs_per_class: (0, 0),
            noise: 0.0,
            distractor_rate: 0.0,
            ..small()
        };
        let b = gen_synthetic_task(&spec, 1).unwrap();
        for s in b.labeled().iter().chain(b.test()).chain(b.evaluation().reference_samples()) {
            assert!(s.label.as_ref().unwrap().data().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn foreground_fraction_stays_in_band() {
        let spec = GeneratorSpec { foreground_band: (0.1, 0.3), ..small() };
        let b = gen_synthetic_task(&spec, 9).unwrap();
        for s in b.labeled().iter().chain(b.test()) {
            let l = s.label.as_ref().unwrap();
            let frac = l.foreground_mask().count() as f64 / l.data().len() as f64;
            assert!((0.1..=0.3).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            GeneratorSpec { num_classes: 1, ..small() },
            GeneratorSpec { n_reference: 0, ..small() },
            GeneratorSpec { noise: f64::NAN, ..small() },
            GeneratorSpec { blob_radius: (f64::INFINITY, 1.0), ..small() },
        ] {
            assert!(matches!(gen_synthetic_task(&spec, 0), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn many_class_palette_is_distinct() {
        let spec = GeneratorSpec { num_classes: 12, channels: 3, ..small() };
        let p = spec.palette();
        for i in 0..12 {
            for j in 0..i {
                let d: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 1e-3, "classes {i} and {j} share appearance");
            }
        }
    }
}
