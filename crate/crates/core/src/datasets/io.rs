//! Binary mask/image files and the JSON bundle manifest.
//!
//! Mask file: `ATSOMSK1`, then u32 LE height, width, num_classes, then
//! height*width u8 class indices.
//!
//! Image file: `ATSOIMG1`, then u32 LE height, width, channels, then
//! height*width*channels f64 LE values (row-major, channels innermost).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, DomainTag, GeneratorSpec, Image, LabelMap, Role, Sample, ShiftSpec};
use crate::error::{Error, Result};

pub const MASK_MAGIC: &[u8; 8] = b"ATSOMSK1";
pub const IMAGE_MAGIC: &[u8; 8] = b"ATSOIMG1";

fn read_exact(r: &mut impl Read, buf: &mut [u8], field: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::ShortRead { field },
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, field: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_mask(label: &LabelMap, w: &mut impl Write) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    w.write_all(&(label.height() as u32).to_le_bytes())?;
    w.write_all(&(label.width() as u32).to_le_bytes())?;
    w.write_all(&(label.num_classes() as u32).to_le_bytes())?;
    w.write_all(label.data())?;
    Ok(())
}

pub fn read_mask(r: &mut impl Read) -> Result<LabelMap> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MASK_MAGIC {
        return Err(Error::BadMagic { kind: "mask", expected: "ATSOMSK1" });
    }
    let height = read_u32(r, "height")? as usize;
    let width = read_u32(r, "width")? as usize;
    let num_classes = read_u32(r, "num_classes")? as usize;
    if !(2..=256).contains(&num_classes) {
        return Err(Error::InvalidField { field: "num_classes", reason: format!("{num_classes} not in [2, 256]") });
    }
    let n = height
        .checked_mul(width)
        .ok_or(Error::InvalidField { field: "height", reason: "height*width overflows".into() })?;
    let mut data = vec![0u8; n];
    read_exact(r, &mut data, "class indices")?;
    if let Some(pos) = data.iter().position(|&v| usize::from(v) >= num_classes) {
        return Err(Error::InvalidField {
            field: "class indices",
            reason: format!("pixel {pos} has class {} but num_classes is {num_classes}", data[pos]),
        });
    }
    LabelMap::new(height, width, num_classes, data)
}

pub fn save_mask(label: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mask(label, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_mask(&mut BufReader::new(File::open(path)?))
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(IMAGE_MAGIC)?;
    for d in [image.height(), image.width(), image.channels()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in image.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != IMAGE_MAGIC {
        return Err(Error::BadMagic { kind: "image", expected: "ATSOIMG1" });
    }
    let h = read_u32(&mut r, "height")? as usize;
    let w = read_u32(&mut r, "width")? as usize;
    let c = read_u32(&mut r, "channels")? as usize;
    let mut data = Vec::with_capacity(h * w * c);
    let mut b = [0u8; 8];
    for _ in 0..h * w * c {
        read_exact(&mut r, &mut b, "pixel values")?;
        data.push(f64::from_le_bytes(b));
    }
    Image::new(h, w, c, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub role: Role,
    pub domain: DomainTag,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub anomaly_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub num_classes: usize,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorSpec>,
    pub shift: Option<ShiftSpec>,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `manifest.json` plus `images/` and `masks/` under `dir`. Paths in
/// the manifest are relative to `dir`.
pub fn save_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut samples = Vec::new();
    for (role, s) in bundle.all_samples() {
        let image = PathBuf::from("images").join(format!("{}.img", s.id));
        save_image(&s.image, dir.join(&image))?;
        let mask = match &s.label {
            Some(l) => {
                let p = PathBuf::from("masks").join(format!("{}.msk", s.id));
                save_mask(l, dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        samples.push(ManifestEntry {
            id: s.id.clone(),
            role,
            domain: s.domain,
            image,
            mask,
            anomaly_pixels: s.anomaly_pixels,
        });
    }
    let manifest = BundleManifest {
        num_classes: bundle.num_classes(),
        seed: bundle.seed(),
        generator: bundle.gen_spec().cloned(),
        shift: bundle.shift().cloned(),
        samples,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let manifest_path = manifest_path.as_ref();
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest: BundleManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let (mut labeled, mut reference, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for e in &manifest.samples {
        let image = load_image(root.join(&e.image))?;
        let label = e.mask.as_ref().map(|m| load_mask(root.join(m))).transpose()?;
        let s = Sample { id: e.id.clone(), image, label, domain: e.domain, anomaly_pixels: e.anomaly_pixels };
        match e.role {
            Role::Labeled => labeled.push(s),
            Role::Reference => reference.push(s),
            Role::Test => test.push(s),
        }
    }
    let b = DatasetBundle::new(labeled, reference, test, manifest.num_classes)?;
    Ok(b.with_provenance(manifest.generator, manifest.seed, manifest.shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_synthetic_task;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let l = LabelMap::new(2, 3, 4, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let mut buf = Vec::new();
        write_mask(&l, &mut buf).unwrap();
        let mut expected = b"ATSOMSK1".to_vec();
        expected.extend([2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        expected.extend([0, 1, 2, 3, 0, 1]);
        assert_eq!(buf, expected);
    }

    #[test]
    fn truncated_mask_is_short_read() {
        let l = LabelMap::new(4, 4, 2, vec![1; 16]).unwrap();
        let mut buf = Vec::new();
        write_mask(&l, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_mask(&mut buf.as_slice()), Err(Error::ShortRead { field: "class indices" })));
        assert!(matches!(read_mask(&mut &buf[..10]), Err(Error::ShortRead { field: "height" })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOTAMASK\x01\x00\x00\x00".to_vec();
        assert!(matches!(read_mask(&mut buf.as_slice()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn class_beyond_header_count_fails_validation() {
        let mut buf = b"ATSOMSK1".to_vec();
        buf.extend([1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 0, 7]);
        let err = read_mask(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::InvalidField { field: "class indices", .. }), "{err}");
    }

    #[test]
    fn bundle_round_trip() {
        let spec = GeneratorSpec { n_labeled: 2, n_reference: 3, n_test: 2, ..GeneratorSpec::default() };
        let b = gen_synthetic_task(&spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_bundle(&b, dir.path()).unwrap();
        let loaded = load_bundle(manifest).unwrap();
        assert_eq!(b, loaded);
        assert_eq!(loaded.gen_spec(), Some(&spec));
        assert_eq!(loaded.seed(), Some(4));
    }

    proptest! {
        #[test]
        fn mask_round_trip(h in 1usize..12, w in 1usize..12, k in 2usize..=256, seed in any::<u64>()) {
            let data: Vec<u8> = (0..h * w)
                .map(|i| (crate::seed_path!(seed, i) % k as u64) as u8)
                .collect();
            let l = LabelMap::new(h, w, k, data).unwrap();
            let mut buf = Vec::new();
            write_mask(&l, &mut buf).unwrap();
            prop_assert_eq!(buf.len(), 20 + h * w);
            prop_assert_eq!(read_mask(&mut buf.as_slice()).unwrap(), l);
        }
    }
}
