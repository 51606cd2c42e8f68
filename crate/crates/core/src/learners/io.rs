//! Model file: `ATSOMDL1`, u32 LE header length, JSON header (id, arch,
//! input normalisation, provenance), u64 LE weight count, f64 LE weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, InputNorm, Model, Provenance};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"ATSOMDL1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    id: String,
    arch: ArchSpec,
    input_norm: InputNorm,
    provenance: Provenance,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], field: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::ShortRead { field },
        _ => Error::Io(e),
    })
}

pub fn write_model(model: &Model, w: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        id: model.id.clone(),
        arch: model.arch.clone(),
        input_norm: model.input_norm.clone(),
        provenance: model.provenance.clone(),
    })?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.weights.len() as u64).to_le_bytes())?;
    for v in &model.weights {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::BadMagic { kind: "model", expected: "ATSOMDL1" });
    }
    let mut len = [0u8; 4];
    read_exact(r, &mut len, "header length")?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact(r, &mut header, "header")?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::InvalidField { field: "header", reason: e.to_string() })?;
    let mut count = [0u8; 8];
    read_exact(r, &mut count, "weight count")?;
    let count = u64::from_le_bytes(count) as usize;
    let expected = header.arch.head_shape().num_params();
    if count != expected {
        return Err(Error::InvalidField {
            field: "weight count",
            reason: format!("{count} weights but the architecture has {expected} parameters"),
        });
    }
    let mut weights = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        read_exact(r, &mut b, "weights")?;
        weights.push(f64::from_le_bytes(b));
    }
    Model::from_parts(header.id, header.arch, header.input_norm, weights, header.provenance)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(&mut BufReader::new(File::open(path)?))
}
