//! Model checkpoints.
//!
//! ```text
//! magic  4 bytes "MSCK"
//! version u32 LE  1
//! stages  u32 LE
//! per stage: name_len u32 LE, name bytes (UTF-8), tensor block (see
//!            `backbone::features`)
//! ```
//!
//! Stages are the parameter store entries in registration order, running
//! statistics included.

use std::fs;
use std::path::Path;

use super::model::Model;
use crate::backbone::features::{decode_block, encode_block};
use crate::error::{Error, Result};
use crate::layers::ParamStore;

pub const MAGIC: &[u8; 4] = b"MSCK";
pub const VERSION: u32 = 1;

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        encode_block(&e.value, &mut out);
    }
    out
}

fn read_u32(bytes: &[u8], pos: &mut usize, field: &str) -> Result<u32> {
    let b = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::format(field, "truncated"))?;
    *pos += 4;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decodes `bytes` into `store`, which must already hold the same stages
/// (names, order, shapes). The store is only modified if every stage
/// validates.
pub fn decode_into_store(bytes: &[u8], store: &mut ParamStore) -> Result<()> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(Error::format("magic", "bad magic, expected MSCK"));
    }
    let mut pos = 4;
    let version = read_u32(bytes, &mut pos, "version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let count = read_u32(bytes, &mut pos, "stage count")? as usize;
    if count != store.len() {
        return Err(Error::format(
            "stage count",
            format!("checkpoint has {count} stages, model has {}", store.len()),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (k, entry) in store.entries().iter().enumerate() {
        let len = read_u32(bytes, &mut pos, &format!("stage {k} name length"))? as usize;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::format(format!("stage {k} name"), "truncated"))?;
        let name = String::from_utf8_lossy(name).into_owned();
        pos += len;
        if name != entry.name {
            return Err(Error::format(
                format!("stage {name}"),
                format!("stage mismatch at position {k}: model expects {:?}", entry.name),
            ));
        }
        let last = k + 1 == count;
        let t = decode_block(bytes, &mut pos, last, &format!("stage {name}"))?;
        if t.dims() != entry.value.dims() {
            return Err(Error::format(
                format!("stage {name}"),
                format!("shape {:?} does not match model shape {:?}", t.dims(), entry.value.dims()),
            ));
        }
        values.push(t);
    }
    for (entry, v) in store.entries_mut().iter_mut().zip(values) {
        entry.value = v;
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_store(&model.store))?;
    Ok(())
}

/// Loads parameters into an already assembled `model`.
pub fn load_checkpoint(model: &mut Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = fs::read(path)?;
    decode_into_store(&bytes, &mut model.store)
}
