//! Binary tensor block format.
//!
//! ```text
//! magic   4 bytes  "MSFT"
//! version u32 LE   1
//! rank    u32 LE
//! dims    rank × u32 LE
//! payload product(dims) × f32 LE, row-major
//! ```
//!
//! A feature file is a single rank-4 block. Checkpoints embed one block per
//! stage.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSFT";
pub const VERSION: u32 = 1;

pub fn encode_block(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Cursor<'a> {
    fn field(&self, name: &str) -> String {
        if self.context.is_empty() {
            name.to_string()
        } else {
            format!("{} ({name})", self.context)
        }
    }

    fn take(&mut self, n: usize, name: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.field(name),
                format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, name: &str) -> Result<u32> {
        let b = self.take(4, name)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes one block starting at `*pos`. When `to_end` is set, the payload
/// must run exactly to the end of `bytes`. `context` prefixes error fields
/// (for example a checkpoint stage name).
pub fn decode_block(bytes: &[u8], pos: &mut usize, to_end: bool, context: &str) -> Result<Tensor> {
    let mut cur = Cursor {
        bytes,
        pos: *pos,
        context,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            cur.field("magic"),
            format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(cur.field("version"), format!("unsupported version {version}")));
    }
    let rank = cur.u32("rank")? as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::format(cur.field("rank"), format!("rank {rank} outside 1..=4")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = cur.u32(&format!("dims[{i}]"))? as usize;
        if d == 0 {
            return Err(Error::format(cur.field("dims"), "zero extent"));
        }
        dims.push(d);
    }
    let count: usize = dims.iter().product();
    let expected = 4 * count;
    let remaining = bytes.len() - cur.pos;
    if remaining < expected || (to_end && remaining != expected) {
        return Err(Error::format(
            cur.field("payload"),
            format!("payload length mismatch: expected {expected} bytes, found {remaining}"),
        ));
    }
    let payload = cur.take(expected, "payload")?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    *pos = cur.pos;
    Tensor::new(&dims, values)
}

pub fn write_features(path: impl AsRef<Path>, batch: &Tensor) -> Result<()> {
    batch.nchw()?;
    let mut out = Vec::with_capacity(16 + 16 + 4 * batch.len());
    encode_block(batch, &mut out);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let t = decode_block(&bytes, &mut pos, true, "")?;
    if t.rank() != 4 {
        return Err(Error::format("rank", format!("feature files are rank 4, got {}", t.rank())));
    }
    Ok(t)
}
