//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `CKPT`, version `u32`, then until the end
//! of the file, per parameter: name length `u32`, UTF-8 name, rank `u32`,
//! `rank` extents as `u32`, and the `f32` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, field: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format { field, detail: format!("{v} does not fit in u32") })
}

/// Serializes every parameter and buffer of `module`, in visiting order.
pub fn encode_checkpoint(module: &dyn Module) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    module.visit(&mut |p| params.push((p.name.clone(), p.value.shape.clone(), p.value.data.clone())));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    for (name, shape, data) in params {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(shape.len(), "rank")?);
        for d in shape {
            put_u32(&mut out, to_u32(d, "extent")?);
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format { field, detail: "truncated checkpoint".into() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}

/// One stored parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<StoredParam>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { field: "magic", detail: "not a checkpoint file".into() });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { field: "version", detail: format!("unsupported version {version}") });
    }
    let mut params = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Format { field: "name", detail: e.to_string() })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Format { field: "rank", detail: format!("{name}: rank {rank} too large") });
        }
        let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format { field: "extent", detail: format!("{name}: size overflows") })?;
        let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "payload")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.push(StoredParam { name, shape, data });
    }
    Ok(params)
}

/// Loads stored values into `module`. Names and shapes must match the
/// module's parameters exactly, in order.
pub fn apply_checkpoint(module: &mut dyn Module, params: Vec<StoredParam>) -> Result<()> {
    let mut expected = Vec::new();
    module.visit(&mut |p| expected.push((p.name.clone(), p.value.shape.clone())));
    if expected.len() != params.len() {
        return Err(Error::Format {
            field: "count",
            detail: format!("checkpoint has {} parameters, network has {}", params.len(), expected.len()),
        });
    }
    for ((name, shape), p) in expected.iter().zip(&params) {
        if *name != p.name || *shape != p.shape {
            return Err(Error::Format {
                field: "name",
                detail: format!("expected {name} {shape:?}, found {} {:?}", p.name, p.shape),
            });
        }
    }
    let mut it = params.into_iter();
    module.visit_mut(&mut |p| {
        let s = it.next().expect("counts checked");
        p.value.data = s.data;
        p.velocity.fill(0.0);
        p.zero_grad();
    });
    Ok(())
}

pub fn save_checkpoint(module: &dyn Module, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(module)?)?;
    Ok(())
}

pub fn load_checkpoint(module: &mut dyn Module, path: impl AsRef<Path>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    apply_checkpoint(module, decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::{MaeConfig, MaeNet};

    #[test]
    fn round_trip_restores_values() {
        let cfg = MaeConfig { context_channels: 0, embed: 4, widths: [4, 4, 4], ..Default::default() };
        let a = MaeNet::new(cfg, 1);
        let mut b = MaeNet::new(cfg, 2);
        let bytes = encode_checkpoint(&a).unwrap();
        apply_checkpoint(&mut b, decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(encode_checkpoint(&b).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let cfg = MaeConfig { context_channels: 0, embed: 4, widths: [4, 4, 4], ..Default::default() };
        let a = MaeNet::new(cfg, 1);
        let bytes = encode_checkpoint(&a).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut other = MaeNet::new(MaeConfig { widths: [4, 4, 8], ..cfg }, 0);
        assert!(apply_checkpoint(&mut other, decode_checkpoint(&bytes).unwrap()).is_err());
    }
}
