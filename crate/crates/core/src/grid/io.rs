//! Little-endian binary formats for grids and depth maps.
//!
//! Grid layout (`VGRD`, and `VMSK` for visibility masks):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic |
//! | 4  | 4 | version (u32 = 1) |
//! | 8  | 12 | nx, ny, nz (u32) |
//! | 20 | 4 | voxel_size (f32, meters) |
//! | 24 | 12 | origin (3 x f32, meters) |
//! | 36 | 4 | reserved (u32 = 0) |
//! | 40 | nx·ny·nz | labels (u8, x fastest) |
//!
//! Depth layout (`DPTH`): magic, version u32 = 1, width u32, height u32,
//! then width·height f32 meters row-major; no-return pixels are `+inf`.

use std::fs;
use std::path::Path;

use super::{DepthMap, GridMeta, VoxelGrid};
use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"VGRD";
pub const MASK_MAGIC: &[u8; 4] = b"VMSK";
pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
pub const FORMAT_VERSION: u32 = 1;
pub const GRID_HEADER_LEN: usize = 40;
const DEPTH_HEADER_LEN: usize = 16;

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format { field, detail: detail.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(fmt_err(field, format!("truncated: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Encodes a label-like payload with the 40-byte grid header.
pub fn encode_labels(magic: &[u8; 4], meta: &GridMeta, payload: &[u8]) -> Vec<u8> {
    assert_eq!(payload.len(), meta.num_voxels());
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in meta.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&meta.voxel_size.to_le_bytes());
    for o in meta.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Decodes a buffer written by [`encode_labels`] with the given magic.
pub fn decode_labels(magic: &[u8; 4], bytes: &[u8]) -> Result<(GridMeta, Vec<u8>)> {
    let mut r = Reader { bytes, pos: 0 };
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(fmt_err(
            "magic",
            format!("expected {:?}, found {:?}", String::from_utf8_lossy(magic), String::from_utf8_lossy(m)),
        ));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(fmt_err("version", format!("unsupported version {version}")));
    }
    let nx = r.u32("nx")? as usize;
    let ny = r.u32("ny")? as usize;
    let nz = r.u32("nz")? as usize;
    let voxel_size = r.f32("voxel_size")?;
    let origin = [r.f32("origin")?, r.f32("origin")?, r.f32("origin")?];
    let reserved = r.u32("reserved")?;
    if reserved != 0 {
        return Err(fmt_err("reserved", format!("expected 0, found {reserved}")));
    }
    let meta = GridMeta::new(origin, voxel_size, [nx, ny, nz])
        .map_err(|e| fmt_err("dims", e.to_string()))?;
    let n = meta.num_voxels();
    let payload = r.take(n, "labels")?;
    if r.pos != bytes.len() {
        return Err(fmt_err(
            "dims",
            format!("{} trailing bytes after {n} labels", bytes.len() - r.pos),
        ));
    }
    Ok((meta, payload.to_vec()))
}

pub fn encode_grid(grid: &VoxelGrid) -> Vec<u8> {
    encode_labels(GRID_MAGIC, &grid.meta, &grid.labels)
}

pub fn decode_grid(bytes: &[u8]) -> Result<VoxelGrid> {
    let (meta, labels) = decode_labels(GRID_MAGIC, bytes)?;
    VoxelGrid::new(meta, labels)
}

pub fn save_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    decode_grid(&fs::read(path)?)
}

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + 4 * depth.values.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for v in &depth.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let mut r = Reader { bytes, pos: 0 };
    let m = r.take(4, "magic")?;
    if m != DEPTH_MAGIC {
        return Err(fmt_err("magic", format!("expected \"DPTH\", found {:?}", String::from_utf8_lossy(m))));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(fmt_err("version", format!("unsupported version {version}")));
    }
    let width = r.u32("width")? as usize;
    let height = r.u32("height")? as usize;
    let n = width * height;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.f32("values")?);
    }
    if r.pos != bytes.len() {
        return Err(fmt_err("values", "trailing bytes after depth payload"));
    }
    DepthMap::new(width, height, values).map_err(|e| fmt_err("values", e.to_string()))
}

pub fn save_depth(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_depth(depth))?;
    Ok(())
}

pub fn load_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    decode_depth(&fs::read(path)?)
}
