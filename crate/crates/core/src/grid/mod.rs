//! Voxel grid and camera geometry.
//!
//! Voxels are addressed by `(ix, iy, iz)` and stored row-major with `x`
//! varying fastest, so the flat index is `ix + nx * (iy + ny * iz)`. Every
//! dense per-voxel array in the crate (labels, masks, distance fields and the
//! spatial part of volume tensors) follows this layout.

mod camera;
pub mod io;

pub use camera::{CameraModel, PixelRect, Projected, RigidTransform};

use crate::error::{contract, Error, Result};

/// Label of a free voxel.
pub const EMPTY: u8 = 0;
/// Label of a voxel excluded from every metric and loss.
pub const IGNORE: u8 = 255;

/// Placement and resolution of a voxel grid.
///
/// Stored in single precision so that it round-trips exactly through the
/// grid file format; geometry is evaluated in `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMeta {
    /// World position of the min corner of voxel `(0, 0, 0)`, meters.
    pub origin: [f32; 3],
    /// Edge length of a voxel, meters.
    pub voxel_size: f32,
    /// Voxel counts along x, y, z.
    pub dims: [usize; 3],
}

impl GridMeta {
    pub fn new(origin: [f32; 3], voxel_size: f32, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return contract(format!("voxel_size must be positive, got {voxel_size}"));
        }
        if dims.iter().any(|&d| d == 0) {
            return contract(format!("all grid dims must be >= 1, got {dims:?}"));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return contract("grid origin must be finite");
        }
        Ok(Self { origin, voxel_size, dims })
    }

    /// 256 x 256 x 32 voxels of 0.2 m: the outdoor benchmark geometry.
    pub fn outdoor() -> Self {
        Self { origin: [0.0, -25.6, -2.0], voxel_size: 0.2, dims: [256, 256, 32] }
    }

    /// 64 x 64 x 16 voxels of 0.2 m (12.8 m x 12.8 m x 3.2 m), the default
    /// synthetic benchmark grid. The camera sits near `x = 0` looking down +x.
    pub fn desk() -> Self {
        Self { origin: [0.0, -6.4, -0.4], voxel_size: 0.2, dims: [64, 64, 16] }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Metric size of the grid along each axis.
    pub fn extent(&self) -> [f64; 3] {
        let s = self.voxel_size as f64;
        [self.dims[0] as f64 * s, self.dims[1] as f64 * s, self.dims[2] as f64 * s]
    }

    pub fn contains(&self, index: [usize; 3]) -> bool {
        index[0] < self.dims[0] && index[1] < self.dims[1] && index[2] < self.dims[2]
    }

    /// Flat index of `(ix, iy, iz)`. Panics in debug builds when out of range.
    #[inline]
    pub fn flat(&self, index: [usize; 3]) -> usize {
        debug_assert!(self.contains(index));
        index[0] + self.dims[0] * (index[1] + self.dims[1] * index[2])
    }

    #[inline]
    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [flat % nx, (flat / nx) % ny, flat / (nx * ny)]
    }

    pub fn checked_flat(&self, index: [usize; 3]) -> Result<usize> {
        if self.contains(index) {
            Ok(self.flat(index))
        } else {
            Err(Error::Range(format!("voxel {index:?} outside dims {:?}", self.dims)))
        }
    }

    /// World position of a voxel center.
    pub fn voxel_center_world(&self, index: [usize; 3]) -> Result<[f64; 3]> {
        self.checked_flat(index)?;
        Ok(self.center_unchecked(index))
    }

    #[inline]
    pub(crate) fn center_unchecked(&self, index: [usize; 3]) -> [f64; 3] {
        let s = self.voxel_size as f64;
        [
            self.origin[0] as f64 + (index[0] as f64 + 0.5) * s,
            self.origin[1] as f64 + (index[1] as f64 + 0.5) * s,
            self.origin[2] as f64 + (index[2] as f64 + 0.5) * s,
        ]
    }

    /// Continuous voxel coordinates of a world point: voxel centers sit at
    /// integer coordinates.
    #[inline]
    pub fn world_to_voxel_coords(&self, p: [f64; 3]) -> [f64; 3] {
        let s = self.voxel_size as f64;
        [
            (p[0] - self.origin[0] as f64) / s - 0.5,
            (p[1] - self.origin[1] as f64) / s - 0.5,
            (p[2] - self.origin[2] as f64) / s - 0.5,
        ]
    }

    /// Voxel containing a world point, if any.
    #[inline]
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let s = self.voxel_size as f64;
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a] as f64) / s).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// The eight corners of a voxel in world coordinates.
    pub fn voxel_corners(&self, index: [usize; 3]) -> [[f64; 3]; 8] {
        let s = self.voxel_size as f64;
        let lo = [
            self.origin[0] as f64 + index[0] as f64 * s,
            self.origin[1] as f64 + index[1] as f64 * s,
            self.origin[2] as f64 + index[2] as f64 * s,
        ];
        let mut out = [[0.0; 3]; 8];
        for (k, c) in out.iter_mut().enumerate() {
            *c = [
                lo[0] + s * (k & 1) as f64,
                lo[1] + s * ((k >> 1) & 1) as f64,
                lo[2] + s * ((k >> 2) & 1) as f64,
            ];
        }
        out
    }
}

/// Dense semantic labels over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub meta: GridMeta,
    pub labels: Vec<u8>,
}

impl VoxelGrid {
    pub fn new(meta: GridMeta, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != meta.num_voxels() {
            return contract(format!(
                "label count {} does not match grid size {}",
                labels.len(),
                meta.num_voxels()
            ));
        }
        Ok(Self { meta, labels })
    }

    pub fn empty(meta: GridMeta) -> Self {
        Self { labels: vec![EMPTY; meta.num_voxels()], meta }
    }

    pub fn get(&self, index: [usize; 3]) -> u8 {
        self.labels[self.meta.flat(index)]
    }

    pub fn set(&mut self, index: [usize; 3], label: u8) {
        let i = self.meta.flat(index);
        self.labels[i] = label;
    }

    /// Checks every label against `{0..=num_classes} ∪ {255}`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE && l as usize > num_classes)
        {
            Some(i) => contract(format!(
                "label {} at voxel {i} outside 0..={num_classes}",
                self.labels[i]
            )),
            None => Ok(()),
        }
    }

    /// Number of voxels carrying each label value.
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0usize; 256];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Per-pixel metric depth, `+inf` where the ray hits nothing.
///
/// Depth is the forward (camera z) distance, not the ray length.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return contract(format!(
                "depth has {} values for a {width}x{height} image",
                values.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v <= 0.0 || **v == f32::NEG_INFINITY) {
            return contract(format!("depth values must be > 0 or +inf, got {v}"));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, values: vec![value; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Nearest-pixel lookup at continuous image coordinates. Pixel `(i, j)`
    /// covers `[i, i+1) x [j, j+1)`.
    #[inline]
    pub fn sample_nearest(&self, x: f64, y: f64) -> Option<f32> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (px, py) = (x.floor() as usize, y.floor() as usize);
        (px < self.width && py < self.height).then(|| self.at(px, py))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-5)
    }

    #[test]
    fn voxel_centers() {
        let m = GridMeta::new([0.0; 3], 0.2, [256, 256, 32]).unwrap();
        assert!(close(m.voxel_center_world([0, 0, 0]).unwrap(), [0.1, 0.1, 0.1]));
        assert!(close(m.voxel_center_world([255, 255, 31]).unwrap(), [51.1, 51.1, 6.3]));
        let shifted = GridMeta::new([-25.6, 0.0, -2.0], 0.2, [256, 256, 32]).unwrap();
        assert!(close(shifted.voxel_center_world([0, 0, 0]).unwrap(), [-25.5, 0.1, -1.9]));
    }

    #[test]
    fn out_of_range_center_is_range_error() {
        let m = GridMeta::desk();
        assert!(matches!(m.voxel_center_world([64, 0, 0]), Err(Error::Range(_))));
    }

    #[test]
    fn meta_validation() {
        assert!(GridMeta::new([0.0; 3], 0.0, [1, 1, 1]).is_err());
        assert!(GridMeta::new([0.0; 3], 0.2, [1, 0, 1]).is_err());
        let m = GridMeta::outdoor();
        let e = m.extent();
        assert!((e[0] - 51.2).abs() < 1e-4 && (e[2] - 6.4).abs() < 1e-4);
    }

    #[test]
    fn flat_index_is_x_fastest() {
        let m = GridMeta::new([0.0; 3], 1.0, [3, 4, 5]).unwrap();
        assert_eq!(m.flat([1, 0, 0]), 1);
        assert_eq!(m.flat([0, 1, 0]), 3);
        assert_eq!(m.flat([0, 0, 1]), 12);
        for i in 0..m.num_voxels() {
            assert_eq!(m.flat(m.unflat(i)), i);
        }
    }

    #[test]
    fn locate_matches_centers() {
        let m = GridMeta::desk();
        for idx in [[0, 0, 0], [63, 63, 15], [10, 40, 3]] {
            assert_eq!(m.locate(m.voxel_center_world(idx).unwrap()), Some(idx));
            let c = m.world_to_voxel_coords(m.voxel_center_world(idx).unwrap());
            assert!((c[0] - idx[0] as f64).abs() < 1e-9);
        }
        assert_eq!(m.locate([-0.01, 0.0, 0.0]), None);
    }

    #[test]
    fn depth_rejects_non_positive() {
        assert!(DepthMap::new(1, 1, vec![0.0]).is_err());
        assert!(DepthMap::new(1, 1, vec![f32::NAN]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, f32::INFINITY]).is_ok());
    }

    #[test]
    fn label_domain() {
        let m = GridMeta::new([0.0; 3], 1.0, [2, 1, 1]).unwrap();
        assert!(VoxelGrid::new(m, vec![0, 255]).unwrap().validate_classes(6).is_ok());
        assert!(VoxelGrid::new(m, vec![0, 7]).unwrap().validate_classes(6).is_err());
        assert!(VoxelGrid::new(m, vec![0]).is_err());
    }
}
