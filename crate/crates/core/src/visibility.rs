//! Visual-frontier reasoning: the visible / occluded / out-of-view partition
//! of a grid against a depth map, and the truncated unsigned distance field
//! that encodes the frontier as a soft shell.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::grid::io::{decode_labels, encode_labels, MASK_MAGIC};
use crate::grid::{CameraModel, DepthMap, GridMeta};

/// Relaxation of the depth test by default, meters.
pub const DEFAULT_THETA_D: f64 = 3.5;
/// Sharpness of the distance-to-frontier decay.
pub const DEFAULT_GAMMA: f64 = 10.0;
/// Truncation distance of the frontier field, meters.
pub const DEFAULT_THETA: f64 = 1.0;
/// Width of the band around the depth surface where the closed-form
/// classifier and the ray-marching oracle may legitimately disagree.
pub const TIE_BAND: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum VisClass {
    Visible = 0,
    Occluded = 1,
    OutOfView = 2,
}

impl VisClass {
    pub const ALL: [VisClass; 3] = [VisClass::Visible, VisClass::Occluded, VisClass::OutOfView];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Visible),
            1 => Some(Self::Occluded),
            2 => Some(Self::OutOfView),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Visible => "visible",
            Self::Occluded => "occluded",
            Self::OutOfView => "oov",
        }
    }
}

/// One visibility class per voxel, in grid layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask {
    pub meta: GridMeta,
    pub classes: Vec<VisClass>,
}

impl VisibilityMask {
    pub fn new(meta: GridMeta, classes: Vec<VisClass>) -> Result<Self> {
        if classes.len() != meta.num_voxels() {
            return contract("visibility mask length does not match grid");
        }
        Ok(Self { meta, classes })
    }

    #[inline]
    pub fn is_visible(&self, flat: usize) -> bool {
        self.classes[flat] == VisClass::Visible
    }

    /// Voxel counts as `[visible, occluded, out_of_view]`.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for &k in &self.classes {
            c[k as usize] += 1;
        }
        c
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.is_visible(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: Vec<u8> = self.classes.iter().map(|&c| c as u8).collect();
        encode_labels(MASK_MAGIC, &self.meta, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, payload) = decode_labels(MASK_MAGIC, bytes)?;
        let classes = payload
            .iter()
            .map(|&b| {
                VisClass::from_u8(b).ok_or_else(|| Error::Format {
                    field: "labels",
                    detail: format!("visibility class {b} not in 0..=2"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(meta, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_depth(camera: &CameraModel, depth: &DepthMap) -> Result<()> {
    if (depth.width, depth.height) != camera.image_size {
        return contract(format!(
            "depth map is {}x{} but camera image is {}x{}",
            depth.width, depth.height, camera.image_size.0, camera.image_size.1
        ));
    }
    Ok(())
}

/// Voxel-center projection and the depth sampled under it.
#[inline]
fn frontier_sample(meta: &GridMeta, camera: &CameraModel, depth: &DepthMap, flat: usize) -> Option<(f64, f64)> {
    let p = camera.project_point(meta.center_unchecked(meta.unflat(flat)))?;
    let d = depth.sample_nearest(p.x, p.y)?;
    Some((p.depth, d as f64))
}

/// Partitions the grid: out-of-view when the voxel center does not project
/// into the image, visible when `d_v < D(x_v, y_v) + theta_d`, occluded
/// otherwise. `theta_d = +inf` reproduces the out-of-view-only split.
pub fn classify_visibility(
    meta: &GridMeta,
    camera: &CameraModel,
    depth: &DepthMap,
    theta_d: f64,
) -> Result<VisibilityMask> {
    check_depth(camera, depth)?;
    if !(theta_d >= 0.0) {
        return contract(format!("theta_d must be >= 0, got {theta_d}"));
    }
    let classes = (0..meta.num_voxels())
        .into_par_iter()
        .map(|i| match frontier_sample(meta, camera, depth, i) {
            None => VisClass::OutOfView,
            Some((d_v, surface)) if d_v < surface + theta_d => VisClass::Visible,
            Some(_) => VisClass::Occluded,
        })
        .collect();
    VisibilityMask::new(*meta, classes)
}

/// Brute-force reference for [`classify_visibility`] at `theta_d = 0`.
///
/// Marches an explicit ray from the camera center toward every in-view voxel
/// center in steps of a quarter voxel and reports the voxel visible iff the
/// ray reaches the center before crossing the depth surface of its pixel.
/// Shares only the pinhole intrinsics with the closed-form path.
pub fn visibility_oracle(meta: &GridMeta, camera: &CameraModel, depth: &DepthMap) -> Result<VisibilityMask> {
    check_depth(camera, depth)?;
    let rot = camera.cam_from_world.rotation;
    let t = camera.cam_from_world.translation;
    // camera center: -R^T t
    let eye = [
        -(rot[0][0] * t[0] + rot[1][0] * t[1] + rot[2][0] * t[2]),
        -(rot[0][1] * t[0] + rot[1][1] * t[1] + rot[2][1] * t[2]),
        -(rot[0][2] * t[0] + rot[1][2] * t[1] + rot[2][2] * t[2]),
    ];
    let step = meta.voxel_size as f64 / 4.0;
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (w, h) = camera.image_size;

    let classes = (0..meta.num_voxels())
        .into_par_iter()
        .map(|flat| {
            let [ix, iy, iz] = meta.unflat(flat);
            let s = meta.voxel_size as f64;
            let center = [
                meta.origin[0] as f64 + (ix as f64 + 0.5) * s,
                meta.origin[1] as f64 + (iy as f64 + 0.5) * s,
                meta.origin[2] as f64 + (iz as f64 + 0.5) * s,
            ];
            let ray = [center[0] - eye[0], center[1] - eye[1], center[2] - eye[2]];
            let z = dot(rot[2], ray);
            if z <= 0.0 {
                return VisClass::OutOfView;
            }
            let x = camera.fx * dot(rot[0], ray) / z + camera.cx;
            let y = camera.fy * dot(rot[1], ray) / z + camera.cy;
            if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
                return VisClass::OutOfView;
            }
            let surface = depth.values[y.floor() as usize * w + x.floor() as usize] as f64;
            if surface.is_infinite() {
                return VisClass::Visible;
            }
            let length = dot(ray, ray).sqrt();
            // forward depth gained per meter travelled along this ray
            let slope = z / length;
            let mut travelled = 0.0;
            while travelled < length {
                if travelled * slope >= surface {
                    return VisClass::Occluded;
                }
                travelled += step;
            }
            if z >= surface {
                VisClass::Occluded
            } else {
                VisClass::Visible
            }
        })
        .collect();
    VisibilityMask::new(*meta, classes)
}

/// Forward-depth gap `|d_v - D|` for every voxel where it is defined.
pub fn frontier_distances(meta: &GridMeta, camera: &CameraModel, depth: &DepthMap) -> Result<Vec<Option<f64>>> {
    check_depth(camera, depth)?;
    Ok((0..meta.num_voxels())
        .into_par_iter()
        .map(|i| {
            frontier_sample(meta, camera, depth, i)
                .filter(|(_, d)| d.is_finite())
                .map(|(d_v, d)| (d_v - d).abs())
        })
        .collect())
}

/// Truncated unsigned distance to the visual frontier.
#[derive(Debug, Clone, PartialEq)]
pub struct UDistanceField {
    pub meta: GridMeta,
    pub values: Vec<f32>,
    pub gamma: f64,
    pub theta: f64,
}

impl UDistanceField {
    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `2 - 2σ(γ·dist)` inside the truncation distance, `0` beyond it.
#[inline]
pub fn udistance_value(dist: f64, gamma: f64, theta: f64) -> f64 {
    if dist < theta {
        2.0 - 2.0 * logistic(gamma * dist)
    } else {
        0.0
    }
}

pub fn compute_udistance(
    meta: &GridMeta,
    camera: &CameraModel,
    depth: &DepthMap,
    gamma: f64,
    theta: f64,
) -> Result<UDistanceField> {
    if !(gamma > 0.0) || !(theta > 0.0) {
        return contract(format!("gamma and theta must be positive, got {gamma}, {theta}"));
    }
    let values = frontier_distances(meta, camera, depth)?
        .into_iter()
        .map(|d| d.map_or(0.0, |d| udistance_value(d, gamma, theta) as f32))
        .collect();
    Ok(UDistanceField { meta: *meta, values, gamma, theta })
}

/// Voxels hit when every pixel with a depth return deposits into exactly one
/// voxel at its measured depth.
pub fn hard_lift_voxels(meta: &GridMeta, camera: &CameraModel, depth: &DepthMap) -> Result<HashSet<usize>> {
    check_depth(camera, depth)?;
    let mut hits = HashSet::new();
    for py in 0..depth.height {
        for px in 0..depth.width {
            let d = depth.at(px, py) as f64;
            if d.is_finite() {
                let p = camera.backproject(px as f64 + 0.5, py as f64 + 0.5, d);
                if let Some(idx) = meta.locate(p) {
                    hits.insert(meta.flat(idx));
                }
            }
        }
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::RigidTransform;

    /// Camera at the origin looking down world +z; grid covers a slab in front.
    fn setup() -> (GridMeta, CameraModel) {
        let meta = GridMeta::new([-4.0, -4.0, 0.0], 0.5, [16, 16, 40]).unwrap();
        let cam = CameraModel::new(20.0, 20.0, 20.0, 20.0, RigidTransform::identity(), (40, 40)).unwrap();
        (meta, cam)
    }

    #[test]
    fn empty_scene_all_in_frustum_visible() {
        let (meta, cam) = setup();
        let depth = DepthMap::filled(40, 40, f32::INFINITY);
        let mask = classify_visibility(&meta, &cam, &depth, 0.0).unwrap();
        for i in 0..meta.num_voxels() {
            let in_view = cam.project_point(meta.center_unchecked(meta.unflat(i))).is_some();
            assert_eq!(mask.classes[i] == VisClass::Visible, in_view);
            assert_eq!(mask.classes[i] == VisClass::OutOfView, !in_view);
        }
    }

    #[test]
    fn wall_splits_at_its_depth() {
        let (meta, cam) = setup();
        let depth = DepthMap::filled(40, 40, 10.0);
        for (theta_d, boundary) in [(0.0, 10.0), (3.5, 13.5)] {
            let mask = classify_visibility(&meta, &cam, &depth, theta_d).unwrap();
            for i in 0..meta.num_voxels() {
                let c = meta.center_unchecked(meta.unflat(i));
                match mask.classes[i] {
                    VisClass::Visible => assert!(c[2] < boundary),
                    VisClass::Occluded => assert!(c[2] >= boundary),
                    VisClass::OutOfView => assert!(cam.project_point(c).is_none()),
                }
            }
            let c = mask.counts();
            assert_eq!(c.iter().sum::<usize>(), meta.num_voxels());
            assert!(c[1] > 0);
        }
    }

    #[test]
    fn oov_only_partition_has_no_occluded() {
        let (meta, cam) = setup();
        let depth = DepthMap::filled(40, 40, 3.0);
        let mask = classify_visibility(&meta, &cam, &depth, f64::INFINITY).unwrap();
        assert_eq!(mask.counts()[1], 0);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let (meta, cam) = setup();
        let depth = DepthMap::filled(39, 40, 1.0);
        assert!(matches!(classify_visibility(&meta, &cam, &depth, 0.0), Err(Error::Contract(_))));
        assert!(classify_visibility(&meta, &cam, &DepthMap::filled(40, 40, 1.0), -1.0).is_err());
    }

    #[test]
    fn oracle_agrees_on_wall() {
        let (meta, cam) = setup();
        let depth = DepthMap::filled(40, 40, 7.3);
        assert_eq!(
            visibility_oracle(&meta, &cam, &depth).unwrap(),
            classify_visibility(&meta, &cam, &depth, 0.0).unwrap()
        );
    }

    #[test]
    fn udistance_closed_form() {
        assert_eq!(udistance_value(0.0, 10.0, 1.0), 1.0);
        assert_eq!(udistance_value(1.0, 10.0, 1.0), 0.0);
        assert_eq!(udistance_value(5.0, 10.0, 1.0), 0.0);
        // 2 - 2/(1+e^-1), evaluated independently with mpmath: 0.537882842739990...
        assert!((udistance_value(0.1, 10.0, 1.0) - 0.537_882_842_739_990).abs() < 1e-12);
    }

    #[test]
    fn udistance_is_shell_around_wall() {
        let (meta, cam) = setup();
        let depth = DepthMap::filled(40, 40, 10.0);
        let field = compute_udistance(&meta, &cam, &depth, DEFAULT_GAMMA, DEFAULT_THETA).unwrap();
        for i in 0..meta.num_voxels() {
            let c = meta.center_unchecked(meta.unflat(i));
            let v = field.values[i];
            assert!((0.0..=1.0).contains(&v));
            if cam.project_point(c).is_some() && (c[2] - 10.0).abs() < 1.0 {
                assert!(v > 0.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        let hard = hard_lift_voxels(&meta, &cam, &depth).unwrap();
        assert!(field.nonzero_count() >= hard.len());
        assert!(compute_udistance(&meta, &cam, &depth, 0.0, 1.0).is_err());
        assert!(compute_udistance(&meta, &cam, &depth, 10.0, -1.0).is_err());
    }

    #[test]
    fn mask_serialization() {
        let (meta, cam) = setup();
        let mask = classify_visibility(&meta, &cam, &DepthMap::filled(40, 40, 5.0), 0.0).unwrap();
        let bytes = mask.to_bytes();
        assert_eq!(&bytes[..4], b"VMSK");
        assert_eq!(VisibilityMask::from_bytes(&bytes).unwrap(), mask);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 3;
        assert!(VisibilityMask::from_bytes(&bad).is_err());
    }
}
