//! Procedural scenes: a ground slab plus axis-aligned boxes, an exact
//! ray-cast renderer (depth and shaded semantic image) and voxelized ground
//! truth.
//!
//! Boxes are snapped to voxel boundaries, so voxelization is exact and the
//! rendered depth agrees with the voxel surfaces.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::grid::io::{load_depth, load_grid, save_depth, save_grid};
use crate::grid::{CameraModel, DepthMap, GridMeta, RigidTransform, VoxelGrid, EMPTY};
use crate::tensor::Tensor;

/// Label of the ground slab.
pub const GROUND: u8 = 1;

/// RGB color per class id (index 0 is the sky / background).
pub const PALETTE: [[u8; 3]; 8] = [
    [20, 20, 30],
    [110, 90, 70],
    [220, 60, 50],
    [60, 180, 80],
    [60, 90, 220],
    [230, 200, 40],
    [180, 70, 200],
    [60, 200, 210],
];

/// Footprint-x, footprint-y and height multipliers per box class.
const CLASS_SHAPES: [[f64; 3]; 6] = [
    [0.6, 0.6, 0.6],
    [0.5, 0.5, 1.6],
    [1.4, 1.2, 0.4],
    [1.0, 1.0, 1.0],
    [1.8, 0.5, 0.8],
    [0.8, 1.6, 1.2],
];

/// Axis-aligned solid with a class id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolidBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u8,
}

impl SolidBox {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    /// Entry parameter and entry axis of the ray `o + t d`, for `t > 0`.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, usize)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] <= self.min[a] || o[a] >= self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut t0, mut t1) = ((self.min[a] - o[a]) / d[a], (self.max[a] - o[a]) / d[a]);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            if t0 > t_near {
                t_near = t0;
                axis = a;
            }
            t_far = t_far.min(t1);
        }
        (t_near <= t_far && t_near > 0.0).then_some((t_near, axis))
    }
}

/// Parameters of the scene distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub base_seed: u64,
    pub meta: GridMeta,
    /// Semantic classes including the ground (ids `1..=num_classes`).
    pub num_classes: usize,
    /// Inclusive range of box counts.
    pub box_count: (usize, usize),
    /// Base box edge length range, meters, before the per-class shape prior.
    pub box_size: (f64, f64),
    /// Closest and farthest horizontal distance of box centers from the camera.
    pub box_range: (f64, f64),
    pub image_size: (usize, usize),
    pub hfov_deg: f64,
    pub camera_height: (f64, f64),
    /// Maximum absolute yaw, degrees.
    pub yaw_deg: f64,
    /// Downward pitch range, degrees.
    pub pitch_deg: (f64, f64),
}

impl SceneSpec {
    /// 64x64x16 grid at 0.2 m, 128x96 images.
    pub fn desk() -> Self {
        Self {
            base_seed: 0,
            meta: GridMeta::desk(),
            num_classes: 6,
            box_count: (3, 8),
            box_size: (0.6, 1.2),
            box_range: (1.5, 10.0),
            image_size: (128, 96),
            hfov_deg: 70.0,
            camera_height: (1.4, 1.8),
            yaw_deg: 15.0,
            pitch_deg: (6.0, 14.0),
        }
    }

    /// 32x32x8 grid at 0.2 m, 64x48 images; the benchmark scale.
    pub fn bench() -> Self {
        Self {
            base_seed: 0,
            meta: GridMeta::new([0.0, -3.2, -0.4], 0.2, [32, 32, 8]).expect("valid bench grid"),
            num_classes: 6,
            box_count: (2, 5),
            box_size: (0.4, 0.8),
            box_range: (1.2, 5.2),
            image_size: (64, 48),
            hfov_deg: 70.0,
            camera_height: (1.0, 1.3),
            yaw_deg: 12.0,
            pitch_deg: (8.0, 16.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.num_classes >= 2
            && self.num_classes < PALETTE.len()
            && self.box_count.0 <= self.box_count.1
            && 0.0 < self.box_size.0
            && self.box_size.0 <= self.box_size.1
            && 0.0 < self.box_range.0
            && self.box_range.0 <= self.box_range.1
            && self.camera_height.0 <= self.camera_height.1
            && self.pitch_deg.0 <= self.pitch_deg.1
            && self.hfov_deg > 0.0
            && self.hfov_deg < 180.0
            && self.meta.origin[2] < 0.0;
        if !ok {
            return contract("scene spec ranges are infeasible");
        }
        let top = self.meta.origin[2] as f64 + self.meta.extent()[2];
        if self.camera_height.0 <= 0.0 || top <= 0.0 {
            return contract("camera and grid must extend above the ground plane");
        }
        Ok(())
    }
}

/// A generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub meta: GridMeta,
    pub boxes: Vec<SolidBox>,
    /// Top of the ground slab (world z).
    pub ground_height: f64,
    pub camera: CameraModel,
}

impl Scene {
    /// The ground slab spans the grid footprint from the grid floor to
    /// `ground_height`.
    pub fn ground(&self) -> SolidBox {
        let e = self.meta.extent();
        let o = self.meta.origin.map(|v| v as f64);
        SolidBox { min: o, max: [o[0] + e[0], o[1] + e[1], self.ground_height], class: GROUND }
    }

    /// Ground first, then boxes in generation order (later wins).
    pub fn solids(&self) -> Vec<SolidBox> {
        let mut s = vec![self.ground()];
        s.extend_from_slice(&self.boxes);
        s
    }
}

fn box_in_frustum(b: &SolidBox, meta: &GridMeta, camera: &CameraModel) -> bool {
    let vs = meta.voxel_size as f64;
    let o = meta.origin.map(|v| v as f64);
    let lo: Vec<usize> = (0..3).map(|a| ((b.min[a] - o[a]) / vs).round() as usize).collect();
    let hi: Vec<usize> = (0..3).map(|a| ((b.max[a] - o[a]) / vs).round() as usize).collect();
    for iz in lo[2]..hi[2] {
        for iy in lo[1]..hi[1] {
            for ix in lo[0]..hi[0] {
                if camera.project_point(meta.center_unchecked([ix, iy, iz])).is_some() {
                    return true;
                }
            }
        }
    }
    false
}

/// Snaps a box given by center and size to voxel boundaries inside the grid,
/// standing on the ground. `None` when it collapses.
fn snapped_box(meta: &GridMeta, ground_height: f64, center: [f64; 2], size: [f64; 3], class: u8) -> Option<SolidBox> {
    let vs = meta.voxel_size as f64;
    let o = meta.origin.map(|v| v as f64);
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for a in 0..2 {
        let n = ((size[a] / vs).round() as i64).max(1);
        let i0 = ((center[a] - size[a] / 2.0 - o[a]) / vs).round() as i64;
        let i0 = i0.clamp(0, meta.dims[a] as i64 - 1);
        let i1 = (i0 + n).min(meta.dims[a] as i64);
        min[a] = o[a] + i0 as f64 * vs;
        max[a] = o[a] + i1 as f64 * vs;
    }
    let g = ((ground_height - o[2]) / vs).round() as i64;
    let n = ((size[2] / vs).round() as i64).max(1);
    let top = (g + n).min(meta.dims[2] as i64);
    if top <= g {
        return None;
    }
    min[2] = o[2] + g as f64 * vs;
    max[2] = o[2] + top as f64 * vs;
    Some(SolidBox { min, max, class })
}

/// Deterministic scene for `(spec, seed)`. When `spec` asks for boxes, at
/// least one of them intersects the camera frustum.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed);
    rng.set_stream(seed);
    let meta = spec.meta;
    let ground_height = 0.0;
    let o = meta.origin.map(|v| v as f64);
    let e = meta.extent();

    let height = rng.gen_range(spec.camera_height.0..=spec.camera_height.1);
    let yaw = rng.gen_range(-spec.yaw_deg..=spec.yaw_deg).to_radians();
    let pitch = rng.gen_range(spec.pitch_deg.0..=spec.pitch_deg.1).to_radians();
    let eye = [o[0] + 0.1, o[1] + e[1] / 2.0 + rng.gen_range(-0.3..=0.3), height];
    let forward = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin()];
    let camera = CameraModel::looking_along(eye, forward, [0.0, 0.0, 1.0], spec.hfov_deg, spec.image_size)?;

    let count = rng.gen_range(spec.box_count.0..=spec.box_count.1);
    let half_fov = (spec.hfov_deg / 2.0).to_radians() * 0.9;
    let mut boxes = Vec::with_capacity(count);
    let mut any_in_view = false;
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > 1000 {
            return contract("could not place boxes inside the grid");
        }
        let class = rng.gen_range(2..=spec.num_classes as u8);
        let shape = CLASS_SHAPES[(class as usize - 2) % CLASS_SHAPES.len()];
        let base = rng.gen_range(spec.box_size.0..=spec.box_size.1);
        let size = [base * shape[0], base * shape[1], base * shape[2]];
        let phi = yaw + rng.gen_range(-half_fov..=half_fov);
        let r = rng.gen_range(spec.box_range.0..=spec.box_range.1);
        let center = [eye[0] + r * phi.cos(), eye[1] + r * phi.sin()];
        let Some(b) = snapped_box(&meta, ground_height, center, size, class) else { continue };
        // keep the camera outside every solid
        if b.min[0] <= eye[0] + 0.4 {
            continue;
        }
        let seen = box_in_frustum(&b, &meta, &camera);
        // the last slot is reserved for a visible box if none was seen yet
        if boxes.len() + 1 == count && !any_in_view && !seen {
            continue;
        }
        any_in_view |= seen;
        boxes.push(b);
    }
    Ok(Scene { seed, meta, boxes, ground_height, camera })
}

/// Packed 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// `[3, 1, H, W]` in `[0, 1]`, the layout the image encoder consumes.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut t = Tensor::zeros(&[3, 1, self.height, self.width]);
        for p in 0..hw {
            for c in 0..3 {
                t.data[c * hw + p] = self.data[3 * p + c] as f32 / 255.0;
            }
        }
        t
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let fmt = |d: &str| Error::Format { field: "ppm", detail: d.to_string() };
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fmt("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fmt("header is not ASCII"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(fmt("expected binary P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| fmt("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| fmt("bad height"))?;
        let data = bytes.get(pos + 1..).ok_or_else(|| fmt("missing payload"))?;
        if data.len() != 3 * width * height {
            return Err(fmt("payload length does not match the header"));
        }
        Ok(Self { width, height, data: data.to_vec() })
    }
}

/// Ray-casts every pixel center against the scene solids. Depth is the
/// forward distance of the nearest hit, `+inf` for sky; the image colors
/// each pixel by the hit class, shaded by the face orientation.
pub fn render_depth(scene: &Scene, camera: &CameraModel) -> (DepthMap, RgbImage) {
    let (w, h) = camera.image_size;
    let solids = scene.solids();
    let origin = camera.center_world();
    let forward = camera.forward_world();
    let pixels: Vec<(f32, [u8; 3])> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let (u, v) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            let d = camera.ray_direction_world(u, v);
            let mut best: Option<(f64, usize, u8)> = None;
            for s in &solids {
                if let Some((t, axis)) = s.intersect(origin, d) {
                    if best.map_or(true, |(bt, _, _)| t < bt) {
                        best = Some((t, axis, s.class));
                    }
                }
            }
            match best {
                None => (f32::INFINITY, PALETTE[0]),
                Some((t, axis, class)) => {
                    let depth = t * (d[0] * forward[0] + d[1] * forward[1] + d[2] * forward[2]);
                    let shade = [0.8, 0.65, 1.0][axis];
                    let c = PALETTE[class as usize].map(|v| (v as f64 * shade).round() as u8);
                    (depth as f32, c)
                }
            }
        })
        .collect();
    let values = pixels.iter().map(|p| p.0).collect();
    let data = pixels.iter().flat_map(|p| p.1).collect();
    (DepthMap { width: w, height: h, values }, RgbImage { width: w, height: h, data })
}

/// Labels each voxel by the last solid containing its center.
pub fn voxelize_scene(scene: &Scene, meta: &GridMeta) -> VoxelGrid {
    let solids = scene.solids();
    let labels = (0..meta.num_voxels())
        .into_par_iter()
        .map(|i| {
            let c = meta.center_unchecked(meta.unflat(i));
            solids.iter().rev().find(|s| s.contains(c)).map_or(EMPTY, |s| s.class)
        })
        .collect();
    VoxelGrid { meta: *meta, labels }
}

/// Systematic error of a simulated monocular depth estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthError {
    /// Per-scene scale factor drawn from `[1 - scale, 1 + scale]`.
    pub scale: f64,
    /// Amplitude (meters) of an offset that varies smoothly across the image.
    pub offset: f64,
    /// Independent per-pixel relative error, uniform in `[-jitter, jitter]`.
    pub jitter: f64,
}

impl DepthError {
    pub const NONE: DepthError = DepthError { scale: 0.0, offset: 0.0, jitter: 0.0 };
}

impl Default for DepthError {
    fn default() -> Self {
        Self { scale: 0.0, offset: 0.0, jitter: 0.1 }
    }
}

/// Distorts an exact depth map the way an estimator would: one scale error
/// for the whole scene, a low-frequency offset and per-pixel jitter. Sky
/// stays infinite and depths stay positive. Deterministic in `seed`.
pub fn estimate_depth(depth: &DepthMap, err: &DepthError, seed: u64) -> DepthMap {
    if *err == DepthError::NONE {
        return depth.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_7074_685f_6572);
    let scale = 1.0 + rng.gen_range(-1.0..=1.0) * err.scale;
    let (fx, fy) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (w, h) = (depth.width, depth.height);
    let values = depth
        .values
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if !d.is_finite() {
                return d;
            }
            let (u, v) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            let off = err.offset * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            let jit = 1.0 + err.jitter * rng.gen_range(-1.0..=1.0);
            ((d as f64 * scale * jit + off).max(0.05)) as f32
        })
        .collect();
    DepthMap { width: w, height: h, values }
}

/// Everything the pipeline needs about one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub camera: CameraModel,
    pub depth: DepthMap,
    pub image: RgbImage,
    pub grid: VoxelGrid,
}

pub fn make_sample(spec: &SceneSpec, seed: u64) -> Result<Sample> {
    let scene = generate_scene(spec, seed)?;
    let (depth, image) = render_depth(&scene, &scene.camera);
    let grid = voxelize_scene(&scene, &spec.meta);
    Ok(Sample { seed, camera: scene.camera, depth, image, grid })
}

/// Samples for `seeds`, generated in parallel, in seed order.
pub fn make_corpus(spec: &SceneSpec, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<Sample>> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    seeds.into_par_iter().map(|s| make_sample(spec, s)).collect()
}

// ---------------------------------------------------------------------------
// Dataset directories

pub fn camera_to_text(camera: &CameraModel) -> String {
    let r = camera.cam_from_world.rotation;
    let t = camera.cam_from_world.translation;
    let mut s = String::new();
    let _ = writeln!(s, "fx={}", camera.fx);
    let _ = writeln!(s, "fy={}", camera.fy);
    let _ = writeln!(s, "cx={}", camera.cx);
    let _ = writeln!(s, "cy={}", camera.cy);
    let pose: Vec<String> = (0..3)
        .flat_map(|i| [r[i][0], r[i][1], r[i][2], t[i]])
        .map(|v| v.to_string())
        .collect();
    let _ = writeln!(s, "pose={}", pose.join(" "));
    let _ = writeln!(s, "width={}", camera.image_size.0);
    let _ = writeln!(s, "height={}", camera.image_size.1);
    s
}

pub fn camera_from_text(text: &str) -> Result<CameraModel> {
    let get = |key: &'static str| -> Result<String> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_string())
            .ok_or(Error::Format { field: key, detail: "missing".into() })
    };
    fn num<T: std::str::FromStr>(field: &'static str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Format { field, detail: format!("cannot parse `{v}`") })
    }
    let fx = num("fx", &get("fx")?)?;
    let fy = num("fy", &get("fy")?)?;
    let cx = num("cx", &get("cx")?)?;
    let cy = num("cy", &get("cy")?)?;
    let pose: Vec<f64> = get("pose")?.split_whitespace().map(|v| num("pose", v)).collect::<Result<_>>()?;
    if pose.len() != 12 {
        return Err(Error::Format { field: "pose", detail: format!("expected 12 numbers, got {}", pose.len()) });
    }
    let width = num("width", &get("width")?)?;
    let height = num("height", &get("height")?)?;
    let mut rotation = [[0.0; 3]; 3];
    let mut translation = [0.0; 3];
    for i in 0..3 {
        rotation[i] = [pose[4 * i], pose[4 * i + 1], pose[4 * i + 2]];
        translation[i] = pose[4 * i + 3];
    }
    CameraModel::new(fx, fy, cx, cy, RigidTransform { rotation, translation }, (width, height))
}

pub fn scene_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("scene_{seed}"))
}

/// Writes `grid.vgrd`, `depth.dpth`, `image.ppm` and `camera.txt`.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<PathBuf> {
    let dir = scene_dir(root, sample.seed);
    fs::create_dir_all(&dir)?;
    save_grid(&sample.grid, dir.join("grid.vgrd"))?;
    save_depth(&sample.depth, dir.join("depth.dpth"))?;
    fs::write(dir.join("image.ppm"), sample.image.to_ppm())?;
    fs::write(dir.join("camera.txt"), camera_to_text(&sample.camera))?;
    Ok(dir)
}

pub fn load_sample(dir: &Path) -> Result<Sample> {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let seed = name
        .strip_prefix("scene_")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format { field: "scene directory", detail: format!("`{name}` is not scene_<seed>") })?;
    let camera = camera_from_text(&fs::read_to_string(dir.join("camera.txt"))?)?;
    let depth = load_depth(dir.join("depth.dpth"))?;
    let image = RgbImage::from_ppm(&fs::read(dir.join("image.ppm"))?)?;
    let grid = load_grid(dir.join("grid.vgrd"))?;
    if (depth.width, depth.height) != camera.image_size || (image.width, image.height) != camera.image_size {
        return contract(format!("{}: image, depth and camera sizes disagree", dir.display()));
    }
    Ok(Sample { seed, camera, depth, image, grid })
}

/// Loads every `scene_<seed>` directory under `root`, ordered by seed.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let mut dirs: Vec<(u64, PathBuf)> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_prefix("scene_").and_then(|s| s.parse().ok()).map(|s| (s, e.path()))
        })
        .collect();
    dirs.sort();
    dirs.iter().map(|(_, d)| load_sample(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::VoxelGrid;

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec::bench();
        assert_eq!(generate_scene(&spec, 3).unwrap(), generate_scene(&spec, 3).unwrap());
        assert_ne!(generate_scene(&spec, 3).unwrap(), generate_scene(&spec, 4).unwrap());
        assert_eq!(make_sample(&spec, 5).unwrap(), make_sample(&spec, 5).unwrap());
    }

    #[test]
    fn depth_error_is_bounded_and_deterministic() {
        let sample = make_sample(&SceneSpec::bench(), 2).unwrap();
        assert_eq!(estimate_depth(&sample.depth, &DepthError::NONE, 2), sample.depth);
        let err = DepthError::default();
        let est = estimate_depth(&sample.depth, &err, 2);
        assert_eq!(est, estimate_depth(&sample.depth, &err, 2));
        assert_ne!(est, estimate_depth(&sample.depth, &err, 3));
        for (&e, &d) in est.values.iter().zip(&sample.depth.values) {
            if d.is_finite() {
                let bound = d as f64 * ((1.0 + err.scale) * (1.0 + err.jitter) - 1.0) + err.offset + 1e-4;
                assert!(e > 0.0 && ((e - d) as f64).abs() <= bound, "{d} -> {e}");
            } else {
                assert_eq!(e, d);
            }
        }
    }

    #[test]
    fn no_boxes_means_ground_only() {
        let spec = SceneSpec { box_count: (0, 0), ..SceneSpec::bench() };
        let scene = generate_scene(&spec, 1).unwrap();
        assert!(scene.boxes.is_empty());
        let grid = voxelize_scene(&scene, &spec.meta);
        for (i, &l) in grid.labels.iter().enumerate() {
            let z = spec.meta.unflat(i)[2];
            assert_eq!(l, if z < 2 { GROUND } else { EMPTY });
        }
    }

    #[test]
    fn every_scene_sees_a_box() {
        for spec in [SceneSpec::bench(), SceneSpec::desk()] {
            for seed in 0..200 {
                let scene = generate_scene(&spec, seed).unwrap();
                assert!(scene.boxes.iter().any(|b| box_in_frustum(b, &spec.meta, &scene.camera)), "seed {seed}");
            }
        }
    }

    #[test]
    fn aligned_box_has_27_voxels() {
        let meta = GridMeta::new([0.0; 3], 1.0, [8, 8, 8]).unwrap();
        let camera = CameraModel::new(10.0, 10.0, 5.0, 5.0, RigidTransform::identity(), (10, 10)).unwrap();
        let scene = Scene {
            seed: 0,
            meta,
            boxes: vec![SolidBox { min: [2.0; 3], max: [5.0; 3], class: 3 }],
            ground_height: 0.0,
            camera,
        };
        let grid = voxelize_scene(&scene, &meta);
        assert_eq!(grid.labels.iter().filter(|&&l| l == 3).count(), 27);
        assert_eq!(grid.labels.iter().filter(|&&l| l != 0).count(), 27);
    }

    #[test]
    fn fronto_parallel_face_and_sky() {
        let meta = GridMeta::new([-10.0, -10.0, -1.0], 0.5, [40, 40, 40]).unwrap();
        let camera = CameraModel::new(20.0, 20.0, 10.0, 10.0, RigidTransform::identity(), (20, 20)).unwrap();
        let scene = Scene {
            seed: 0,
            meta,
            boxes: vec![SolidBox { min: [-1.0, -1.0, 5.0], max: [1.0, 1.0, 6.0], class: 2 }],
            ground_height: -0.5,
            camera,
        };
        let (depth, img) = render_depth(&scene, &camera);
        // center pixels see the face at z = 5
        assert_eq!(depth.at(10, 10), 5.0);
        assert_eq!(depth.at(9, 9), 5.0);
        // the ground slab lies behind this camera, so a ray missing the box sees sky
        assert!(depth.at(0, 0).is_infinite());
        assert_eq!(&img.data[0..3], &PALETTE[0]);
    }

    #[test]
    fn depth_is_nearest_hit() {
        let spec = SceneSpec::bench();
        let scene = generate_scene(&spec, 9).unwrap();
        let (depth, _) = render_depth(&scene, &scene.camera);
        let o = scene.camera.center_world();
        let f = scene.camera.forward_world();
        for v in 0..depth.height {
            for u in 0..depth.width {
                let d = scene.camera.ray_direction_world(u as f64 + 0.5, v as f64 + 0.5);
                let dot = d[0] * f[0] + d[1] * f[1] + d[2] * f[2];
                for s in scene.solids() {
                    if let Some((t, _)) = s.intersect(o, d) {
                        assert!(depth.at(u, v) as f64 <= t * dot + 1e-4);
                    }
                }
            }
        }
    }

    /// Voxel-by-voxel traversal (Amanatides-Woo); returns the ray
    /// parameter where the first occupied voxel is entered.
    fn first_occupied(grid: &VoxelGrid, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let m = &grid.meta;
        let vs = m.voxel_size as f64;
        let rel: Vec<f64> = (0..3).map(|a| (o[a] - m.origin[a] as f64) / vs).collect();
        let mut cell: Vec<i64> = rel.iter().map(|r| r.floor() as i64).collect();
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let mut step = [0i64; 3];
        for a in 0..3 {
            if d[a] > 0.0 {
                step[a] = 1;
                t_max[a] = ((cell[a] + 1) as f64 - rel[a]) * vs / d[a];
                t_delta[a] = vs / d[a];
            } else if d[a] < 0.0 {
                step[a] = -1;
                t_max[a] = (rel[a] - cell[a] as f64) * vs / -d[a];
                t_delta[a] = vs / -d[a];
            }
        }
        let mut t_enter = 0.0;
        while t_enter < 40.0 {
            let inside = (0..3).all(|a| cell[a] >= 0 && (cell[a] as usize) < m.dims[a]);
            if inside && grid.get([cell[0] as usize, cell[1] as usize, cell[2] as usize]) != EMPTY {
                return Some(t_enter);
            }
            let a = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).unwrap();
            t_enter = t_max[a];
            t_max[a] += t_delta[a];
            cell[a] += step[a];
        }
        None
    }

    #[test]
    fn depth_agrees_with_voxel_surfaces() {
        let spec = SceneSpec::bench();
        for seed in 0..5 {
            let s = make_sample(&spec, seed).unwrap();
            let cam = s.camera;
            let (o, f) = (cam.center_world(), cam.forward_world());
            let vs = spec.meta.voxel_size as f64;
            for v in 0..s.depth.height {
                for u in 0..s.depth.width {
                    let d = cam.ray_direction_world(u as f64 + 0.5, v as f64 + 0.5);
                    let dot = d[0] * f[0] + d[1] * f[1] + d[2] * f[2];
                    let hit = first_occupied(&s.grid, o, d).map(|t| t * dot);
                    let rendered = s.depth.at(u, v) as f64;
                    match hit {
                        Some(h) => assert!((h - rendered).abs() <= vs, "seed {seed} pixel ({u},{v}): {h} vs {rendered}"),
                        None if rendered.is_infinite() => {}
                        None => {
                            // only a grazing hit on the outer rim of the grid may escape the march
                            let t = rendered / dot;
                            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                            let c = spec.meta.world_to_voxel_coords(p);
                            let rim = (0..3).any(|a| c[a] < 0.0 || c[a] > spec.meta.dims[a] as f64 - 1.0);
                            assert!(rim, "seed {seed} pixel ({u},{v}) rendered {rendered}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec::bench();
        let s = make_sample(&spec, 12).unwrap();
        save_sample(tmp.path(), &s).unwrap();
        let back = load_dataset(tmp.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].grid, s.grid);
        assert_eq!(back[0].depth, s.depth);
        assert_eq!(back[0].image, s.image);
        assert_eq!(back[0].camera, s.camera);
        let _: &VoxelGrid = &back[0].grid;
    }

    #[test]
    fn camera_text_rejects_short_pose() {
        let cam = make_sample(&SceneSpec::bench(), 0).unwrap().camera;
        let text = camera_to_text(&cam).replace("pose=", "pose=1 ");
        assert!(camera_from_text(&text).is_err());
        let ok = camera_to_text(&cam);
        assert_eq!(camera_from_text(&ok).unwrap(), cam);
    }
}
