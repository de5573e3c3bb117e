use super::GridMeta;
use crate::error::{contract, Result};

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Applies only the rotation.
    #[inline]
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let mut inv_t = [0.0; 3];
        for (i, out) in inv_t.iter_mut().enumerate() {
            *out = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Self { rotation: rt, translation: inv_t }
    }

    /// Orthonormal with determinant +1, each to within `tol`.
    pub fn is_proper_rotation(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - 1.0).abs() <= tol
    }
}

/// Image-plane location and forward depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelRect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// Rectangle scaled by `1 / stride`, e.g. into a downsampled feature map.
    pub fn scaled(&self, inv_stride: f64) -> Self {
        Self {
            x0: self.x0 * inv_stride,
            y0: self.y0 * inv_stride,
            x1: self.x1 * inv_stride,
            y1: self.y1 * inv_stride,
        }
    }
}

/// Pinhole camera. Camera frame: x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_from_world: RigidTransform,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        cam_from_world: RigidTransform,
        image_size: (usize, usize),
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return contract(format!("focal lengths must be positive, got fx={fx} fy={fy}"));
        }
        if !cam_from_world.is_proper_rotation(1e-6) {
            return contract("camera rotation is not orthonormal with determinant +1");
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return contract("image size must be non-zero");
        }
        Ok(Self { fx, fy, cx, cy, cam_from_world, image_size })
    }

    /// Camera at `eye` looking along `forward`, with `up` fixing the roll.
    /// Principal point at the image center, horizontal field of view `hfov_deg`.
    pub fn looking_along(
        eye: [f64; 3],
        forward: [f64; 3],
        up: [f64; 3],
        hfov_deg: f64,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let f = normalize(forward);
        let right = normalize(cross(f, up));
        let down = cross(f, right);
        let rotation = [right, down, f];
        let rt = RigidTransform { rotation, translation: [0.0; 3] };
        let t = rt.rotate(eye);
        let cam_from_world = RigidTransform { rotation, translation: [-t[0], -t[1], -t[2]] };
        let (w, h) = image_size;
        let focal = w as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(focal, focal, w as f64 / 2.0, h as f64 / 2.0, cam_from_world, image_size)
    }

    pub fn width(&self) -> usize {
        self.image_size.0
    }

    pub fn height(&self) -> usize {
        self.image_size.1
    }

    /// Camera center in world coordinates.
    pub fn center_world(&self) -> [f64; 3] {
        self.cam_from_world.inverse().translation
    }

    /// Optical axis in world coordinates.
    pub fn forward_world(&self) -> [f64; 3] {
        self.cam_from_world.rotation[2]
    }

    #[inline]
    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        self.cam_from_world.apply(p)
    }

    /// Projects a camera-frame point without any field-of-view test.
    #[inline]
    pub fn project_camera_point(&self, pc: [f64; 3]) -> Projected {
        Projected {
            x: self.fx * pc[0] / pc[2] + self.cx,
            y: self.fy * pc[1] / pc[2] + self.cy,
            depth: pc[2],
        }
    }

    #[inline]
    pub fn in_image(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.image_size.0 as f64 && y < self.image_size.1 as f64
    }

    /// Projects a world point; `None` when behind the camera or off the image.
    #[inline]
    pub fn project_point(&self, p: [f64; 3]) -> Option<Projected> {
        let pc = self.world_to_camera(p);
        if pc[2] <= 0.0 {
            return None;
        }
        let proj = self.project_camera_point(pc);
        self.in_image(proj.x, proj.y).then_some(proj)
    }

    /// Projects the center of a voxel; `None` is the out-of-view marker.
    pub fn project_voxel(&self, meta: &GridMeta, index: [usize; 3]) -> Result<Option<Projected>> {
        let c = meta.voxel_center_world(index)?;
        Ok(self.project_point(c))
    }

    /// Tight rectangle around the projected voxel corners, clipped to the
    /// image. Corners behind the camera are dropped; the rectangle is widened
    /// to include the projected center when that is in view.
    pub fn project_voxel_bbox(&self, meta: &GridMeta, index: [usize; 3]) -> Result<Option<PixelRect>> {
        meta.checked_flat(index)?;
        Ok(self.voxel_bbox_unchecked(meta, index))
    }

    pub(crate) fn voxel_bbox_unchecked(&self, meta: &GridMeta, index: [usize; 3]) -> Option<PixelRect> {
        let mut rect = PixelRect {
            x0: f64::INFINITY,
            y0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y1: f64::NEG_INFINITY,
        };
        let mut any = false;
        let mut extend = |x: f64, y: f64| {
            rect.x0 = rect.x0.min(x);
            rect.y0 = rect.y0.min(y);
            rect.x1 = rect.x1.max(x);
            rect.y1 = rect.y1.max(y);
        };
        for corner in meta.voxel_corners(index) {
            let pc = self.world_to_camera(corner);
            if pc[2] > 0.0 {
                let p = self.project_camera_point(pc);
                extend(p.x, p.y);
                any = true;
            }
        }
        if !any {
            return None;
        }
        if let Some(p) = self.project_point(meta.center_unchecked(index)) {
            extend(p.x, p.y);
        }
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let clipped = PixelRect {
            x0: rect.x0.clamp(0.0, w),
            y0: rect.y0.clamp(0.0, h),
            x1: rect.x1.clamp(0.0, w),
            y1: rect.y1.clamp(0.0, h),
        };
        (clipped.x1 > clipped.x0 && clipped.y1 > clipped.y0).then_some(clipped)
    }

    /// World point seen at pixel coordinates `(x, y)` with forward depth `depth`.
    pub fn backproject(&self, x: f64, y: f64, depth: f64) -> [f64; 3] {
        let pc = [(x - self.cx) / self.fx * depth, (y - self.cy) / self.fy * depth, depth];
        self.cam_from_world.inverse().apply(pc)
    }

    /// Unit ray direction (world frame) through image coordinates `(x, y)`.
    pub fn ray_direction_world(&self, x: f64, y: f64) -> [f64; 3] {
        let d = [(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0];
        normalize(self.cam_from_world.inverse().rotate(d))
    }
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(w: usize, h: usize) -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, RigidTransform::identity(), (w, h)).unwrap()
    }

    /// Grid of one-meter voxels whose voxel (0,0,0) is centered at `center`.
    fn unit_meta_at(center: [f64; 3]) -> GridMeta {
        GridMeta::new(
            [(center[0] - 0.5) as f32, (center[1] - 0.5) as f32, (center[2] - 0.5) as f32],
            1.0,
            [1, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn principal_point_projection() {
        let cam = identity_cam(100, 100);
        let meta = unit_meta_at([0.0, 0.0, 10.0]);
        let p = cam.project_voxel(&meta, [0, 0, 0]).unwrap().unwrap();
        assert!((p.x - 50.0).abs() < 1e-9 && (p.y - 50.0).abs() < 1e-9 && (p.depth - 10.0).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_out_of_view() {
        let cam = identity_cam(100, 100);
        let meta = unit_meta_at([0.0, 0.0, -1.0]);
        assert_eq!(cam.project_voxel(&meta, [0, 0, 0]).unwrap(), None);
    }

    #[test]
    fn off_axis_pinhole() {
        // Independent evaluation: 100 * 1 / 10 + 50 = 60.
        let cam = identity_cam(100, 100);
        let meta = unit_meta_at([1.0, 0.0, 10.0]);
        let p = cam.project_voxel(&meta, [0, 0, 0]).unwrap().unwrap();
        assert!((p.x - 60.0).abs() < 1e-9);
    }

    #[test]
    fn bbox_symmetric_about_principal_point() {
        let cam = identity_cam(100, 100);
        let meta = unit_meta_at([0.0, 0.0, 20.0]);
        let r = cam.project_voxel_bbox(&meta, [0, 0, 0]).unwrap().unwrap();
        assert!(((r.x0 + r.x1) / 2.0 - 50.0).abs() < 1e-9);
        assert!(((r.y0 + r.y1) / 2.0 - 50.0).abs() < 1e-9);
        assert!(r.contains(50.0, 50.0));
    }

    #[test]
    fn bbox_with_corner_behind_camera() {
        // Voxel spanning z in [-0.4, 0.6]: the four near corners are behind
        // the camera. Compare against projecting the corners one by one.
        let cam = identity_cam(100, 100);
        let meta = GridMeta::new([0.2, -0.3, -0.4], 1.0, [1, 1, 1]).unwrap();
        let corners = meta.voxel_corners([0, 0, 0]);
        let in_front: Vec<_> = corners
            .iter()
            .map(|&c| cam.world_to_camera(c))
            .filter(|pc| pc[2] > 0.0)
            .collect();
        assert!(in_front.len() < 8 && !in_front.is_empty());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for pc in &in_front {
            let x = cam.fx * pc[0] / pc[2] + cam.cx;
            let y = cam.fy * pc[1] / pc[2] + cam.cy;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let want = PixelRect {
            x0: x0.clamp(0.0, 100.0),
            y0: y0.clamp(0.0, 100.0),
            x1: x1.clamp(0.0, 100.0),
            y1: y1.clamp(0.0, 100.0),
        };
        let got = cam.project_voxel_bbox(&meta, [0, 0, 0]).unwrap().unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn bbox_left_of_frustum_is_out_of_view() {
        let cam = identity_cam(100, 100);
        let meta = unit_meta_at([-50.0, 0.0, 10.0]);
        assert_eq!(cam.project_voxel_bbox(&meta, [0, 0, 0]).unwrap(), None);
    }

    #[test]
    fn looking_along_builds_proper_rotation() {
        let cam = CameraModel::looking_along([0.0, 0.0, 1.6], [1.0, 0.2, -0.1], [0.0, 0.0, 1.0], 90.0, (128, 96)).unwrap();
        assert!(cam.cam_from_world.is_proper_rotation(1e-12));
        let c = cam.center_world();
        assert!((c[2] - 1.6).abs() < 1e-12);
        // A point straight ahead projects to the principal point.
        let f = cam.forward_world();
        let p = cam.project_point([c[0] + 5.0 * f[0], c[1] + 5.0 * f[1], c[2] + 5.0 * f[2]]).unwrap();
        assert!((p.x - 64.0).abs() < 1e-9 && (p.y - 48.0).abs() < 1e-9 && (p.depth - 5.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_improper_rotation() {
        let mut t = RigidTransform::identity();
        t.rotation[2][2] = -1.0;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, t, (4, 4)).is_err());
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, RigidTransform::identity(), (4, 4)).is_err());
    }
}
