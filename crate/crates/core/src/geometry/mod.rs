//! Coordinate frames and the frustum-to-voxel index map.
//!
//! Frames: pixel (u right, v down), camera (x right, y down, z forward) and
//! ego (x forward, y left, z up). A pixel `(u, v)` at candidate depth `d` sits
//! at camera point `K⁻¹ · (u·d, v·d, d)`, so `d` is the camera-frame z depth.
//! All geometry is computed in `f64`.

mod cache;
mod config;

pub use cache::{read_voxel_coords, voxel_coords_from_bytes, voxel_coords_to_bytes, write_voxel_coords};
pub use config::{CameraConfig, GeometryConfig, GridConfig};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array4, Array5, Zip};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixels (no skew).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::SingularIntrinsics { fx, fy });
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("intrinsics", "non-finite principal point"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics for a `width × height` grid with the given horizontal field
    /// of view, square pixels and a centred principal point.
    pub fn from_fov(width: usize, height: usize, hfov: f64) -> Self {
        let f = width as f64 / 2.0 / (hfov / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let structural = [m[(0, 1)], m[(1, 0)], m[(2, 0)], m[(2, 1)]];
        if structural.iter().any(|v| *v != 0.0) || m[(2, 2)] != 1.0 {
            return Err(Error::invalid(
                "intrinsics",
                "expected [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]",
            ));
        }
        Self::new(m[(0, 0)], m[(1, 1)], m[(0, 2)], m[(1, 2)])
    }

    fn check(&self) -> Result<()> {
        if self.fx == 0.0 || self.fy == 0.0 || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::SingularIntrinsics {
                fx: self.fx,
                fy: self.fy,
            });
        }
        Ok(())
    }

    /// `K⁻¹ · (u·d, v·d, d)`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        Vector3::new(
            (u * d - self.cx * d) / self.fx,
            (v * d - self.cy * d) / self.fy,
            d,
        )
    }
}

/// Rotation plus translation: `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates `RᵀR = I` and `det R = +1` within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(
                "rotation",
                format!("not orthonormal (max |RᵀR - I| = {err:e})"),
            ));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid("rotation", format!("determinant {det} != 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation", "non-finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    /// Row-major 4×4 homogeneous matrix; the last row must be `[0, 0, 0, 1]`.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::invalid("extrinsics", "last row must be [0, 0, 0, 1]"));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vector3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// One camera: intrinsics and the camera→ego extrinsic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub cam_to_ego: RigidTransform,
}

impl Camera {
    /// A camera at `position` (ego frame) looking horizontally along `yaw`.
    pub fn looking_along(intrinsics: Intrinsics, yaw: f64, position: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let forward = Vector3::new(c, s, 0.0);
        let right = Vector3::new(s, -c, 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self {
            intrinsics,
            cam_to_ego: RigidTransform {
                rotation,
                translation: position,
            },
        }
    }
}

/// `N` cameras sharing one `H × W` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub image_h: usize,
    pub image_w: usize,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, image_h: usize, image_w: usize) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("rig", "at least one camera is required"));
        }
        if image_h == 0 || image_w == 0 {
            return Err(Error::invalid("rig", "image dimensions must be positive"));
        }
        Ok(Self {
            cameras,
            image_h,
            image_w,
        })
    }

    /// `n` cameras at equal yaw increments, mounted `height` metres above the
    /// ego origin, each with a 70° horizontal field of view.
    pub fn surround(n: usize, image_h: usize, image_w: usize, height: f64) -> Result<Self> {
        let intrinsics = Intrinsics::from_fov(image_w, image_h, 70f64.to_radians());
        let cameras = (0..n)
            .map(|i| {
                let yaw = i as f64 * std::f64::consts::TAU / n as f64;
                Camera::looking_along(intrinsics, yaw, Vector3::new(0.0, 0.0, height))
            })
            .collect();
        Self::new(cameras, image_h, image_w)
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }
}

/// Candidate depths along each pixel ray.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumSpec {
    depth_bins: Vec<f64>,
}

impl FrustumSpec {
    pub fn new(depth_bins: Vec<f64>) -> Result<Self> {
        if depth_bins.is_empty() {
            return Err(Error::invalid("depth bins", "at least one bin is required"));
        }
        if depth_bins.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid("depth bins", "depths must be finite and > 0"));
        }
        if depth_bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("depth bins", "depths must be strictly increasing"));
        }
        Ok(Self { depth_bins })
    }

    /// `count` evenly spaced depths from `near` to `far` inclusive.
    pub fn uniform(near: f64, far: f64, count: usize) -> Result<Self> {
        let bins = match count {
            0 => Vec::new(),
            1 => vec![near],
            _ => {
                let step = (far - near) / (count - 1) as f64;
                (0..count).map(|k| near + step * k as f64).collect()
            }
        };
        Self::new(bins)
    }

    pub fn depth_bins(&self) -> &[f64] {
        &self.depth_bins
    }

    pub fn num_bins(&self) -> usize {
        self.depth_bins.len()
    }

    /// Index of the bin nearest to `depth` (ties go to the nearer bin).
    pub fn nearest_bin(&self, depth: f64) -> usize {
        let bins = &self.depth_bins;
        let i = bins.partition_point(|b| *b < depth);
        if i == 0 {
            0
        } else if i == bins.len() {
            bins.len() - 1
        } else if depth - bins[i - 1] <= bins[i] - depth {
            i - 1
        } else {
            i
        }
    }
}

/// Lifted pixel-depth lattice, shape `N×H×W×D×3`, entries `(u, v, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumPoints {
    pub coords: Array5<f64>,
}

/// Axis-aligned voxel grid in the ego frame with half-open cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub dims: [usize; 3],
    pub min_bound: [f64; 3],
    pub max_bound: [f64; 3],
}

impl VoxelGridSpec {
    pub fn new(dims: [usize; 3], min_bound: [f64; 3], max_bound: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid("grid", "voxel counts must be >= 1"));
        }
        if dims.iter().any(|d| *d > i32::MAX as usize) {
            return Err(Error::invalid("grid", "voxel counts must fit in i32"));
        }
        for a in 0..3 {
            if !(max_bound[a] > min_bound[a]) || !min_bound[a].is_finite() || !max_bound[a].is_finite() {
                return Err(Error::invalid("grid", format!("axis {a}: need finite max > min")));
            }
        }
        Ok(Self {
            dims,
            min_bound,
            max_bound,
        })
    }

    /// 200×200×8 over ±51.2 m, z ∈ [-5, 3).
    pub fn full_setting() -> Self {
        Self {
            dims: [200, 200, 8],
            min_bound: [-51.2, -51.2, -5.0],
            max_bound: [51.2, 51.2, 3.0],
        }
    }

    /// 128×128×8 over ±51.2 m, z ∈ [-5, 3).
    pub fn half_setting() -> Self {
        Self {
            dims: [128, 128, 8],
            ..Self::full_setting()
        }
    }

    pub fn cell_size(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.max_bound[a] - self.min_bound[a]) / self.dims[a] as f64)
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cell_center(&self, index: [usize; 3]) -> [f64; 3] {
        let cell = self.cell_size();
        std::array::from_fn(|a| self.min_bound[a] + (index[a] as f64 + 0.5) * cell[a])
    }

    /// `floor((p - min) / cell)` per axis when all three land in range.
    #[inline]
    pub fn locate(&self, p: &[f64; 3]) -> Option<[i32; 3]> {
        let cell = self.cell_size();
        let mut out = [0i32; 3];
        for a in 0..3 {
            let f = ((p[a] - self.min_bound[a]) / cell[a]).floor();
            // NaN fails both comparisons.
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as i32;
        }
        Some(out)
    }
}

/// Ego-voxel index for every ray sample, shape `N×H×W×D`.
///
/// Invalid entries hold `[-1, -1, -1]` and are never read by the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCoords {
    pub indices: Array4<[i32; 3]>,
    pub valid: Array4<bool>,
    pub grid_dims: [usize; 3],
}

pub const INVALID_INDEX: [i32; 3] = [-1, -1, -1];

impl VoxelCoords {
    pub fn ray_dims(&self) -> [usize; 4] {
        let s = self.indices.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Pixel centres `(w + 0.5, h + 0.5)` outer-producted with the depth bins.
pub fn lift_pixels(rig: &CameraRig, frustum: &FrustumSpec) -> FrustumPoints {
    let (n, h, w, d) = (
        rig.num_cameras(),
        rig.image_h,
        rig.image_w,
        frustum.num_bins(),
    );
    let bins = frustum.depth_bins();
    let mut coords = Array5::<f64>::zeros((n, h, w, d, 3));
    for ((_, row, col, k, c), v) in coords.indexed_iter_mut() {
        *v = match c {
            0 => col as f64 + 0.5,
            1 => row as f64 + 0.5,
            _ => bins[k],
        };
    }
    FrustumPoints { coords }
}

/// Camera-frame unprojection followed by the camera→ego extrinsic.
pub fn unproject_to_ego(points: &FrustumPoints, rig: &CameraRig) -> Result<Array5<f64>> {
    let shape = points.coords.shape();
    if shape[0] != rig.num_cameras() || shape[4] != 3 {
        return Err(Error::shape(
            "frustum points",
            &[rig.num_cameras(), shape[1], shape[2], shape[3], 3],
            shape,
        ));
    }
    let mut out = Array5::<f64>::zeros(points.coords.raw_dim());
    for (cam_idx, cam) in rig.cameras.iter().enumerate() {
        cam.intrinsics.check()?;
        let src = points.coords.index_axis(ndarray::Axis(0), cam_idx);
        let mut dst = out.index_axis_mut(ndarray::Axis(0), cam_idx);
        Zip::from(src.lanes(ndarray::Axis(3)))
            .and(dst.lanes_mut(ndarray::Axis(3)))
            .for_each(|p, mut q| {
                let pc = cam.intrinsics.unproject(p[0], p[1], p[2]);
                let pe = cam.cam_to_ego.apply(&pc);
                q[0] = pe.x;
                q[1] = pe.y;
                q[2] = pe.z;
            });
    }
    Ok(out)
}

/// Exact pinhole projection of an ego-frame point; returns `(u, v, depth)`.
pub fn project_ego_to_pixel(p: &Vector3<f64>, cam: &Camera) -> Result<[f64; 3]> {
    let pc = cam.cam_to_ego.inverse().apply(p);
    if pc.z <= 1e-9 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let k = &cam.intrinsics;
    Ok([
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
        pc.z,
    ])
}

/// Maps points from the ego frame at `t-1` to the ego frame at `t`.
///
/// Both poses are ego→world.
pub fn align_historical(
    points_prev_ego: &Array5<f64>,
    ego_pose_prev: &RigidTransform,
    ego_pose_curr: &RigidTransform,
) -> Array5<f64> {
    let prev_to_curr = ego_pose_curr.inverse().compose(ego_pose_prev);
    let mut out = points_prev_ego.clone();
    for mut lane in out.lanes_mut(ndarray::Axis(4)) {
        let q = prev_to_curr.apply(&Vector3::new(lane[0], lane[1], lane[2]));
        lane[0] = q.x;
        lane[1] = q.y;
        lane[2] = q.z;
    }
    out
}

pub fn voxelize(points_ego: &Array5<f64>, grid: &VoxelGridSpec) -> VoxelCoords {
    let s = points_ego.shape();
    let dims = (s[0], s[1], s[2], s[3]);
    let mut indices = Array4::from_elem(dims, INVALID_INDEX);
    let mut valid = Array4::from_elem(dims, false);
    Zip::from(points_ego.lanes(ndarray::Axis(4)))
        .and(&mut indices)
        .and(&mut valid)
        .for_each(|p, idx, ok| {
            if let Some(v) = grid.locate(&[p[0], p[1], p[2]]) {
                *idx = v;
                *ok = true;
            }
        });
    VoxelCoords {
        indices,
        valid,
        grid_dims: grid.dims,
    }
}

/// Poses for aligning a historical frame: `(ego_pose_prev, ego_pose_curr)`.
pub type PosePair<'a> = (&'a RigidTransform, &'a RigidTransform);

/// `lift_pixels → unproject_to_ego → align_historical? → voxelize`.
///
/// With `poses`, the rig is taken to observe the historical frame and the
/// points are carried into the current ego frame before voxelisation.
pub fn build_voxel_coords(
    rig: &CameraRig,
    frustum: &FrustumSpec,
    grid: &VoxelGridSpec,
    poses: Option<PosePair<'_>>,
) -> Result<VoxelCoords> {
    let lifted = lift_pixels(rig, frustum);
    let mut ego = unproject_to_ego(&lifted, rig)?;
    if let Some((prev, curr)) = poses {
        ego = align_historical(&ego, prev, curr);
    }
    Ok(voxelize(&ego, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = nalgebra::Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let angle = rng.random_range(-3.0..3.0);
        *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::new(
            random_rotation(rng),
            Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            ),
        )
        .unwrap()
    }

    fn unit_rig(h: usize, w: usize) -> CameraRig {
        let cam = Camera {
            intrinsics: Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap(),
            cam_to_ego: RigidTransform::identity(),
        };
        CameraRig::new(vec![cam], h, w).unwrap()
    }

    #[test]
    fn lift_single_cell() {
        let rig = unit_rig(1, 1);
        let f = FrustumSpec::new(vec![2.0]).unwrap();
        let p = lift_pixels(&rig, &f);
        assert_eq!(p.coords.shape(), &[1, 1, 1, 1, 3]);
        assert_eq!(p.coords.as_slice().unwrap(), &[0.5, 0.5, 2.0]);
    }

    #[test]
    fn lift_broadcasts_depth() {
        let rig = unit_rig(2, 2);
        let f = FrustumSpec::new(vec![1.0, 4.0]).unwrap();
        let p = lift_pixels(&rig, &f);
        assert_eq!(p.coords.len(), 8 * 3);
        for h in 0..2 {
            for w in 0..2 {
                assert_eq!(p.coords[[0, h, w, 1, 2]], 4.0);
            }
        }
    }

    #[test]
    fn lift_matches_triple_loop() {
        let rig = CameraRig::surround(3, 8, 8, 1.5).unwrap();
        let f = FrustumSpec::uniform(1.0, 10.0, 4).unwrap();
        let p = lift_pixels(&rig, &f);
        assert_eq!(p.coords.shape(), &[3, 8, 8, 4, 3]);
        for n in 0..3 {
            for h in 0..8 {
                for w in 0..8 {
                    for (k, d) in f.depth_bins().iter().enumerate() {
                        let got = [
                            p.coords[[n, h, w, k, 0]],
                            p.coords[[n, h, w, k, 1]],
                            p.coords[[n, h, w, k, 2]],
                        ];
                        assert_eq!(got, [w as f64 + 0.5, h as f64 + 0.5, *d]);
                    }
                }
            }
        }
    }

    fn single_point(u: f64, v: f64, d: f64) -> FrustumPoints {
        let mut coords = Array5::zeros((1, 1, 1, 1, 3));
        coords[[0, 0, 0, 0, 0]] = u;
        coords[[0, 0, 0, 0, 1]] = v;
        coords[[0, 0, 0, 0, 2]] = d;
        FrustumPoints { coords }
    }

    #[test]
    fn unproject_identity_and_translation() {
        let mut rig = unit_rig(1, 1);
        let out = unproject_to_ego(&single_point(0.0, 0.0, 1.0), &rig).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[0.0, 0.0, 1.0]);

        rig.cameras[0].cam_to_ego = RigidTransform::from_translation(1.0, 2.0, 3.0);
        let out = unproject_to_ego(&single_point(0.0, 0.0, 2.0), &rig).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[1.0, 2.0, 5.0]);
    }

    #[test]
    fn unproject_rejects_zero_focal() {
        let mut rig = unit_rig(1, 1);
        rig.cameras[0].intrinsics.fx = 0.0;
        let err = unproject_to_ego(&single_point(0.0, 0.0, 1.0), &rig).unwrap_err();
        assert!(matches!(err, Error::SingularIntrinsics { .. }));
    }

    #[test]
    fn project_identity_and_behind() {
        let cam = unit_rig(1, 1).cameras[0];
        let p = project_ego_to_pixel(&Vector3::new(0.0, 0.0, 5.0), &cam).unwrap();
        assert_eq!(p, [0.0, 0.0, 5.0]);
        let err = project_ego_to_pixel(&Vector3::new(0.0, 0.0, -1.0), &cam).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { .. }));
        assert!(project_ego_to_pixel(&Vector3::new(1.0, 1.0, 0.0), &cam).is_err());
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let k = Intrinsics::new(
                rng.random_range(5.0..500.0),
                rng.random_range(5.0..500.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            )
            .unwrap();
            let cam = Camera {
                intrinsics: k,
                cam_to_ego: random_transform(&mut rng),
            };
            let pc = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(0.5..40.0),
            );
            let pe = cam.cam_to_ego.apply(&pc);
            let [u, v, d] = project_ego_to_pixel(&pe, &cam).unwrap();
            let rig = CameraRig::new(vec![cam], 1, 1).unwrap();
            let back = unproject_to_ego(&single_point(u, v, d), &rig).unwrap();
            let back = Vector3::new(back[[0, 0, 0, 0, 0]], back[[0, 0, 0, 0, 1]], back[[0, 0, 0, 0, 2]]);
            worst = worst.max((back - pe).abs().max());
        }
        assert!(worst < 1e-9, "round-trip error {worst:e}");
    }

    #[test]
    fn align_identity_and_translation() {
        let mut pts = Array5::zeros((1, 1, 2, 1, 3));
        pts[[0, 0, 1, 0, 0]] = 3.0;
        pts[[0, 0, 1, 0, 2]] = -1.0;
        let pose = RigidTransform::from_yaw(0.3, Vector3::new(4.0, 5.0, 0.0));
        assert_eq!(align_historical(&pts, &pose, &pose), pts);

        let prev = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let out = align_historical(&pts, &prev, &RigidTransform::identity());
        assert_eq!(out[[0, 0, 0, 0, 0]], 1.0);
        assert_eq!(out[[0, 0, 1, 0, 0]], 4.0);
        assert_eq!(out[[0, 0, 1, 0, 2]], -1.0);
    }

    #[test]
    fn align_matches_explicit_world_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let prev = random_transform(&mut rng);
            let curr = random_transform(&mut rng);
            let pts = Array5::from_shape_fn((1, 2, 3, 2, 3), |_| rng.random_range(-30.0..30.0));
            let fast = align_historical(&pts, &prev, &curr);
            for (src, dst) in pts.lanes(ndarray::Axis(4)).into_iter().zip(fast.lanes(ndarray::Axis(4))) {
                // Two steps through the world frame, inverse written out by hand.
                let world = prev.rotation * Vector3::new(src[0], src[1], src[2]) + prev.translation;
                let local = curr.rotation.transpose() * (world - curr.translation);
                for a in 0..3 {
                    assert!((local[a] - dst[a]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn voxelize_boundaries() {
        let grid = VoxelGridSpec::new([1, 1, 1], [0.0; 3], [1.0; 3]).unwrap();
        let mut pts = Array5::zeros((1, 1, 1, 2, 3));
        pts.slice_mut(ndarray::s![0, 0, 0, 0, ..]).fill(0.5);
        pts[[0, 0, 0, 1, 0]] = 1.0;
        pts[[0, 0, 0, 1, 1]] = 0.5;
        pts[[0, 0, 0, 1, 2]] = 0.5;
        let cv = voxelize(&pts, &grid);
        assert_eq!(cv.indices[[0, 0, 0, 0]], [0, 0, 0]);
        assert!(cv.valid[[0, 0, 0, 0]]);
        assert!(!cv.valid[[0, 0, 0, 1]]);
        assert_eq!(cv.indices[[0, 0, 0, 1]], INVALID_INDEX);
    }

    #[test]
    fn voxelize_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = VoxelGridSpec::new([16, 16, 4], [-8.0, -8.0, -1.0], [8.0, 8.0, 3.0]).unwrap();
        let pts = Array5::from_shape_fn((1, 1, 100, 100, 3), |(.., c)| {
            if c == 2 {
                rng.random_range(-2.0..4.0)
            } else {
                rng.random_range(-9.0..9.0)
            }
        });
        let cv = voxelize(&pts, &grid);
        let cell = [1.0, 1.0, 1.0];
        for w in 0..100 {
            for d in 0..100 {
                let mut idx = [0i64; 3];
                let mut ok = true;
                for a in 0..3 {
                    let q = ((pts[[0, 0, w, d, a]] - grid.min_bound[a]) / cell[a]).floor() as i64;
                    ok &= q >= 0 && q < grid.dims[a] as i64;
                    idx[a] = q;
                }
                assert_eq!(cv.valid[[0, 0, w, d]], ok);
                if ok {
                    let got = cv.indices[[0, 0, w, d]];
                    assert_eq!([got[0] as i64, got[1] as i64, got[2] as i64], idx);
                }
            }
        }
    }

    #[test]
    fn preset_shapes() {
        let rig = CameraRig::surround(6, 4, 4, 1.5).unwrap();
        let f = FrustumSpec::uniform(1.0, 40.0, 3).unwrap();
        for grid in [VoxelGridSpec::full_setting(), VoxelGridSpec::half_setting()] {
            let cv = build_voxel_coords(&rig, &f, &grid, None).unwrap();
            assert_eq!(cv.indices.shape(), &[6, 4, 4, 3]);
            assert_eq!(cv.grid_dims[2], 8);
        }
        assert_eq!(VoxelGridSpec::full_setting().dims, [200, 200, 8]);
        assert_eq!(VoxelGridSpec::half_setting().dims, [128, 128, 8]);
    }

    #[test]
    fn principal_ray_hits_forward_voxel() {
        // Odd width so that a pixel centre sits on the principal point.
        let k = Intrinsics::new(4.0, 4.0, 2.5, 2.5).unwrap();
        let cam = Camera::looking_along(k, 0.0, Vector3::zeros());
        let rig = CameraRig::new(vec![cam], 5, 5).unwrap();
        let f = FrustumSpec::new(vec![2.2, 5.7, 9.1]).unwrap();
        let grid = VoxelGridSpec::new([20, 20, 4], [-10.0, -10.0, -2.0], [10.0, 10.0, 2.0]).unwrap();
        let cv = build_voxel_coords(&rig, &f, &grid, None).unwrap();
        for (k, d) in f.depth_bins().iter().enumerate() {
            let expected = grid.locate(&[*d, 0.0, 0.0]).unwrap();
            assert!(cv.valid[[0, 2, 2, k]]);
            assert_eq!(cv.indices[[0, 2, 2, k]], expected);
        }
    }

    #[test]
    fn nearest_bin_assignment() {
        let f = FrustumSpec::new(vec![1.0, 2.0, 4.0]).unwrap();
        assert_eq!(f.nearest_bin(0.1), 0);
        assert_eq!(f.nearest_bin(1.4), 0);
        assert_eq!(f.nearest_bin(1.6), 1);
        assert_eq!(f.nearest_bin(3.1), 2);
        assert_eq!(f.nearest_bin(100.0), 2);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(FrustumSpec::new(vec![]).is_err());
        assert!(FrustumSpec::new(vec![1.0, 1.0]).is_err());
        assert!(FrustumSpec::new(vec![-1.0, 1.0]).is_err());
        assert!(VoxelGridSpec::new([0, 1, 1], [0.0; 3], [1.0; 3]).is_err());
        assert!(VoxelGridSpec::new([1, 1, 1], [0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(RigidTransform::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(reflect, Vector3::zeros()).is_err());
        assert!(CameraRig::new(vec![], 1, 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn transform() -> impl Strategy<Value = RigidTransform> {
            (
                -1.0..1.0f64,
                -1.0..1.0f64,
                0.1..1.0f64,
                -3.1..3.1f64,
                prop::array::uniform3(-20.0..20.0f64),
            )
                .prop_map(|(x, y, z, angle, t)| {
                    let axis = nalgebra::Unit::new_normalize(Vector3::new(x, y, z));
                    RigidTransform::new(
                        *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix(),
                        Vector3::from(t),
                    )
                    .unwrap()
                })
        }

        proptest! {
            #[test]
            fn rigid_transforms_preserve_distances(
                t in transform(),
                a in prop::array::uniform3(-50.0..50.0f64),
                b in prop::array::uniform3(-50.0..50.0f64),
            ) {
                let (a, b) = (Vector3::from(a), Vector3::from(b));
                let before = (a - b).norm();
                let after = (t.apply(&a) - t.apply(&b)).norm();
                prop_assert!((before - after).abs() < 1e-9);
                let back = t.inverse().apply(&t.apply(&a));
                prop_assert!((back - a).abs().max() < 1e-9);
            }

            #[test]
            fn samples_along_a_ray_are_collinear(
                t in transform(),
                u in 0.0..16.0f64,
                v in 0.0..16.0f64,
            ) {
                let cam = Camera { intrinsics: Intrinsics::from_fov(16, 16, 1.2), cam_to_ego: t };
                let rig = CameraRig::new(vec![cam], 1, 1).unwrap();
                let mut coords = Array5::zeros((1, 1, 1, 4, 3));
                for (k, d) in [1.0, 3.5, 9.0, 30.0].iter().enumerate() {
                    coords[[0, 0, 0, k, 0]] = u;
                    coords[[0, 0, 0, k, 1]] = v;
                    coords[[0, 0, 0, k, 2]] = *d;
                }
                let ego = unproject_to_ego(&FrustumPoints { coords }, &rig).unwrap();
                let p = |k: usize| Vector3::new(ego[[0, 0, 0, k, 0]], ego[[0, 0, 0, k, 1]], ego[[0, 0, 0, k, 2]]);
                let dir = (p(3) - p(0)).normalize();
                for k in 1..3 {
                    let off = p(k) - p(0);
                    prop_assert!(off.cross(&dir).norm() < 1e-9);
                    prop_assert!(off.dot(&dir) > 0.0);
                }
            }
        }
    }
}
