use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{Camera, CameraRig, FrustumSpec, Intrinsics, RigidTransform, VoxelGridSpec};
use crate::error::Result;

/// Rig, grid and frustum in one JSON document.
///
/// ```json
/// {
///   "image_h": 16, "image_w": 16,
///   "cameras": [
///     { "intrinsics": [fx, 0, cx, 0, fy, cy, 0, 0, 1],
///       "extrinsics": [r00, r01, r02, tx, r10, r11, r12, ty, r20, r21, r22, tz, 0, 0, 0, 1] }
///   ],
///   "grid": { "dims": [16, 16, 4], "min_bound": [-16, -16, -1], "max_bound": [16, 16, 3] },
///   "depth_bins": [1.0, 2.5, ...]
/// }
/// ```
///
/// Intrinsics are 3×3 row-major; extrinsics are the 4×4 row-major camera→ego
/// transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub cameras: Vec<CameraConfig>,
    pub grid: GridConfig,
    pub depth_bins: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub intrinsics: [f64; 9],
    pub extrinsics: [f64; 16],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub min_bound: [f64; 3],
    pub max_bound: [f64; 3],
}

impl GridConfig {
    pub fn spec(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.dims, self.min_bound, self.max_bound)
    }
}

impl From<VoxelGridSpec> for GridConfig {
    fn from(g: VoxelGridSpec) -> Self {
        Self {
            dims: g.dims,
            min_bound: g.min_bound,
            max_bound: g.max_bound,
        }
    }
}

impl From<&Camera> for CameraConfig {
    fn from(c: &Camera) -> Self {
        let m = c.intrinsics.matrix();
        Self {
            intrinsics: std::array::from_fn(|i| m[(i / 3, i % 3)]),
            extrinsics: c.cam_to_ego.to_row_major(),
        }
    }
}

impl CameraConfig {
    pub fn camera(&self) -> Result<Camera> {
        let m = Matrix3::from_row_slice(&self.intrinsics);
        Ok(Camera {
            intrinsics: Intrinsics::from_matrix(&m)?,
            cam_to_ego: RigidTransform::from_row_major(&self.extrinsics)?,
        })
    }
}

impl GeometryConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.rig()?;
        self.frustum()?;
        self.grid()?;
        Ok(())
    }

    pub fn from_parts(rig: &CameraRig, frustum: &FrustumSpec, grid: &VoxelGridSpec) -> Self {
        Self {
            image_h: rig.image_h,
            image_w: rig.image_w,
            cameras: rig.cameras.iter().map(CameraConfig::from).collect(),
            grid: (*grid).into(),
            depth_bins: frustum.depth_bins().to_vec(),
        }
    }

    pub fn rig(&self) -> Result<CameraRig> {
        let cameras = self
            .cameras
            .iter()
            .map(CameraConfig::camera)
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cameras, self.image_h, self.image_w)
    }

    pub fn frustum(&self) -> Result<FrustumSpec> {
        FrustumSpec::new(self.depth_bins.clone())
    }

    pub fn grid(&self) -> Result<VoxelGridSpec> {
        self.grid.spec()
    }

    /// Six cameras at 60° yaw steps, 16×16 feature grid, 16 depth bins from
    /// 1 m to 23.5 m, 16×16×4 grid over ±16 m and z ∈ [-1, 3).
    ///
    /// Cells are 2 m wide: at 16 px across a 70° field of view one pixel
    /// spans up to 1.8 m at the far bins, so finer cells would receive only
    /// a handful of rays each.
    pub fn default_surround() -> Self {
        let rig = CameraRig::surround(6, 16, 16, 1.5).expect("valid default rig");
        let frustum = FrustumSpec::uniform(1.0, 23.5, 16).expect("valid default bins");
        let grid = VoxelGridSpec::new([16, 16, 4], [-16.0, -16.0, -1.0], [16.0, 16.0, 3.0])
            .expect("valid default grid");
        Self::from_parts(&rig, &frustum, &grid)
    }
}
