//! Seeded random problem instances for tests, benchmarks and gradient checks.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{build_voxel_coords, CameraRig, FrustumSpec, VoxelCoords, VoxelGridSpec};
use crate::kernel::{DepthMap, FeatureMap, OccupancyConfidence, ScatterPlan};
use crate::real::Real;

/// Kernel problem sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InstanceDims {
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub grid: [usize; 3],
    pub channels: usize,
}

impl InstanceDims {
    /// N=2, H=W=8, D=4, grid 16×16×4, L=8.
    pub const fn tiny() -> Self {
        Self {
            cameras: 2,
            height: 8,
            width: 8,
            bins: 4,
            grid: [16, 16, 4],
            channels: 8,
        }
    }

    /// N=6, H=W=16, D=16, grid 128×128×8, L=32.
    pub const fn half_setting() -> Self {
        Self {
            cameras: 6,
            height: 16,
            width: 16,
            bins: 16,
            grid: [128, 128, 8],
            channels: 32,
        }
    }

    pub fn ray_dims(&self) -> [usize; 4] {
        [self.cameras, self.height, self.width, self.bins]
    }
}

#[derive(Debug, Clone)]
pub struct KernelInstance<T> {
    pub features: FeatureMap<T>,
    pub depth: DepthMap<T>,
    pub coords: VoxelCoords,
    pub plan: ScatterPlan,
    pub occupancy: OccupancyConfidence<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceOptions {
    /// Fraction of rays that land inside the grid.
    pub valid_fraction: f64,
    /// Normalise each pixel's depth weights to sum to one.
    pub normalized_depth: bool,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        Self {
            valid_fraction: 0.85,
            normalized_depth: true,
        }
    }
}

/// Uniformly random voxel targets; many rays collide in the same voxel.
pub fn random_coords(rng: &mut impl Rng, dims: &InstanceDims, valid_fraction: f64) -> VoxelCoords {
    let shape = dims.ray_dims();
    let mut valid = Array4::from_elem(shape, false);
    let indices = Array4::from_shape_fn(shape, |idx| {
        let [n, h, w, d] = [idx.0, idx.1, idx.2, idx.3];
        if rng.random_bool(valid_fraction) {
            valid[[n, h, w, d]] = true;
            std::array::from_fn(|a| rng.random_range(0..dims.grid[a]) as i32)
        } else {
            crate::geometry::INVALID_INDEX
        }
    });
    VoxelCoords {
        indices,
        valid,
        grid_dims: dims.grid,
    }
}

pub fn random_features<T: Real>(rng: &mut impl Rng, dims: &InstanceDims) -> FeatureMap<T> {
    let [n, h, w, _] = dims.ray_dims();
    FeatureMap::new(Array4::from_shape_fn((n, h, w, dims.channels), |_| {
        T::narrow(rng.random_range(-1.0..1.0))
    }))
}

pub fn random_depth<T: Real>(rng: &mut impl Rng, dims: &InstanceDims, normalized: bool) -> DepthMap<T> {
    let shape = dims.ray_dims();
    let raw = Array4::from_shape_fn(shape, |_| rng.random_range(0.01..1.0f64));
    let data = if normalized {
        let mut out = raw.clone();
        for mut lane in out.lanes_mut(ndarray::Axis(3)) {
            let s: f64 = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        out
    } else {
        raw
    };
    DepthMap::new(data.mapv(T::narrow))
}

pub fn random_occupancy<T: Real>(rng: &mut impl Rng, grid: [usize; 3]) -> OccupancyConfidence<T> {
    OccupancyConfidence::new(Array3::from_shape_fn(grid, |_| T::narrow(rng.random_range(0.0..1.0))))
}

pub fn random_instance<T: Real>(seed: u64, dims: &InstanceDims, opts: InstanceOptions) -> KernelInstance<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = random_coords(&mut rng, dims, opts.valid_fraction);
    let plan = ScatterPlan::new(&coords);
    KernelInstance {
        features: random_features(&mut rng, dims),
        depth: random_depth(&mut rng, dims, opts.normalized_depth),
        occupancy: random_occupancy(&mut rng, dims.grid),
        coords,
        plan,
    }
}

/// Instance whose voxel map comes from a surround rig over a ±51.2 m grid.
pub fn geometric_instance<T: Real>(seed: u64, dims: &InstanceDims) -> KernelInstance<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = CameraRig::surround(dims.cameras, dims.height, dims.width, 1.5).expect("valid rig");
    let frustum = FrustumSpec::uniform(1.0, 60.0, dims.bins).expect("valid bins");
    let grid = VoxelGridSpec::new(dims.grid, [-51.2, -51.2, -5.0], [51.2, 51.2, 3.0]).expect("valid grid");
    let coords = build_voxel_coords(&rig, &frustum, &grid, None).expect("valid geometry");
    let plan = ScatterPlan::new(&coords);
    KernelInstance {
        features: random_features(&mut rng, dims),
        depth: random_depth(&mut rng, dims, true),
        occupancy: random_occupancy(&mut rng, dims.grid),
        coords,
        plan,
    }
}

/// `max_i |a_i - b_i| / max_i |b_i|` (max-norm relative difference).
///
/// Elementwise ratios are ill-conditioned wherever a sum cancels, so tensor
/// comparisons are normalised by the reference's largest magnitude. Returns
/// the absolute difference when the reference is identically zero.
pub fn max_rel_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let scale = b.iter().fold(0f64, |m, v| m.max(v.widen().abs()));
    let diff = a
        .iter()
        .zip(b)
        .fold(0f64, |m, (x, y)| m.max((x.widen() - y.widen()).abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// True when both slices have identical bit patterns.
pub fn bitwise_eq<T: Real>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.widen().to_bits() == y.widen().to_bits())
}
