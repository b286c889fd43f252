//! Single-view specialisations of the kernel used for ablations.
//!
//! Both are thin wrappers: camera-view-only weighting fixes the occupancy
//! confidence to one, BEV-only weighting fixes the depth distribution to
//! uniform. Spatial cross-attention (deformable sampling) is not provided.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{Gating, OccupancyActivation};
use crate::kernel::{dva_forward, BevFeature, DepthMap, FeatureMap, OccupancyConfidence, Reduction, ScatterPlan};
use crate::real::Real;

/// BEV feature generator used by the training pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Predicted depth and predicted occupancy.
    #[default]
    Dva,
    /// Predicted depth only; occupancy fixed to one.
    Lss,
    /// Predicted occupancy only; depth fixed to uniform.
    BevOnly,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dva, Method::Lss, Method::BevOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dva => "dva",
            Method::Lss => "lss",
            Method::BevOnly => "bev-only",
        }
    }

    /// Whether the depth head feeds the kernel (and receives a depth loss).
    pub fn uses_predicted_depth(self) -> bool {
        !matches!(self, Method::BevOnly)
    }

    pub fn gating(self, activation: OccupancyActivation) -> Gating {
        match self {
            Method::Lss => Gating::Unit,
            Method::Dva | Method::BevOnly => Gating::Occupancy(activation),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("method", format!("unknown method `{s}` (expected dva, lss or bev-only)")))
    }
}

/// Camera-view-only lifting: [`dva_forward`] with `P ≡ 1`.
pub fn lss_forward<T: Real>(
    f: &FeatureMap<T>,
    d: &DepthMap<T>,
    plan: &ScatterPlan,
    reduction: Reduction,
) -> Result<BevFeature<T>> {
    let p = OccupancyConfidence::ones(plan.grid_dims());
    Ok(dva_forward(f, d, plan, &p, reduction)?.0)
}

/// BEV-view-only weighting: [`dva_forward`] with `D ≡ 1/D`.
pub fn bev_only_forward<T: Real>(
    f: &FeatureMap<T>,
    plan: &ScatterPlan,
    p: &OccupancyConfidence<T>,
    reduction: Reduction,
) -> Result<BevFeature<T>> {
    let d = DepthMap::uniform(plan.ray_dims());
    Ok(dva_forward(f, &d, plan, p, reduction)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{bitwise_eq, max_rel_diff, random_instance, InstanceDims, InstanceOptions};
    use ndarray::{Array3, Array4};

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("sc".parse::<Method>().is_err());
    }

    #[test]
    fn lss_is_dva_with_unit_occupancy() {
        let inst = random_instance::<f32>(3, &InstanceDims::tiny(), InstanceOptions::default());
        let ones = OccupancyConfidence::ones(inst.plan.grid_dims());
        let (full, _) = dva_forward(&inst.features, &inst.depth, &inst.plan, &ones, Reduction::Deterministic).unwrap();
        let lss = lss_forward(&inst.features, &inst.depth, &inst.plan, Reduction::Deterministic).unwrap();
        assert!(bitwise_eq(full.data.as_slice().unwrap(), lss.data.as_slice().unwrap()));
    }

    #[test]
    fn bev_only_is_dva_with_constant_depth() {
        let dims = InstanceDims::tiny();
        let inst = random_instance::<f32>(4, &dims, InstanceOptions::default());
        let constant = DepthMap::new(Array4::from_elem(dims.ray_dims(), 0.25f32));
        let (full, _) = dva_forward(&inst.features, &constant, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
        let only = bev_only_forward(&inst.features, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
        assert!(max_rel_diff(only.data.as_slice().unwrap(), full.data.as_slice().unwrap()) < 1e-6);
    }

    #[test]
    fn bev_only_single_bin_single_layer_is_plain_splat() {
        use crate::geometry::VoxelCoords;
        // One camera, 2×2 pixels, one bin, every ray lands in its own column.
        let indices = Array4::from_shape_fn((1, 2, 2, 1), |(_, h, w, _)| [w as i32, h as i32, 0]);
        let coords = VoxelCoords {
            indices,
            valid: Array4::from_elem((1, 2, 2, 1), true),
            grid_dims: [2, 2, 1],
        };
        let plan = ScatterPlan::new(&coords);
        let f = FeatureMap::new(Array4::from_shape_fn((1, 2, 2, 3), |(_, h, w, c)| (h * 6 + w * 3 + c) as f64));
        let q = bev_only_forward(&f, &plan, &OccupancyConfidence::ones([2, 2, 1]), Reduction::Deterministic).unwrap();
        let expect = Array3::from_shape_fn((2, 2, 3), |(x, y, c)| f.data[[0, y, x, c]]);
        assert_eq!(q.data, expect);
    }

    #[test]
    fn lss_conserves_mass() {
        let dims = InstanceDims::tiny();
        let opts = InstanceOptions {
            valid_fraction: 1.0,
            normalized_depth: true,
        };
        let inst = random_instance::<f64>(5, &dims, opts);
        let q = lss_forward(&inst.features, &inst.depth, &inst.plan, Reduction::Deterministic).unwrap();
        for c in 0..dims.channels {
            let total_q: f64 = q.data.index_axis(ndarray::Axis(2), c).sum();
            let total_f: f64 = inst.features.data.index_axis(ndarray::Axis(3), c).sum();
            assert!((total_q - total_f).abs() <= 1e-9 * total_f.abs().max(1.0));
        }
    }
}
