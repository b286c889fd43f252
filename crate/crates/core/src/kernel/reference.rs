//! Sequential reference implementations used as test oracles.
//!
//! Both read the voxel index map directly instead of a [`super::ScatterPlan`].

use ndarray::{Array3, Array4};

use super::{BevFeature, DepthMap, FeatureMap, OccupancyConfidence};
use crate::error::{Error, Result};
use crate::geometry::VoxelCoords;
use crate::real::Real;

fn check<T: Real>(
    f: &FeatureMap<T>,
    d: &DepthMap<T>,
    cv: &VoxelCoords,
    p: &OccupancyConfidence<T>,
) -> Result<()> {
    let [n, h, w, bins] = cv.ray_dims();
    let fd = f.dims();
    if fd[..3] != [n, h, w] {
        return Err(Error::shape("feature map", &[n, h, w, fd[3]], &fd));
    }
    if d.dims() != [n, h, w, bins] {
        return Err(Error::shape("depth map", &[n, h, w, bins], &d.dims()));
    }
    if p.dims() != cv.grid_dims {
        return Err(Error::shape("occupancy confidence", &cv.grid_dims, &p.dims()));
    }
    Ok(())
}

/// Canonical-order scatter into a dense `f64` grid, narrowed, then splatted.
///
/// Loops run `n, h, w, d` in order; this fixes the summation order that the
/// deterministic kernel reproduces bit for bit.
pub fn dva_forward_naive<T: Real>(
    f: &FeatureMap<T>,
    d: &DepthMap<T>,
    cv: &VoxelCoords,
    p: &OccupancyConfidence<T>,
) -> Result<BevFeature<T>> {
    check(f, d, cv, p)?;
    let [n, h, w, bins] = cv.ray_dims();
    let [nx, ny, nz] = cv.grid_dims;
    let l = f.dims()[3];
    let mut acc = Array4::<f64>::zeros((nx, ny, nz, l));
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for k in 0..bins {
                    if !cv.valid[[ni, hi, wi, k]] {
                        continue;
                    }
                    let [x, y, z] = cv.indices[[ni, hi, wi, k]].map(|v| v as usize);
                    let weight = d.data[[ni, hi, wi, k]].widen();
                    for c in 0..l {
                        acc[[x, y, z, c]] += f.data[[ni, hi, wi, c]].widen() * weight;
                    }
                }
            }
        }
    }
    let mut q = Array3::<T>::zeros((nx, ny, l));
    for x in 0..nx {
        for y in 0..ny {
            for c in 0..l {
                let mut sum = 0f64;
                for z in 0..nz {
                    let wv = T::narrow(acc[[x, y, z, c]]);
                    sum += p.data[[x, y, z]].widen() * wv.widen();
                }
                q[[x, y, c]] = T::narrow(sum);
            }
        }
    }
    Ok(BevFeature::new(q))
}

/// Per-ray form: each ray adds `F · D · P[v]` to its voxel, then the grid is
/// summed over height.
pub fn dva_forward_literal<T: Real>(
    f: &FeatureMap<T>,
    d: &DepthMap<T>,
    cv: &VoxelCoords,
    p: &OccupancyConfidence<T>,
) -> Result<BevFeature<T>> {
    check(f, d, cv, p)?;
    let [n, h, w, bins] = cv.ray_dims();
    let [nx, ny, nz] = cv.grid_dims;
    let l = f.dims()[3];
    let mut w3d = Array4::<f64>::zeros((nx, ny, nz, l));
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for k in 0..bins {
                    if !cv.valid[[ni, hi, wi, k]] {
                        continue;
                    }
                    let [x, y, z] = cv.indices[[ni, hi, wi, k]].map(|v| v as usize);
                    for c in 0..l {
                        w3d[[x, y, z, c]] += f.data[[ni, hi, wi, c]].widen()
                            * d.data[[ni, hi, wi, k]].widen()
                            * p.data[[x, y, z]].widen();
                    }
                }
            }
        }
    }
    let q = w3d.sum_axis(ndarray::Axis(2)).mapv(T::narrow);
    Ok(BevFeature::new(q))
}
