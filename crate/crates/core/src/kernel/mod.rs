//! Depth- and occupancy-weighted scatter of camera features into a voxel grid,
//! followed by a height-sum splat into the BEV plane.
//!
//! For every valid ray `(n, h, w, d)` targeting voxel `v = (x, y, z)`:
//!
//! ```text
//! W[v]        += F[n, h, w, :] · D[n, h, w, d]
//! Q[x, y, :]   = Σ_z P[x, y, z] · W[x, y, z, :]
//! ```
//!
//! The occupancy weight is applied once per voxel at splat time rather than
//! once per ray; the per-ray form lives in [`reference::dva_forward_literal`].
//! Reductions widen to `f64` and narrow once.

mod plan;
pub mod reference;

pub use plan::ScatterPlan;
pub use reference::{dva_forward_literal, dva_forward_naive};

use std::borrow::Cow;

use ndarray::{Array3, Array4, ArrayBase, ArrayView3, ArrayView4, Data, Dimension};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use plan::NO_SLOT;

/// Per-camera features, `N×H×W×L`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array4<T>,
}

/// Per-pixel weights over depth bins, `N×H×W×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    pub data: Array4<T>,
}

/// Per-voxel occupancy confidence in `[0, 1]`, `X×Y×Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyConfidence<T> {
    pub data: Array3<T>,
}

/// Depth-adjusted voxel features, `X×Y×Z×L`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeature<T> {
    pub data: Array4<T>,
}

/// BEV features (or their gradient), `X×Y×L`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature<T> {
    pub data: Array3<T>,
}

macro_rules! tensor_ctor {
    ($name:ident, $arr:ident, $dim:literal) => {
        impl<T: Real> $name<T> {
            pub fn new(data: $arr<T>) -> Self {
                Self { data }
            }

            pub fn zeros(shape: [usize; $dim]) -> Self {
                Self {
                    data: $arr::zeros(shape),
                }
            }

            pub fn dims(&self) -> [usize; $dim] {
                let s = self.data.shape();
                std::array::from_fn(|i| s[i])
            }
        }
    };
}

tensor_ctor!(FeatureMap, Array4, 4);
tensor_ctor!(DepthMap, Array4, 4);
tensor_ctor!(OccupancyConfidence, Array3, 3);
tensor_ctor!(VoxelFeature, Array4, 4);
tensor_ctor!(BevFeature, Array3, 3);

impl<T: Real> DepthMap<T> {
    /// Every pixel spreads its weight evenly over the `D` bins.
    pub fn uniform(dims: [usize; 4]) -> Self {
        let w = T::narrow(1.0 / dims[3] as f64);
        Self {
            data: Array4::from_elem(dims, w),
        }
    }
}

impl<T: Real> OccupancyConfidence<T> {
    pub fn ones(dims: [usize; 3]) -> Self {
        Self {
            data: Array3::from_elem(dims, T::one()),
        }
    }
}

/// How scattered contributions are reduced into voxels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Each voxel sums its rays in canonical `(n, h, w, d)` order in `f64`.
    /// Bitwise reproducible for any thread count.
    #[default]
    Deterministic,
    /// Per-worker partial grids in storage precision, merged at the end.
    Relaxed,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" | "det" => Ok(Self::Deterministic),
            "relaxed" => Ok(Self::Relaxed),
            other => Err(Error::invalid("reduction", format!("unknown strategy `{other}`"))),
        }
    }
}

/// State saved by [`dva_forward`] for [`dva_backward`].
#[derive(Debug, Clone)]
pub struct KernelContext<T> {
    plan: ScatterPlan,
    features: Array4<T>,
    depth: Array4<T>,
    occupancy: Array3<T>,
    /// Pre-occupancy voxel features, one `L`-row per plan slot.
    slot_features: Vec<T>,
}

impl<T: Real> KernelContext<T> {
    pub fn plan(&self) -> &ScatterPlan {
        &self.plan
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[3]
    }

    /// Dense copy of the saved pre-occupancy voxel feature.
    pub fn voxel_feature(&self) -> VoxelFeature<T> {
        densify(&self.plan, &self.slot_features, self.channels())
    }
}

/// Gradients of a scalar loss w.r.t. the three kernel inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrads<T> {
    pub features: FeatureMap<T>,
    pub depth: DepthMap<T>,
    pub occupancy: OccupancyConfidence<T>,
}

fn standard<'a, S, D>(a: &'a ArrayBase<S, D>) -> Cow<'a, [S::Elem]>
where
    S: Data,
    S::Elem: Clone,
    D: Dimension,
{
    match a.as_slice() {
        Some(s) => Cow::Borrowed(s),
        None => Cow::Owned(a.iter().cloned().collect()),
    }
}

fn check_inputs(fd: &[usize], dd: &[usize], plan: &ScatterPlan) -> Result<usize> {
    let [n, h, w, bins] = plan.ray_dims();
    if fd[..3] != [n, h, w] || fd[3] == 0 {
        return Err(Error::shape("feature map", &[n, h, w, fd[3].max(1)], fd));
    }
    if dd != [n, h, w, bins] {
        return Err(Error::shape("depth map", &[n, h, w, bins], dd));
    }
    Ok(fd[3])
}

fn check_occupancy(pd: &[usize], grid: [usize; 3]) -> Result<()> {
    if pd != grid {
        return Err(Error::shape("occupancy confidence", &grid, pd));
    }
    Ok(())
}

/// Sparse `W_fd`: one `L`-row per slot.
fn accumulate_slots<T: Real>(
    f: &[T],
    d: &[T],
    plan: &ScatterPlan,
    channels: usize,
    reduction: Reduction,
) -> Vec<T> {
    let bins = plan.ray_dims()[3];
    let n_slots = plan.num_slots();
    match reduction {
        Reduction::Deterministic => {
            let mut out = vec![T::zero(); n_slots * channels];
            out.par_chunks_mut(channels)
                .with_min_len(64)
                .enumerate()
                .for_each_init(
                    || vec![0f64; channels],
                    |acc, (slot, row)| {
                        acc.fill(0.0);
                        for &r in plan.slot_rays(slot) {
                            let r = r as usize;
                            let weight = d[r].widen();
                            let fr = &f[(r / bins) * channels..][..channels];
                            for (a, fv) in acc.iter_mut().zip(fr) {
                                *a += fv.widen() * weight;
                            }
                        }
                        for (o, a) in row.iter_mut().zip(acc.iter()) {
                            *o = T::narrow(*a);
                        }
                    },
                );
            out
        }
        Reduction::Relaxed => {
            let n_rays = plan.num_rays();
            let ray_slot = plan.ray_slot();
            let grain = (n_rays / (4 * rayon::current_num_threads())).max(1024);
            (0..n_rays)
                .into_par_iter()
                .with_min_len(grain)
                .fold(
                    || vec![T::zero(); n_slots * channels],
                    |mut buf, r| {
                        let slot = ray_slot[r];
                        if slot != NO_SLOT {
                            let weight = d[r];
                            let fr = &f[(r / bins) * channels..][..channels];
                            let dst = &mut buf[slot as usize * channels..][..channels];
                            for (o, fv) in dst.iter_mut().zip(fr) {
                                *o = *o + *fv * weight;
                            }
                        }
                        buf
                    },
                )
                .reduce_with(|mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x = *x + y;
                    }
                    a
                })
                .unwrap_or_else(|| vec![T::zero(); n_slots * channels])
        }
    }
}

/// `Q[x, y, :] = Σ_z P[x, y, z] · W[x, y, z, :]` over occupied slots.
fn splat_slots<T: Real>(slots: &[T], p: &[T], plan: &ScatterPlan, channels: usize) -> Array3<T> {
    let [nx, ny, _] = plan.grid_dims();
    let voxel = plan.slot_voxel();
    let mut q = vec![T::zero(); nx * ny * channels];
    q.par_chunks_mut(channels)
        .with_min_len(64)
        .enumerate()
        .for_each_init(
            || vec![0f64; channels],
            |acc, (col, row)| {
                let range = plan.column_slots(col);
                if range.is_empty() {
                    return;
                }
                acc.fill(0.0);
                for s in range {
                    let weight = p[voxel[s] as usize].widen();
                    for (a, w) in acc.iter_mut().zip(&slots[s * channels..][..channels]) {
                        *a += weight * w.widen();
                    }
                }
                for (o, a) in row.iter_mut().zip(acc.iter()) {
                    *o = T::narrow(*a);
                }
            },
        );
    Array3::from_shape_vec((nx, ny, channels), q).expect("splat shape")
}

fn densify<T: Real>(plan: &ScatterPlan, slots: &[T], channels: usize) -> VoxelFeature<T> {
    let [nx, ny, nz] = plan.grid_dims();
    let mut dense = vec![T::zero(); nx * ny * nz * channels];
    for (s, v) in plan.slot_voxel().iter().enumerate() {
        dense[*v as usize * channels..][..channels]
            .copy_from_slice(&slots[s * channels..][..channels]);
    }
    VoxelFeature::new(Array4::from_shape_vec((nx, ny, nz, channels), dense).expect("voxel shape"))
}

/// `W[v] = Σ_{rays → v} F[n, h, w, :] · D[n, h, w, d]`, dense over the grid.
pub fn accumulate_voxels<T: Real>(
    f: &FeatureMap<T>,
    d: &DepthMap<T>,
    plan: &ScatterPlan,
    reduction: Reduction,
) -> Result<VoxelFeature<T>> {
    let channels = check_inputs(&f.dims(), &d.dims(), plan)?;
    let slots = accumulate_slots(&standard(&f.data), &standard(&d.data), plan, channels, reduction);
    Ok(densify(plan, &slots, channels))
}

/// Occupancy-weighted sum over the height axis.
pub fn splat<T: Real>(w: &VoxelFeature<T>, p: &OccupancyConfidence<T>) -> Result<BevFeature<T>> {
    let [nx, ny, nz, channels] = w.dims();
    check_occupancy(&p.dims(), [nx, ny, nz])?;
    let wd = standard(&w.data);
    let pd = standard(&p.data);
    let mut q = Array3::<T>::zeros((nx, ny, channels));
    let out = q.as_slice_mut().expect("fresh array");
    out.par_chunks_mut(channels)
        .with_min_len(64)
        .enumerate()
        .for_each(|(col, row)| {
            let mut acc = vec![0f64; channels];
            for k in 0..nz {
                let v = col * nz + k;
                let weight = pd[v].widen();
                for (a, x) in acc.iter_mut().zip(&wd[v * channels..][..channels]) {
                    *a += weight * x.widen();
                }
            }
            for (o, a) in row.iter_mut().zip(acc) {
                *o = T::narrow(a);
            }
        });
    Ok(BevFeature::new(q))
}

/// Dual-view attention forward: `splat(accumulate_voxels(F, D), P)`.
pub fn dva_forward<T: Real>(
    f: &FeatureMap<T>,
    d: &DepthMap<T>,
    plan: &ScatterPlan,
    p: &OccupancyConfidence<T>,
    reduction: Reduction,
) -> Result<(BevFeature<T>, KernelContext<T>)> {
    dva_forward_view(f.data.view(), d.data.view(), plan, p.data.view(), reduction)
}

/// [`dva_forward`] on borrowed arrays. The only copies made are the ones the
/// returned context keeps for the backward pass.
pub fn dva_forward_view<T: Real>(
    f: ArrayView4<'_, T>,
    d: ArrayView4<'_, T>,
    plan: &ScatterPlan,
    p: ArrayView3<'_, T>,
    reduction: Reduction,
) -> Result<(BevFeature<T>, KernelContext<T>)> {
    let channels = check_inputs(f.shape(), d.shape(), plan)?;
    check_occupancy(p.shape(), plan.grid_dims())?;
    let features = f.as_standard_layout().into_owned();
    let depth = d.as_standard_layout().into_owned();
    let occupancy = p.as_standard_layout().into_owned();
    let slot_features = accumulate_slots(
        features.as_slice().unwrap(),
        depth.as_slice().unwrap(),
        plan,
        channels,
        reduction,
    );
    let q = splat_slots(&slot_features, occupancy.as_slice().unwrap(), plan, channels);
    Ok((
        BevFeature::new(q),
        KernelContext {
            plan: plan.clone(),
            features,
            depth,
            occupancy,
            slot_features,
        },
    ))
}

/// Chain rule through the scatter and the splat.
///
/// ```text
/// gP[v]          = ⟨W[v], gQ[xy(v)]⟩
/// gF[n, h, w, :] = Σ_d D[n, h, w, d] · P[v] · gQ[xy(v), :]
/// gD[n, h, w, d] = P[v] · ⟨F[n, h, w, :], gQ[xy(v), :]⟩
/// ```
///
/// Every output element is a gather, so the result does not depend on the
/// thread count.
pub fn dva_backward<T: Real>(gq: &BevFeature<T>, ctx: &KernelContext<T>) -> Result<KernelGrads<T>> {
    let plan = &ctx.plan;
    let [nx, ny, nz] = plan.grid_dims();
    let [n, h, w, bins] = plan.ray_dims();
    let channels = ctx.channels();
    if gq.dims() != [nx, ny, channels] {
        return Err(Error::ContextMismatch(format!(
            "gradient has shape {:?}, forward produced {:?}",
            gq.dims(),
            [nx, ny, channels]
        )));
    }
    let g = standard(&gq.data);
    let p = ctx.occupancy.as_slice().unwrap();
    let f = ctx.features.as_slice().unwrap();
    let d = ctx.depth.as_slice().unwrap();
    let voxel = plan.slot_voxel();
    let ray_slot = plan.ray_slot();

    let mut gp = vec![T::zero(); nx * ny * nz];
    gp.par_chunks_mut(nz)
        .with_min_len(64)
        .enumerate()
        .for_each(|(col, out)| {
            let gcol = &g[col * channels..][..channels];
            for s in plan.column_slots(col) {
                let wrow = &ctx.slot_features[s * channels..][..channels];
                let dot: f64 = wrow.iter().zip(gcol).map(|(a, b)| a.widen() * b.widen()).sum();
                out[voxel[s] as usize % nz] = T::narrow(dot);
            }
        });

    let mut gf = vec![T::zero(); n * h * w * channels];
    let mut gd = vec![T::zero(); n * h * w * bins];
    gf.par_chunks_mut(channels)
        .zip(gd.par_chunks_mut(bins))
        .with_min_len(16)
        .enumerate()
        .for_each_init(
            || vec![0f64; channels],
            |acc, (pix, (gf_row, gd_row))| {
                acc.fill(0.0);
                let frow = &f[pix * channels..][..channels];
                for k in 0..bins {
                    let r = pix * bins + k;
                    let slot = ray_slot[r];
                    if slot == NO_SLOT {
                        continue;
                    }
                    let v = voxel[slot as usize] as usize;
                    let col = v / nz;
                    let weight = p[v].widen();
                    let gcol = &g[col * channels..][..channels];
                    let dot: f64 = frow.iter().zip(gcol).map(|(a, b)| a.widen() * b.widen()).sum();
                    gd_row[k] = T::narrow(weight * dot);
                    let scale = d[r].widen() * weight;
                    for (a, gv) in acc.iter_mut().zip(gcol) {
                        *a += scale * gv.widen();
                    }
                }
                for (o, a) in gf_row.iter_mut().zip(acc.iter()) {
                    *o = T::narrow(*a);
                }
            },
        );

    Ok(KernelGrads {
        features: FeatureMap::new(Array4::from_shape_vec((n, h, w, channels), gf).unwrap()),
        depth: DepthMap::new(Array4::from_shape_vec((n, h, w, bins), gd).unwrap()),
        occupancy: OccupancyConfidence::new(Array3::from_shape_vec((nx, ny, nz), gp).unwrap()),
    })
}

#[cfg(test)]
mod tests;
