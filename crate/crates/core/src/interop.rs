//! Boundary layer for foreign-language callers.
//!
//! Everything here works on plain row-major arrays: voxel coordinates are an
//! `i32` array of shape `[N, H, W, D, 3]` plus a `bool` mask `[N, H, W, D]`,
//! and kernel tensors are borrowed views that must already be contiguous.
//! Backward contexts stay on this side of the boundary behind opaque,
//! single-use handles.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use ndarray::{Array3, Array4, Array5, ArrayView3, ArrayView4, ArrayView5, Dimension};

use crate::error::{Error, Result};
use crate::geometry::{build_voxel_coords, GeometryConfig, VoxelCoords};
use crate::kernel::{dva_backward, dva_forward_view, BevFeature, KernelContext, KernelGrads, Reduction, ScatterPlan};
use crate::real::Real;

/// Voxel coordinates as flat arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVoxelCoords {
    pub indices: Array5<i32>,
    pub valid: Array4<bool>,
    pub grid_dims: [usize; 3],
}

impl RawVoxelCoords {
    pub fn from_coords(cv: &VoxelCoords) -> Self {
        let [n, h, w, d] = cv.ray_dims();
        let flat: Vec<i32> = cv.indices.iter().flat_map(|idx| *idx).collect();
        Self {
            indices: Array5::from_shape_vec((n, h, w, d, 3), flat).expect("three entries per ray"),
            valid: cv.valid.clone(),
            grid_dims: cv.grid_dims,
        }
    }
}

/// Builds voxel coordinates from a geometry JSON document.
pub fn build_voxel_coords_json(json: &str) -> Result<RawVoxelCoords> {
    let cfg = GeometryConfig::from_json(json)?;
    let cv = build_voxel_coords(&cfg.rig()?, &cfg.frustum()?, &cfg.grid()?, None)?;
    Ok(RawVoxelCoords::from_coords(&cv))
}

fn contiguous<D: Dimension, T>(name: &'static str, a: &ndarray::ArrayView<'_, T, D>) -> Result<()> {
    if a.is_standard_layout() {
        Ok(())
    } else {
        Err(Error::NonContiguous(name))
    }
}

/// Rebuilds [`VoxelCoords`] from flat arrays. Index ranges are checked when a
/// plan is built from the result.
pub fn voxel_coords_from_raw(
    indices: ArrayView5<'_, i32>,
    valid: ArrayView4<'_, bool>,
    grid_dims: [usize; 3],
) -> Result<VoxelCoords> {
    contiguous("indices", &indices)?;
    contiguous("valid", &valid)?;
    let s = indices.shape();
    if s[4] != 3 || s[..4] != *valid.shape() {
        let v = valid.shape();
        return Err(Error::shape("indices", &[v[0], v[1], v[2], v[3], 3], s));
    }
    let triples = indices.as_slice().expect("checked contiguous").chunks_exact(3);
    let idx: Vec<[i32; 3]> = triples.map(|c| [c[0], c[1], c[2]]).collect();
    let cv = VoxelCoords {
        indices: Array4::from_shape_vec(valid.raw_dim(), idx).expect("shape checked"),
        valid: valid.to_owned(),
        grid_dims,
    };
    Ok(cv)
}

/// Forward pass on caller arrays; returns `Q̃` and the context to keep for
/// the backward pass.
pub fn forward_raw<T: Real>(
    features: ArrayView4<'_, T>,
    depth: ArrayView4<'_, T>,
    indices: ArrayView5<'_, i32>,
    valid: ArrayView4<'_, bool>,
    occupancy: ArrayView3<'_, T>,
    deterministic: bool,
) -> Result<(Array3<T>, KernelContext<T>)> {
    contiguous("features", &features)?;
    contiguous("depth", &depth)?;
    contiguous("occupancy", &occupancy)?;
    let p = occupancy.shape();
    let cv = voxel_coords_from_raw(indices, valid, [p[0], p[1], p[2]])?;
    let plan = ScatterPlan::try_new(&cv)?;
    let reduction = if deterministic {
        Reduction::Deterministic
    } else {
        Reduction::Relaxed
    };
    let (q, ctx) = dva_forward_view(features, depth, &plan, occupancy, reduction)?;
    Ok((q.data, ctx))
}

/// Owner of backward contexts handed out as opaque `u64` handles.
///
/// A handle is consumed by [`ContextRegistry::backward`] or
/// [`ContextRegistry::release`]; any later use yields [`Error::StaleHandle`].
/// Safe to share between threads.
#[derive(Debug)]
pub struct ContextRegistry<T> {
    next: AtomicU64,
    live: Mutex<HashMap<u64, KernelContext<T>>>,
}

impl<T> Default for ContextRegistry<T> {
    fn default() -> Self {
        Self {
            next: AtomicU64::new(1),
            live: Mutex::new(HashMap::new()),
        }
    }
}

impl<T: Real> ContextRegistry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, ctx: KernelContext<T>) -> u64 {
        let handle = self.next.fetch_add(1, Ordering::Relaxed);
        self.live.lock().expect("registry lock").insert(handle, ctx);
        handle
    }

    fn take(&self, handle: u64) -> Result<KernelContext<T>> {
        self.live
            .lock()
            .expect("registry lock")
            .remove(&handle)
            .ok_or(Error::StaleHandle(handle))
    }

    /// [`forward_raw`] that registers the context.
    pub fn forward(
        &self,
        features: ArrayView4<'_, T>,
        depth: ArrayView4<'_, T>,
        indices: ArrayView5<'_, i32>,
        valid: ArrayView4<'_, bool>,
        occupancy: ArrayView3<'_, T>,
        deterministic: bool,
    ) -> Result<(Array3<T>, u64)> {
        let (q, ctx) = forward_raw(features, depth, indices, valid, occupancy, deterministic)?;
        Ok((q, self.insert(ctx)))
    }

    /// Consumes `handle`. A gradient of the wrong shape still consumes it.
    pub fn backward(&self, handle: u64, grad: ArrayView3<'_, T>) -> Result<KernelGrads<T>> {
        let ctx = self.take(handle)?;
        contiguous("grad", &grad)?;
        dva_backward(&BevFeature::new(grad.to_owned()), &ctx)
    }

    /// Drops a context without running the backward pass.
    pub fn release(&self, handle: u64) -> Result<()> {
        self.take(handle).map(drop)
    }

    pub fn len(&self) -> usize {
        self.live.lock().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
