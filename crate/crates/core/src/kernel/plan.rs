use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::VoxelCoords;

pub(crate) const NO_SLOT: u32 = u32::MAX;

/// Rays grouped by target voxel, derived once from a [`VoxelCoords`].
///
/// Only voxels hit by at least one valid ray get a *slot*. Slots are ordered
/// by linear voxel index `(x·Y + y)·Z + z`, so the slots of one BEV column are
/// contiguous and ordered by height. Within a slot, rays keep the canonical
/// `(n, h, w, d)` order; reducing a slot front to back therefore reproduces
/// the summation order of the sequential reference loop.
#[derive(Debug, Clone)]
pub struct ScatterPlan {
    inner: Arc<PlanData>,
}

#[derive(Debug)]
struct PlanData {
    ray_dims: [usize; 4],
    grid_dims: [usize; 3],
    ray_slot: Vec<u32>,
    slot_voxel: Vec<u32>,
    slot_start: Vec<u32>,
    slot_rays: Vec<u32>,
    column_start: Vec<u32>,
}

impl ScatterPlan {
    /// Like [`ScatterPlan::new`] but rejects inconsistent shapes and valid
    /// indices outside the grid instead of panicking.
    pub fn try_new(cv: &VoxelCoords) -> Result<Self> {
        if cv.indices.shape() != cv.valid.shape() {
            return Err(Error::shape("voxel validity mask", cv.indices.shape(), cv.valid.shape()));
        }
        if cv.grid_dims.contains(&0) {
            return Err(Error::invalid("grid", "every dimension must be positive"));
        }
        let bad = cv.indices.iter().zip(cv.valid.iter()).position(|(idx, ok)| {
            *ok && idx.iter().zip(cv.grid_dims).any(|(&i, n)| i < 0 || i as usize >= n)
        });
        if let Some(i) = bad {
            let idx = cv.indices.iter().nth(i).expect("position came from this iterator");
            return Err(Error::invalid(
                "voxel indices",
                format!("ray {i} points at {idx:?} outside grid {:?}", cv.grid_dims),
            ));
        }
        Ok(Self::new(cv))
    }

    pub fn new(cv: &VoxelCoords) -> Self {
        let ray_dims = cv.ray_dims();
        let [nx, ny, nz] = cv.grid_dims;
        let n_voxels = nx * ny * nz;
        let n_rays = cv.valid.len();
        assert!(
            n_rays < NO_SLOT as usize && n_voxels < NO_SLOT as usize,
            "plan exceeds u32 indexing"
        );

        let linear: Vec<Option<u32>> = cv
            .indices
            .iter()
            .zip(cv.valid.iter())
            .map(|(idx, ok)| {
                ok.then(|| {
                    let [x, y, z] = idx.map(|v| v as usize);
                    ((x * ny + y) * nz + z) as u32
                })
            })
            .collect();

        let mut counts = vec![0u32; n_voxels];
        for v in linear.iter().flatten() {
            counts[*v as usize] += 1;
        }
        let mut voxel_slot = vec![NO_SLOT; n_voxels];
        let mut slot_voxel = Vec::new();
        let mut slot_start = vec![0u32];
        for (v, c) in counts.iter().enumerate() {
            if *c > 0 {
                voxel_slot[v] = slot_voxel.len() as u32;
                slot_voxel.push(v as u32);
                slot_start.push(slot_start.last().unwrap() + c);
            }
        }
        let mut cursor: Vec<u32> = slot_start[..slot_voxel.len()].to_vec();
        let mut slot_rays = vec![0u32; *slot_start.last().unwrap() as usize];
        let mut ray_slot = vec![NO_SLOT; n_rays];
        for (r, v) in linear.iter().enumerate() {
            if let Some(v) = v {
                let s = voxel_slot[*v as usize];
                ray_slot[r] = s;
                slot_rays[cursor[s as usize] as usize] = r as u32;
                cursor[s as usize] += 1;
            }
        }

        let n_columns = nx * ny;
        let mut column_start = Vec::with_capacity(n_columns + 1);
        let mut s = 0usize;
        for col in 0..n_columns {
            while s < slot_voxel.len() && (slot_voxel[s] as usize) / nz < col {
                s += 1;
            }
            column_start.push(s as u32);
        }
        column_start.push(slot_voxel.len() as u32);

        Self {
            inner: Arc::new(PlanData {
                ray_dims,
                grid_dims: cv.grid_dims,
                ray_slot,
                slot_voxel,
                slot_start,
                slot_rays,
                column_start,
            }),
        }
    }

    /// `[N, H, W, D]`.
    pub fn ray_dims(&self) -> [usize; 4] {
        self.inner.ray_dims
    }

    /// `[X, Y, Z]`.
    pub fn grid_dims(&self) -> [usize; 3] {
        self.inner.grid_dims
    }

    pub fn num_rays(&self) -> usize {
        self.inner.ray_slot.len()
    }

    pub fn num_valid_rays(&self) -> usize {
        self.inner.slot_rays.len()
    }

    /// Number of voxels receiving at least one valid ray.
    pub fn num_slots(&self) -> usize {
        self.inner.slot_voxel.len()
    }

    #[inline]
    pub(crate) fn ray_slot(&self) -> &[u32] {
        &self.inner.ray_slot
    }

    #[inline]
    pub(crate) fn slot_voxel(&self) -> &[u32] {
        &self.inner.slot_voxel
    }

    #[inline]
    pub(crate) fn slot_rays(&self, slot: usize) -> &[u32] {
        let d = &self.inner;
        &d.slot_rays[d.slot_start[slot] as usize..d.slot_start[slot + 1] as usize]
    }

    #[inline]
    pub(crate) fn column_slots(&self, column: usize) -> std::ops::Range<usize> {
        let d = &self.inner;
        d.column_start[column] as usize..d.column_start[column + 1] as usize
    }

}
