//! Wall-clock benchmark of the forward kernel on a surround-rig instance.
//!
//! Each run uses its own rayon pool so thread counts can be compared inside
//! one process.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixtures::{geometric_instance, max_rel_diff, InstanceDims};
use crate::kernel::{dva_forward, Reduction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub grid: [usize; 3],
    pub channels: usize,
    pub reduction: Reduction,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self::from_dims(InstanceDims::half_setting())
    }
}

impl BenchConfig {
    pub fn from_dims(d: InstanceDims) -> Self {
        Self {
            cameras: d.cameras,
            height: d.height,
            width: d.width,
            bins: d.bins,
            grid: d.grid,
            channels: d.channels,
            reduction: Reduction::Deterministic,
            threads: 1,
            repeats: 5,
            seed: 0,
        }
    }

    pub fn dims(&self) -> InstanceDims {
        InstanceDims {
            cameras: self.cameras,
            height: self.height,
            width: self.width,
            bins: self.bins,
            grid: self.grid,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub threads_used: usize,
    pub rays: usize,
    pub valid_rays: usize,
    pub median_seconds: f64,
    pub min_seconds: f64,
    /// Frustum samples (valid or not) processed per second at the median.
    pub rays_per_second: f64,
    /// Max-norm relative difference between relaxed and deterministic output.
    pub relaxed_vs_deterministic: f64,
    /// CRC32 of the output bytes of the benchmarked strategy.
    pub output_crc32: u32,
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats", "must be at least 1"));
    }
    let inst = geometric_instance::<f32>(cfg.seed, &cfg.dims());
    let pool = pool(cfg.threads)?;
    pool.install(|| {
        let forward = |r: Reduction| {
            dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, r).map(|(q, _)| q)
        };
        // Warm-up doubles as the reference outputs.
        let det = forward(Reduction::Deterministic)?;
        let relaxed = forward(Reduction::Relaxed)?;
        let mut times = Vec::with_capacity(cfg.repeats);
        let mut out = None;
        for _ in 0..cfg.repeats {
            let t = Instant::now();
            let q = forward(cfg.reduction)?;
            times.push(t.elapsed().as_secs_f64());
            out = Some(q);
        }
        let out = out.expect("at least one repeat");
        let bytes: Vec<u8> = out.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let med = median(times.clone());
        Ok(BenchReport {
            config: *cfg,
            threads_used: rayon::current_num_threads(),
            rays: inst.plan.num_rays(),
            valid_rays: inst.plan.num_valid_rays(),
            median_seconds: med,
            min_seconds: times.iter().copied().fold(f64::INFINITY, f64::min),
            rays_per_second: inst.plan.num_rays() as f64 / med,
            relaxed_vs_deterministic: max_rel_diff(
                relaxed.data.as_slice().unwrap(),
                det.data.as_slice().unwrap(),
            ),
            output_crc32: crc32fast::hash(&bytes),
        })
    })
}
