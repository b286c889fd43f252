//! Dual-view attention BEV feature generation.
//!
//! Camera features are lifted along per-pixel frustum rays, weighted by a
//! camera-side depth distribution and a BEV-side occupancy confidence, and
//! scattered into an ego-frame voxel grid which is then collapsed over height
//! into a bird's-eye-view feature map. Everything is implemented on the CPU
//! with hand-written backward passes.
//!
//! Module map:
//!
//! - [`geometry`]: intrinsics, rigid transforms, frustum lifting, voxel index maps.
//! - [`kernel`]: the scatter-multiply-add forward/backward and its reference oracles.
//! - [`heads`]: depth head, occupancy head, FFN, temporal fusion, encoder stack.
//! - [`baselines`]: camera-only (LSS) and BEV-only specialisations of the kernel.
//! - [`synth`]: synthetic multi-camera scenes, analytic depth, dataset container.
//! - [`trainer`]: losses, training loop, evaluation and checkpoints.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod interop;
pub mod kernel;
pub mod pgm;
pub mod real;
pub mod synth;
pub mod trainer;

pub use baselines::{bev_only_forward, lss_forward, Method};
pub use error::{Error, Result};
pub use geometry::{
    build_voxel_coords, Camera, CameraRig, FrustumSpec, GeometryConfig, Intrinsics, RigidTransform,
    VoxelCoords, VoxelGridSpec,
};
pub use heads::{EncoderParams, LinearLayer, MlpHead, OccupancyActivation};
pub use kernel::{
    dva_backward, dva_forward, dva_forward_naive, BevFeature, DepthMap, FeatureMap, KernelContext,
    OccupancyConfidence, Reduction, ScatterPlan, VoxelFeature,
};
pub use real::Real;
pub use synth::{Box3D, Scene, Timestamp};
pub use trainer::{evaluate, train, TrainConfig, TrainReport};

/// Library version, shared with the CLI and the bindings.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
