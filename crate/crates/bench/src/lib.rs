//! Shared setup for the criterion benchmarks in `benches/`.

use dva_core::fixtures::{geometric_instance, InstanceDims, KernelInstance};

/// Half-setting kernel instance (N=6, H=W=16, D=16, grid 128×128×8, L=32).
pub fn half_setting_instance() -> KernelInstance<f32> {
    geometric_instance(0, &InstanceDims::half_setting())
}

/// Tiny kernel instance (N=2, H=W=8, D=4, grid 16×16×4, L=8).
pub fn tiny_instance() -> KernelInstance<f32> {
    geometric_instance(0, &InstanceDims::tiny())
}
