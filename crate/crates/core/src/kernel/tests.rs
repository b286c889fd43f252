use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fixtures::{bitwise_eq, max_rel_diff, random_instance, InstanceDims, InstanceOptions};
use crate::geometry::VoxelCoords;

fn coords(idx: Vec<[i32; 3]>, valid: Vec<bool>, shape: (usize, usize, usize, usize), grid: [usize; 3]) -> VoxelCoords {
    VoxelCoords {
        indices: Array4::from_shape_vec(shape, idx).unwrap(),
        valid: Array4::from_shape_vec(shape, valid).unwrap(),
        grid_dims: grid,
    }
}

#[test]
fn single_ray_accumulates_feature() {
    let cv = coords(vec![[0, 0, 0]], vec![true], (1, 1, 1, 1), [1, 1, 1]);
    let plan = ScatterPlan::new(&cv);
    let f = FeatureMap::new(Array4::from_shape_vec((1, 1, 1, 2), vec![1.0f32, 2.0]).unwrap());
    let d = DepthMap::new(Array4::from_elem((1, 1, 1, 1), 1.0f32));
    let w = accumulate_voxels(&f, &d, &plan, Reduction::Deterministic).unwrap();
    assert_eq!(w.data.as_slice().unwrap(), &[1.0, 2.0]);
}

#[test]
fn two_rays_share_a_voxel() {
    let cv = coords(vec![[0, 0, 0]; 2], vec![true; 2], (1, 1, 2, 1), [1, 1, 1]);
    let plan = ScatterPlan::new(&cv);
    let f = FeatureMap::new(Array4::from_shape_vec((1, 1, 2, 2), vec![2.0f32, 0.0, 0.0, 2.0]).unwrap());
    let d = DepthMap::new(Array4::from_elem((1, 1, 2, 1), 0.5f32));
    for r in [Reduction::Deterministic, Reduction::Relaxed] {
        let w = accumulate_voxels(&f, &d, &plan, r).unwrap();
        assert_eq!(w.data.as_slice().unwrap(), &[1.0, 1.0]);
    }
}

#[test]
fn accumulate_matches_triple_loop_exactly() {
    let dims = InstanceDims::tiny();
    for seed in 0..5 {
        let inst = random_instance::<f32>(seed, &dims, InstanceOptions::default());
        let w = accumulate_voxels(&inst.features, &inst.depth, &inst.plan, Reduction::Deterministic).unwrap();
        let mut oracle = Array4::<f64>::zeros((16, 16, 4, 8));
        for ((n, h, ww, k), ok) in inst.coords.valid.indexed_iter() {
            if *ok {
                let [x, y, z] = inst.coords.indices[[n, h, ww, k]].map(|v| v as usize);
                for c in 0..8 {
                    oracle[[x, y, z, c]] +=
                        inst.features.data[[n, h, ww, c]] as f64 * inst.depth.data[[n, h, ww, k]] as f64;
                }
            }
        }
        let oracle = oracle.mapv(|v| v as f32);
        assert!(bitwise_eq(w.data.as_slice().unwrap(), oracle.as_slice().unwrap()));
    }
}

#[test]
fn invalid_rays_contribute_nothing() {
    let cv = coords(vec![[0, 0, 0], [5, 5, 5]], vec![true, false], (1, 1, 1, 2), [1, 1, 1]);
    let plan = ScatterPlan::new(&cv);
    let f = FeatureMap::new(Array4::from_elem((1, 1, 1, 1), 3.0f64));
    let d = DepthMap::new(Array4::from_shape_vec((1, 1, 1, 2), vec![0.25, 0.75]).unwrap());
    let w = accumulate_voxels(&f, &d, &plan, Reduction::Deterministic).unwrap();
    assert_eq!(w.data[[0, 0, 0, 0]], 0.75);
}

#[test]
fn splat_identity_and_annihilation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = VoxelFeature::new(Array4::from_shape_fn((3, 2, 1, 4), |_| rng.random_range(-1.0..1.0f32)));
    let q = splat(&w, &OccupancyConfidence::ones([3, 2, 1])).unwrap();
    assert_eq!(q.data.as_slice().unwrap(), w.data.as_slice().unwrap());
    let q = splat(&w, &OccupancyConfidence::zeros([3, 2, 1])).unwrap();
    assert!(q.data.iter().all(|v| *v == 0.0));
}

#[test]
fn splat_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = VoxelFeature::new(Array4::from_shape_fn((5, 4, 3, 6), |_| rng.random_range(-1.0..1.0f32)));
    let p = OccupancyConfidence::new(Array3::from_shape_fn((5, 4, 3), |_| rng.random_range(0.0..1.0f32)));
    let q = splat(&w, &p).unwrap();
    let mut oracle = Array3::<f32>::zeros((5, 4, 6));
    for x in 0..5 {
        for y in 0..4 {
            for c in 0..6 {
                for z in 0..3 {
                    oracle[[x, y, c]] += p.data[[x, y, z]] * w.data[[x, y, z, c]];
                }
            }
        }
    }
    assert!(max_rel_diff(q.data.as_slice().unwrap(), oracle.as_slice().unwrap()) < 1e-6);
}

#[test]
fn forward_is_bitwise_naive_and_close_to_literal() {
    let dims = InstanceDims::tiny();
    for seed in 0..10 {
        let inst = random_instance::<f32>(seed, &dims, InstanceOptions::default());
        let (q, _) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
        let naive = dva_forward_naive(&inst.features, &inst.depth, &inst.coords, &inst.occupancy).unwrap();
        assert!(bitwise_eq(q.data.as_slice().unwrap(), naive.data.as_slice().unwrap()));
        let literal = dva_forward_literal(&inst.features, &inst.depth, &inst.coords, &inst.occupancy).unwrap();
        assert!(max_rel_diff(q.data.as_slice().unwrap(), literal.data.as_slice().unwrap()) < 1e-6);

        let w = accumulate_voxels(&inst.features, &inst.depth, &inst.plan, Reduction::Deterministic).unwrap();
        let factored = splat(&w, &inst.occupancy).unwrap();
        assert!(bitwise_eq(q.data.as_slice().unwrap(), factored.data.as_slice().unwrap()));
    }
}

#[test]
fn relaxed_agrees_with_deterministic() {
    let dims = InstanceDims::tiny();
    let inst = random_instance::<f32>(4, &dims, InstanceOptions::default());
    let (a, _) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
    let (b, _) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Relaxed).unwrap();
    assert!(max_rel_diff(b.data.as_slice().unwrap(), a.data.as_slice().unwrap()) < 1e-5);
}

#[test]
fn deterministic_output_ignores_thread_count() {
    let dims = InstanceDims::tiny();
    let inst = random_instance::<f32>(9, &dims, InstanceOptions::default());
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic)
                    .unwrap()
                    .0
            })
    };
    let one = run(1);
    let many = run(5);
    assert!(bitwise_eq(one.data.as_slice().unwrap(), many.data.as_slice().unwrap()));
}

#[test]
fn conservation_with_unit_occupancy() {
    let dims = InstanceDims::tiny();
    let opts = InstanceOptions {
        valid_fraction: 1.0,
        normalized_depth: true,
    };
    let inst = random_instance::<f32>(5, &dims, opts);
    let ones = OccupancyConfidence::ones(dims.grid);
    let (q, _) = dva_forward(&inst.features, &inst.depth, &inst.plan, &ones, Reduction::Deterministic).unwrap();
    for c in 0..dims.channels {
        let total_q: f64 = q.data.index_axis(ndarray::Axis(2), c).iter().map(|v| *v as f64).sum();
        let total_f: f64 = inst.features.data.index_axis(ndarray::Axis(3), c).iter().map(|v| *v as f64).sum();
        let scale: f64 = inst.features.data.index_axis(ndarray::Axis(3), c).iter().map(|v| (*v as f64).abs()).sum();
        assert!((total_q - total_f).abs() <= 1e-5 * scale.max(total_f.abs()), "channel {c}");
    }
}

#[test]
fn zero_features_give_zero_output() {
    let dims = InstanceDims::tiny();
    let mut inst = random_instance::<f32>(6, &dims, InstanceOptions::default());
    inst.features.data.fill(0.0);
    let (q, _) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
    assert!(q.data.iter().all(|v| *v == 0.0));
}

#[test]
fn backward_zero_gradient() {
    let dims = InstanceDims::tiny();
    let inst = random_instance::<f32>(7, &dims, InstanceOptions::default());
    let (q, ctx) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
    let g = dva_backward(&BevFeature::zeros(q.dims()), &ctx).unwrap();
    assert!(g.features.data.iter().all(|v| *v == 0.0));
    assert!(g.depth.data.iter().all(|v| *v == 0.0));
    assert!(g.occupancy.data.iter().all(|v| *v == 0.0));
}

#[test]
fn backward_single_ray_scalar_chain_rule() {
    let cv = coords(vec![[1, 0, 0]], vec![true], (1, 1, 1, 1), [2, 1, 1]);
    let plan = ScatterPlan::new(&cv);
    let f = FeatureMap::new(Array4::from_elem((1, 1, 1, 1), 3.0f64));
    let d = DepthMap::new(Array4::from_elem((1, 1, 1, 1), 0.5));
    let p = OccupancyConfidence::new(Array3::from_shape_vec((2, 1, 1), vec![0.9, 0.25]).unwrap());
    let (q, ctx) = dva_forward(&f, &d, &plan, &p, Reduction::Deterministic).unwrap();
    assert_eq!(q.data[[1, 0, 0]], 3.0 * 0.5 * 0.25);
    let gq = BevFeature::new(Array3::from_shape_vec((2, 1, 1), vec![7.0, 2.0]).unwrap());
    let g = dva_backward(&gq, &ctx).unwrap();
    assert_eq!(g.depth.data[[0, 0, 0, 0]], 3.0 * 0.25 * 2.0);
    assert_eq!(g.features.data[[0, 0, 0, 0]], 0.5 * 0.25 * 2.0);
    assert_eq!(g.occupancy.data[[1, 0, 0]], 1.5 * 2.0);
    assert_eq!(g.occupancy.data[[0, 0, 0]], 0.0);
}

#[test]
fn backward_matches_central_differences() {
    let dims = InstanceDims {
        cameras: 1,
        height: 3,
        width: 3,
        bins: 3,
        grid: [3, 3, 2],
        channels: 3,
    };
    let inst = random_instance::<f64>(8, &dims, InstanceOptions::default());
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let gq = BevFeature::new(Array3::from_shape_fn((3, 3, 3), |_| rng.random_range(-1.0..1.0)));
    let loss = |f: &FeatureMap<f64>, d: &DepthMap<f64>, p: &OccupancyConfidence<f64>| -> f64 {
        let (q, _) = dva_forward(f, d, &inst.plan, p, Reduction::Deterministic).unwrap();
        (&q.data * &gq.data).sum()
    };
    let (_, ctx) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
    let g = dva_backward(&gq, &ctx).unwrap();
    let h = 1e-5;
    let check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
    };
    for i in 0..inst.features.data.len() {
        let mut fp = inst.features.clone();
        let mut fm = inst.features.clone();
        fp.data.as_slice_mut().unwrap()[i] += h;
        fm.data.as_slice_mut().unwrap()[i] -= h;
        check(
            g.features.data.as_slice().unwrap()[i],
            loss(&fp, &inst.depth, &inst.occupancy),
            loss(&fm, &inst.depth, &inst.occupancy),
        );
    }
    for i in 0..inst.depth.data.len() {
        let mut dp = inst.depth.clone();
        let mut dm = inst.depth.clone();
        dp.data.as_slice_mut().unwrap()[i] += h;
        dm.data.as_slice_mut().unwrap()[i] -= h;
        check(
            g.depth.data.as_slice().unwrap()[i],
            loss(&inst.features, &dp, &inst.occupancy),
            loss(&inst.features, &dm, &inst.occupancy),
        );
    }
    for i in 0..inst.occupancy.data.len() {
        let mut pp = inst.occupancy.clone();
        let mut pm = inst.occupancy.clone();
        pp.data.as_slice_mut().unwrap()[i] += h;
        pm.data.as_slice_mut().unwrap()[i] -= h;
        check(
            g.occupancy.data.as_slice().unwrap()[i],
            loss(&inst.features, &inst.depth, &pp),
            loss(&inst.features, &inst.depth, &pm),
        );
    }
}

#[test]
fn shape_errors() {
    let dims = InstanceDims::tiny();
    let inst = random_instance::<f32>(1, &dims, InstanceOptions::default());
    let bad_f = FeatureMap::<f32>::zeros([2, 8, 7, 8]);
    assert!(matches!(
        dva_forward(&bad_f, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic),
        Err(Error::ShapeMismatch { what: "feature map", .. })
    ));
    let bad_d = DepthMap::<f32>::zeros([2, 8, 8, 3]);
    assert!(dva_forward(&inst.features, &bad_d, &inst.plan, &inst.occupancy, Reduction::Deterministic).is_err());
    let bad_p = OccupancyConfidence::<f32>::zeros([16, 16, 3]);
    assert!(dva_forward(&inst.features, &inst.depth, &inst.plan, &bad_p, Reduction::Deterministic).is_err());
    assert!(dva_forward_naive(&inst.features, &inst.depth, &inst.coords, &bad_p).is_err());

    let (_, ctx) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
    assert!(matches!(
        dva_backward(&BevFeature::zeros([16, 16, 7]), &ctx),
        Err(Error::ContextMismatch(_))
    ));
}

#[test]
fn context_exposes_dense_voxel_feature() {
    let dims = InstanceDims::tiny();
    let inst = random_instance::<f32>(3, &dims, InstanceOptions::default());
    let (_, ctx) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic).unwrap();
    let dense = accumulate_voxels(&inst.features, &inst.depth, &inst.plan, Reduction::Deterministic).unwrap();
    assert_eq!(ctx.voxel_feature(), dense);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn forward_is_linear_in_features(seed in 0u64..1000, alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
            let dims = InstanceDims::tiny();
            let a = random_instance::<f64>(seed, &dims, InstanceOptions::default());
            let b = random_instance::<f64>(seed + 1, &dims, InstanceOptions::default());
            let fwd = |f: &FeatureMap<f64>| {
                dva_forward(f, &a.depth, &a.plan, &a.occupancy, Reduction::Deterministic).unwrap().0.data
            };
            let mixed = FeatureMap::new(&a.features.data * alpha + &b.features.data * beta);
            let lhs = fwd(&mixed);
            let rhs = fwd(&a.features) * alpha + fwd(&b.features) * beta;
            prop_assert!(max_rel_diff(lhs.as_slice().unwrap(), rhs.as_slice().unwrap()) < 1e-5);
        }

        #[test]
        fn uniform_gating_scales_output(seed in 0u64..1000, alpha in 0.0..1.0f32) {
            let dims = InstanceDims::tiny();
            let inst = random_instance::<f32>(seed, &dims, InstanceOptions::default());
            let fwd = |p: &OccupancyConfidence<f32>| {
                dva_forward(&inst.features, &inst.depth, &inst.plan, p, Reduction::Deterministic).unwrap().0.data
            };
            let base = fwd(&OccupancyConfidence::ones(dims.grid));
            let scaled = fwd(&OccupancyConfidence::new(Array3::from_elem(dims.grid, alpha)));
            for (s, b) in scaled.iter().zip(base.iter()) {
                prop_assert!((*s as f64 - alpha as f64 * *b as f64).abs() <= 1e-6 * (b.abs() as f64).max(1e-6));
            }
        }
    }
}
