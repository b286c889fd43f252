//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each suite builds a scalar loss `⟨G, output⟩` (or a real loss), computes
//! the analytic gradient once and compares it entry by entry against
//! `(L(x + h) − L(x − h)) / 2h`. The error of an entry is
//! `|a − n| / max(|a|, |n|, 1e-6)`.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fixtures::{random_instance, InstanceDims, InstanceOptions};
use crate::geometry::{CameraRig, FrustumSpec, VoxelGridSpec};
use crate::heads::{
    depth_head, depth_head_backward, occupancy_head, occupancy_head_backward, softmax_rows, temporal_fuse,
    temporal_fuse_backward, LinearLayer, MlpHead, OccupancyActivation,
};
use crate::kernel::{dva_backward, dva_forward, BevFeature, DepthMap, OccupancyConfidence, Reduction};
use crate::real::Real;
use crate::synth::{generate_scene, Scene};
use crate::trainer::{
    bev_loss, depth_loss, history_feature, loss_and_grad, loss_only, prepare_sample, ModelDims, ModelParams,
    PipelineSetup, UNSUPERVISED,
};
use crate::baselines::Method;

/// Tolerance for single components.
pub const COMPONENT_TOLERANCE: f64 = 1e-4;
/// Tolerance for the composed pipeline.
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
const ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub dims: InstanceDims,
    pub seed: u64,
    pub step: f64,
    /// Negates the kernel's depth gradient before comparison (mutation test).
    pub inject_gd_sign_flip: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: InstanceDims::tiny(),
            seed: 0,
            step: 1e-5,
            inject_gd_sign_flip: false,
        }
    }
}

/// Worst disagreement over one tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub suite: String,
    pub tensor: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub threshold: f64,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub precision: &'static str,
    pub checks: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(TensorCheck::passed)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

struct Checker<'a> {
    step: f64,
    out: &'a mut Vec<TensorCheck>,
}

impl Checker<'_> {
    /// Compares `analytic` against central differences of `loss` over the
    /// entries of `base`.
    fn tensor<T: Real>(
        &mut self,
        suite: &str,
        tensor: &str,
        threshold: f64,
        base: &[T],
        analytic: &[T],
        mut loss: impl FnMut(&[T]) -> f64,
    ) {
        assert_eq!(base.len(), analytic.len(), "{suite}/{tensor}: gradient length");
        let mut x = base.to_vec();
        let (mut worst_rel, mut worst_abs) = (0f64, 0f64);
        for i in 0..x.len() {
            let orig = x[i];
            let plus = T::narrow(orig.widen() + self.step);
            let minus = T::narrow(orig.widen() - self.step);
            x[i] = plus;
            let lp = loss(&x);
            x[i] = minus;
            let lm = loss(&x);
            x[i] = orig;
            let numeric = (lp - lm) / (plus.widen() - minus.widen());
            let a = analytic[i].widen();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
            worst_rel = worst_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
            worst_abs = worst_abs.max(abs);
        }
        self.out.push(TensorCheck {
            suite: suite.to_owned(),
            tensor: tensor.to_owned(),
            entries: x.len(),
            max_rel_error: worst_rel,
            max_abs_error: worst_abs,
            threshold,
        });
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

fn random_vec<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::narrow(rng.random_range(-1.0..1.0))).collect()
}

fn slice<T, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn with_data<T: Clone, D: ndarray::Dimension>(a: &ndarray::Array<T, D>, data: &[T]) -> ndarray::Array<T, D> {
    ndarray::Array::from_shape_vec(a.raw_dim(), data.to_vec()).expect("same length")
}

fn dva_suite<T: Real>(cfg: &GradcheckConfig, c: &mut Checker) -> Result<()> {
    let inst = random_instance::<T>(cfg.seed, &cfg.dims, InstanceOptions::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1A);
    let [nx, ny, _] = cfg.dims.grid;
    let g: Vec<T> = random_vec(&mut rng, nx * ny * cfg.dims.channels);
    let gq = BevFeature::new(Array3::from_shape_vec((nx, ny, cfg.dims.channels), g.clone()).unwrap());
    let (_, ctx) = dva_forward(&inst.features, &inst.depth, &inst.plan, &inst.occupancy, Reduction::Deterministic)?;
    let mut grads = dva_backward(&gq, &ctx)?;
    if cfg.inject_gd_sign_flip {
        grads.depth.data.mapv_inplace(|v| -v);
    }
    let fwd = |f: &Array4<T>, d: &Array4<T>, p: &Array3<T>| {
        let (q, _) = dva_forward(
            &crate::kernel::FeatureMap::new(f.clone()),
            &DepthMap::new(d.clone()),
            &inst.plan,
            &OccupancyConfidence::new(p.clone()),
            Reduction::Deterministic,
        )
        .expect("valid instance");
        dot(slice(&q.data), &g)
    };
    let (f, d, p) = (&inst.features.data, &inst.depth.data, &inst.occupancy.data);
    c.tensor("dva", "features", COMPONENT_TOLERANCE, slice(f), slice(&grads.features.data), |x| {
        fwd(&with_data(f, x), d, p)
    });
    c.tensor("dva", "depth", COMPONENT_TOLERANCE, slice(d), slice(&grads.depth.data), |x| {
        fwd(f, &with_data(d, x), p)
    });
    c.tensor("dva", "occupancy", COMPONENT_TOLERANCE, slice(p), slice(&grads.occupancy.data), |x| {
        fwd(f, d, &with_data(p, x))
    });
    Ok(())
}

fn random_targets(rng: &mut ChaCha8Rng, dims: [usize; 3], bins: usize) -> Array3<i32> {
    Array3::from_shape_fn(dims, |_| {
        if rng.random_bool(0.25) {
            UNSUPERVISED
        } else {
            rng.random_range(0..bins) as i32
        }
    })
}

fn head_tensor_names(prefix: &str, head: &MlpHead<impl Real>) -> Vec<String> {
    let mut names = Vec::new();
    head.visit(prefix, &mut |n, _, _| names.push(n.to_owned()));
    names
}

/// Runs `check(layer, is_weight)` over every tensor of `head` with a loss of
/// the perturbed head.
fn check_head<T: Real>(
    c: &mut Checker,
    suite: &str,
    prefix: &str,
    head: &MlpHead<T>,
    grad: &MlpHead<T>,
    threshold: f64,
    loss: impl Fn(&MlpHead<T>) -> f64,
) {
    let names = head_tensor_names(prefix, head);
    let mut k = 0;
    for (li, layer) in head.layers.iter().enumerate() {
        let gl = &grad.layers[li];
        c.tensor(suite, &names[k], threshold, slice(&layer.weight), slice(&gl.weight), |x| {
            let mut h = head.clone();
            h.layers[li].weight = with_data(&layer.weight, x);
            loss(&h)
        });
        c.tensor(suite, &names[k + 1], threshold, slice(&layer.bias), slice(&gl.bias), |x| {
            let mut h = head.clone();
            h.layers[li].bias = with_data(&layer.bias, x);
            loss(&h)
        });
        k += 2;
    }
}

fn depth_head_suite<T: Real>(cfg: &GradcheckConfig, c: &mut Checker) -> Result<()> {
    let inst = random_instance::<T>(cfg.seed + 1, &cfg.dims, InstanceOptions::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDE97);
    let bins = cfg.dims.bins;
    let head = MlpHead::<T>::init(&[cfg.dims.channels, bins], &mut rng);
    let [n, h, w, _] = cfg.dims.ray_dims();
    let targets = random_targets(&mut rng, [n, h, w], bins);

    // Cross-entropy through the softmax.
    let (d, trace) = depth_head(&inst.features, &head)?;
    let dl = depth_loss(&d, &targets)?;
    let grad = depth_head_backward(&head, &trace, None, Some(&dl.grad_logits))?;
    check_head(c, "depth_head", "cross_entropy", &head, &grad, COMPONENT_TOLERANCE, |hd| {
        let (d, _) = depth_head(&inst.features, hd).expect("shapes");
        depth_loss(&d, &targets).expect("supervised").loss
    });

    // Arbitrary upstream gradient on the probabilities.
    let g: Vec<T> = random_vec(&mut rng, n * h * w * bins);
    let gd = DepthMap::new(Array4::from_shape_vec((n, h, w, bins), g.clone()).unwrap());
    let grad = depth_head_backward(&head, &trace, Some(&gd), None)?;
    check_head(c, "depth_head", "probabilities", &head, &grad, COMPONENT_TOLERANCE, |hd| {
        let (d, _) = depth_head(&inst.features, hd).expect("shapes");
        dot(slice(&d.data), &g)
    });
    Ok(())
}

fn occupancy_head_suite<T: Real>(cfg: &GradcheckConfig, c: &mut Checker) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0CC);
    let [nx, ny, nz] = cfg.dims.grid;
    let l = cfg.dims.channels;
    let q = BevFeature::new(Array3::from_shape_vec((nx, ny, l), random_vec::<T>(&mut rng, nx * ny * l)).unwrap());
    let head = MlpHead::<T>::init(&[l, l, nz], &mut rng);
    let g: Vec<T> = random_vec(&mut rng, nx * ny * nz);
    let gp = OccupancyConfidence::new(Array3::from_shape_vec((nx, ny, nz), g.clone()).unwrap());
    for (act, suite) in [
        (OccupancyActivation::Logistic, "occupancy_head"),
        (OccupancyActivation::SoftmaxHeight, "occupancy_head_softmax"),
    ] {
        let (_, trace) = occupancy_head(&q, &head, act)?;
        let (grad, gq) = occupancy_head_backward(&head, &trace, &gp)?;
        let loss = |q: &BevFeature<T>, h: &MlpHead<T>| dot(slice(&occupancy_head(q, h, act).expect("shapes").0.data), &g);
        check_head(c, suite, "occupancy", &head, &grad, COMPONENT_TOLERANCE, |h| loss(&q, h));
        c.tensor(suite, "input", COMPONENT_TOLERANCE, slice(&q.data), slice(&gq.data), |x| {
            loss(&BevFeature::new(with_data(&q.data, x)), &head)
        });
    }
    Ok(())
}

fn fusion_suite<T: Real>(cfg: &GradcheckConfig, c: &mut Checker) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF05E);
    let [nx, ny, _] = cfg.dims.grid;
    let l = cfg.dims.channels;
    let mk = |rng: &mut ChaCha8Rng| Array3::from_shape_vec((nx, ny, l), random_vec::<T>(rng, nx * ny * l)).unwrap();
    let (cur, hist, g) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let gate = T::narrow(0.4);
    let fg = temporal_fuse_backward(
        &BevFeature::new(cur.clone()),
        &BevFeature::new(hist.clone()),
        gate,
        &BevFeature::new(g.clone()),
    )?;
    let loss = |a: &Array3<T>, b: &Array3<T>, gate: T| {
        let out = temporal_fuse(&BevFeature::new(a.clone()), &BevFeature::new(b.clone()), gate).expect("shapes");
        dot(slice(&out.data), slice(&g))
    };
    c.tensor("temporal_fuse", "current", COMPONENT_TOLERANCE, slice(&cur), slice(&fg.current.data), |x| {
        loss(&with_data(&cur, x), &hist, gate)
    });
    c.tensor("temporal_fuse", "history", COMPONENT_TOLERANCE, slice(&hist), slice(&fg.history.data), |x| {
        loss(&cur, &with_data(&hist, x), gate)
    });
    c.tensor("temporal_fuse", "gate", COMPONENT_TOLERANCE, &[gate], &[fg.gate], |x| loss(&cur, &hist, x[0]));
    Ok(())
}

fn depth_loss_suite<T: Real>(cfg: &GradcheckConfig, c: &mut Checker) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1055);
    let [n, h, w, bins] = cfg.dims.ray_dims();
    let rows = n * h * w;
    let logits = Array2::from_shape_vec((rows, bins), random_vec::<T>(&mut rng, rows * bins)).unwrap();
    let targets = random_targets(&mut rng, [n, h, w], bins);
    let probs = |z: &Array2<T>| DepthMap::new(softmax_rows(z).into_shape_with_order((n, h, w, bins)).unwrap());
    let dl = depth_loss(&probs(&logits), &targets)?;
    c.tensor("depth_loss", "logits", COMPONENT_TOLERANCE, slice(&logits), slice(&dl.grad_logits.data), |x| {
        depth_loss(&probs(&with_data(&logits, x)), &targets).expect("supervised").loss
    });
    Ok(())
}

fn bev_loss_suite<T: Real>(cfg: &GradcheckConfig, c: &mut Checker) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBE7);
    let [nx, ny, _] = cfg.dims.grid;
    let l = cfg.dims.channels;
    let q = Array3::from_shape_vec((nx, ny, l), random_vec::<T>(&mut rng, nx * ny * l)).unwrap();
    let probe = LinearLayer::<T>::init(l, 1, &mut rng);
    let mut probe = probe;
    probe.bias[0] = T::narrow(-0.3);
    let gt = Array2::from_shape_fn((nx, ny), |_| rng.random_bool(0.3));
    let bl = bev_loss(&BevFeature::new(q.clone()), &probe, &gt)?;
    let loss = |q: &Array3<T>, p: &LinearLayer<T>| bev_loss(&BevFeature::new(q.clone()), p, &gt).expect("shapes").loss;
    c.tensor("bev_loss", "features", COMPONENT_TOLERANCE, slice(&q), slice(&bl.grad_q.data), |x| {
        loss(&with_data(&q, x), &probe)
    });
    c.tensor("bev_loss", "probe.weight", COMPONENT_TOLERANCE, slice(&probe.weight), slice(&bl.grad_probe.weight), |x| {
        let mut p = probe.clone();
        p.weight = with_data(&probe.weight, x);
        loss(&q, &p)
    });
    c.tensor("bev_loss", "probe.bias", COMPONENT_TOLERANCE, slice(&probe.bias), slice(&bl.grad_probe.bias), |x| {
        let mut p = probe.clone();
        p.bias = with_data(&probe.bias, x);
        loss(&q, &p)
    });
    Ok(())
}

/// A scene on a small rig whose current frame has supervised depth pixels.
pub fn tiny_scene(dims: &InstanceDims, seed: u64) -> Result<(Scene, FrustumSpec, VoxelGridSpec)> {
    let rig = CameraRig::surround(dims.cameras, dims.height, dims.width, 1.5)?;
    let frustum = FrustumSpec::uniform(1.0, 23.5, dims.bins)?;
    let grid = VoxelGridSpec::new(dims.grid, [-16.0, -16.0, -1.0], [16.0, 16.0, 3.0])?;
    let mut s = seed;
    loop {
        let scene = generate_scene(s, 6, &rig, &grid)?;
        let visible = (0..rig.num_cameras()).any(|cam| {
            crate::synth::render_depth(&scene, cam, crate::synth::Timestamp::Current)
                .iter()
                .any(|d| d.is_finite())
        });
        if visible {
            return Ok((scene, frustum, grid));
        }
        s += 1;
    }
}

fn pipeline_suite<T: Real>(cfg: &GradcheckConfig, c: &mut Checker) -> Result<()> {
    let dims = cfg.dims;
    let (scene, frustum, grid) = tiny_scene(&dims, cfg.seed)?;
    let sample = prepare_sample::<T>(&scene, &frustum, &grid, dims.channels)?;
    let model_dims = ModelDims {
        channels: dims.channels,
        depth_bins: dims.bins,
        grid: dims.grid,
        n_encoders: 1,
    };
    let mut params = ModelParams::<T>::init(&model_dims, cfg.seed);
    // Zero biases put empty cells exactly on ReLU kinks; jitter every entry.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x919E);
    params.visit_mut(&mut |_, _, data| {
        for v in data.iter_mut() {
            *v = T::narrow(v.widen() + rng.random_range(-0.25..0.25));
        }
    });
    let setup = PipelineSetup {
        method: Method::Dva,
        activation: OccupancyActivation::Logistic,
        reduction: Reduction::Deterministic,
        lambda_depth: 1.0,
        lambda_bev: 1.0,
    };
    // The historical branch is a constant of the loss.
    let history = history_feature(&params, &sample, &setup)?;
    let (_, grads) = loss_and_grad(&params, &sample, &setup, &history)?;
    let analytic = grads.tensors();
    for (k, t) in params.tensors().iter().enumerate() {
        c.tensor("pipeline", &t.name, PIPELINE_TOLERANCE, &t.data, &analytic[k].data, |x| {
            let mut p = params.clone();
            let mut tensors = p.tensors();
            tensors[k].data.copy_from_slice(x);
            p.load_tensors(&tensors).expect("same layout");
            loss_only(&p, &sample, &setup, &history).expect("valid sample").total
        });
    }
    Ok(())
}

/// Runs every suite in precision `T`.
pub fn run<T: Real>(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    let mut c = Checker {
        step: cfg.step,
        out: &mut checks,
    };
    dva_suite::<T>(cfg, &mut c)?;
    depth_head_suite::<T>(cfg, &mut c)?;
    occupancy_head_suite::<T>(cfg, &mut c)?;
    fusion_suite::<T>(cfg, &mut c)?;
    depth_loss_suite::<T>(cfg, &mut c)?;
    bev_loss_suite::<T>(cfg, &mut c)?;
    pipeline_suite::<T>(cfg, &mut c)?;
    Ok(GradcheckReport {
        precision: T::NAME,
        checks,
    })
}
