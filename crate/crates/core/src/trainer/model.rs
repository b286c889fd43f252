//! The trained pipeline: depth head → encoder stack → linear occupancy probe.
//!
//! The historical frame runs through the same encoder stack (without a
//! history input of its own) and its output enters every current-frame
//! encoder's temporal fusion as a constant: no gradient flows back through it.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{bev_loss, bev_probabilities, bin_depths, depth_loss};
use crate::baselines::Method;
use crate::error::{Error, Result};
use crate::geometry::{build_voxel_coords, FrustumSpec, VoxelGridSpec};
use crate::heads::{
    depth_head, depth_head_backward, encoder_stack, encoder_stack_backward, EncoderInputs, EncoderParams, Gating,
    LinearLayer, MlpHead, OccupancyActivation,
};
use crate::kernel::{BevFeature, DepthMap, FeatureMap, Reduction, ScatterPlan};
use crate::real::Real;
use crate::synth::{render_sample, Scene};

/// Tensor shapes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub depth_bins: usize,
    pub grid: [usize; 3],
    pub n_encoders: usize,
}

/// A flat copy of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Single linear layer `L → D`.
    pub depth_head: MlpHead<T>,
    pub encoders: Vec<EncoderParams<T>>,
    /// Learned initial BEV feature.
    pub q0: BevFeature<T>,
    /// Linear `L → 1` occupancy probe.
    pub probe: LinearLayer<T>,
}

impl<T: Real> ModelParams<T> {
    /// Fan-in uniform weights, zero biases, `Q₀` uniform in `±1/√L`.
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = dims.channels;
        let depth_head = MlpHead::init(&[l, dims.depth_bins], &mut rng);
        let encoders = (0..dims.n_encoders)
            .map(|_| EncoderParams::init(l, dims.grid[2], &mut rng))
            .collect();
        let bound = 1.0 / (l as f64).sqrt();
        let q0 = BevFeature::new(Array3::from_shape_fn((dims.grid[0], dims.grid[1], l), |_| {
            T::narrow(rng.random_range(-bound..=bound))
        }));
        let probe = LinearLayer::init(l, 1, &mut rng);
        Self {
            depth_head,
            encoders,
            q0,
            probe,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            depth_head: self.depth_head.zeros_like(),
            encoders: self.encoders.iter().map(EncoderParams::zeros_like).collect(),
            q0: BevFeature::zeros(self.q0.dims()),
            probe: LinearLayer::zeros(self.probe.input_dim(), self.probe.output_dim()),
        }
    }

    pub fn dims(&self) -> ModelDims {
        let [nx, ny, l] = self.q0.dims();
        ModelDims {
            channels: l,
            depth_bins: self.depth_head.output_dim(),
            grid: [nx, ny, self.encoders[0].occupancy_head.output_dim()],
            n_encoders: self.encoders.len(),
        }
    }

    /// Visits every tensor in a fixed order with a stable name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.depth_head.visit("depth_head", f);
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit(&format!("encoder.{i}"), f);
        }
        f("q0", self.q0.data.shape(), self.q0.data.as_slice().unwrap());
        self.probe.visit("probe", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.depth_head.visit_mut("depth_head", f);
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&format!("encoder.{i}"), f);
        }
        let shape = self.q0.data.shape().to_vec();
        f("q0", &shape, self.q0.data.as_slice_mut().unwrap());
        self.probe.visit_mut("probe", f);
    }

    pub fn tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, data| {
            out.push(NamedTensor {
                name: name.to_owned(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        out
    }

    /// Overwrites every tensor from `tensors`, which must match by name,
    /// order and shape.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor<T>]) -> Result<()> {
        let mut it = tensors.iter();
        let mut err = None;
        self.visit_mut(&mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match it.next() {
                Some(t) if t.name == name && t.shape == shape => data.copy_from_slice(&t.data),
                Some(t) if t.name == name => {
                    err = Some(Error::ShapeMismatch {
                        what: "parameter tensor",
                        expected: shape.to_vec(),
                        got: t.shape.clone(),
                    })
                }
                Some(t) => err = Some(Error::invalid("parameters", format!("expected `{name}`, found `{}`", t.name))),
                None => err = Some(Error::invalid("parameters", format!("missing `{name}`"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = it.next() {
            return Err(Error::invalid("parameters", format!("unexpected tensor `{}`", extra.name)));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        let flat = other.tensors();
        let mut i = 0;
        self.visit_mut(&mut |_, _, data| {
            for (a, b) in data.iter_mut().zip(&flat[i].data) {
                *a = *a + *b;
            }
            i += 1;
        });
    }

    pub fn scale(&mut self, s: T) {
        self.visit_mut(&mut |_, _, data| data.iter_mut().for_each(|v| *v = *v * s));
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(&self.dims(), 0);
        let tensors: Vec<NamedTensor<U>> = self
            .tensors()
            .into_iter()
            .map(|t| NamedTensor {
                name: t.name,
                shape: t.shape,
                data: t.data.iter().map(|v| U::narrow(v.widen())).collect(),
            })
            .collect();
        out.load_tensors(&tensors).expect("same layout");
        out
    }
}

/// Everything fixed about a forward pass apart from the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineSetup {
    pub method: Method,
    pub activation: OccupancyActivation,
    pub reduction: Reduction,
    pub lambda_depth: f64,
    pub lambda_bev: f64,
}

impl PipelineSetup {
    fn gating(&self) -> Gating {
        self.method.gating(self.activation)
    }
}

/// Rendered and precomputed inputs for one scene.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    pub features_prev: FeatureMap<T>,
    pub features_curr: FeatureMap<T>,
    /// Nearest-bin depth targets for the current frame, `-1` where unsupervised.
    pub depth_target: Array3<i32>,
    pub occupancy: Array2<bool>,
    /// Current-frame rays into the current ego grid.
    pub plan_curr: ScatterPlan,
    /// Previous-frame rays carried into the current ego grid.
    pub plan_prev: ScatterPlan,
}

pub fn prepare_sample<T: Real>(
    scene: &Scene,
    frustum: &FrustumSpec,
    grid: &VoxelGridSpec,
    channels: usize,
) -> Result<PreparedSample<T>> {
    let sample = render_sample::<T>(scene, grid, channels)?;
    let curr = build_voxel_coords(&scene.rig, frustum, grid, None)?;
    let prev = build_voxel_coords(
        &scene.rig,
        frustum,
        grid,
        Some((&scene.ego_pose_prev, &scene.ego_pose_curr)),
    )?;
    Ok(PreparedSample {
        features_prev: sample.features_prev,
        features_curr: sample.features_curr,
        depth_target: bin_depths(&sample.depth_gt_curr, frustum),
        occupancy: sample.bev_occupancy_gt,
        plan_curr: ScatterPlan::new(&curr),
        plan_prev: ScatterPlan::new(&prev),
    })
}

/// Per-sample loss terms. `depth` is `None` when the method has no depth
/// head or the frame has no supervised pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bev: f64,
    pub depth: Option<f64>,
}

fn camera_depth<T: Real>(
    params: &ModelParams<T>,
    features: &FeatureMap<T>,
    plan: &ScatterPlan,
    setup: &PipelineSetup,
) -> Result<(DepthMap<T>, Option<crate::heads::DepthTrace<T>>)> {
    if setup.method.uses_predicted_depth() {
        let (d, t) = depth_head(features, &params.depth_head)?;
        Ok((d, Some(t)))
    } else {
        Ok((DepthMap::uniform(plan.ray_dims()), None))
    }
}

/// Output of the historical branch, treated as a constant downstream.
pub fn history_feature<T: Real>(
    params: &ModelParams<T>,
    sample: &PreparedSample<T>,
    setup: &PipelineSetup,
) -> Result<BevFeature<T>> {
    let (depth, _) = camera_depth(params, &sample.features_prev, &sample.plan_prev, setup)?;
    let inputs = EncoderInputs {
        features: &sample.features_prev,
        depth: &depth,
        plan: &sample.plan_prev,
        gating: setup.gating(),
        reduction: setup.reduction,
    };
    Ok(encoder_stack(&params.q0, None, &inputs, &params.encoders)?.0)
}

struct CurrentPass<T> {
    q: BevFeature<T>,
    depth: DepthMap<T>,
    depth_trace: Option<crate::heads::DepthTrace<T>>,
    stack: crate::heads::StackTrace<T>,
}

fn current_pass<T: Real>(
    params: &ModelParams<T>,
    sample: &PreparedSample<T>,
    setup: &PipelineSetup,
    history: &BevFeature<T>,
) -> Result<CurrentPass<T>> {
    let (depth, depth_trace) = camera_depth(params, &sample.features_curr, &sample.plan_curr, setup)?;
    let inputs = EncoderInputs {
        features: &sample.features_curr,
        depth: &depth,
        plan: &sample.plan_curr,
        gating: setup.gating(),
        reduction: setup.reduction,
    };
    let (q, stack) = encoder_stack(&params.q0, Some(history), &inputs, &params.encoders)?;
    Ok(CurrentPass {
        q,
        depth,
        depth_trace,
        stack,
    })
}

fn depth_term<T: Real>(
    pass: &CurrentPass<T>,
    sample: &PreparedSample<T>,
) -> Result<Option<super::loss::DepthLoss<T>>> {
    if pass.depth_trace.is_none() {
        return Ok(None);
    }
    match depth_loss(&pass.depth, &sample.depth_target) {
        Ok(l) => Ok(Some(l)),
        Err(Error::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Loss with `history` held fixed.
pub fn loss_only<T: Real>(
    params: &ModelParams<T>,
    sample: &PreparedSample<T>,
    setup: &PipelineSetup,
    history: &BevFeature<T>,
) -> Result<LossParts> {
    let pass = current_pass(params, sample, setup, history)?;
    let bev = bev_loss(&pass.q, &params.probe, &sample.occupancy)?.loss;
    let depth = depth_term(&pass, sample)?.map(|d| d.loss);
    Ok(LossParts {
        total: setup.lambda_bev * bev + setup.lambda_depth * depth.unwrap_or(0.0),
        bev,
        depth,
    })
}

/// Loss and parameter gradient with `history` held fixed.
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    sample: &PreparedSample<T>,
    setup: &PipelineSetup,
    history: &BevFeature<T>,
) -> Result<(LossParts, ModelParams<T>)> {
    let pass = current_pass(params, sample, setup, history)?;
    let bl = bev_loss(&pass.q, &params.probe, &sample.occupancy)?;
    let dl = depth_term(&pass, sample)?;

    let lb = T::narrow(setup.lambda_bev);
    let ld = T::narrow(setup.lambda_depth);
    let g_q = BevFeature::new(bl.grad_q.data.mapv(|g| g * lb));
    let sg = encoder_stack_backward(&params.encoders, &pass.stack, &g_q)?;

    let depth_head_grad = match &pass.depth_trace {
        Some(trace) => {
            let g_logits = dl.as_ref().map(|d| DepthMap::new(d.grad_logits.data.mapv(|g| g * ld)));
            depth_head_backward(&params.depth_head, trace, Some(&sg.depth), g_logits.as_ref())?
        }
        None => params.depth_head.zeros_like(),
    };
    let mut probe = bl.grad_probe;
    probe.weight.mapv_inplace(|g| g * lb);
    probe.bias.mapv_inplace(|g| g * lb);

    let depth = dl.map(|d| d.loss);
    let parts = LossParts {
        total: setup.lambda_bev * bl.loss + setup.lambda_depth * depth.unwrap_or(0.0),
        bev: bl.loss,
        depth,
    };
    let grads = ModelParams {
        depth_head: depth_head_grad,
        encoders: sg.encoders,
        q0: sg.q0,
        probe,
    };
    Ok((parts, grads))
}

/// BEV occupancy probabilities and loss terms for one sample.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    sample: &PreparedSample<T>,
    setup: &PipelineSetup,
) -> Result<(Array2<f64>, LossParts)> {
    let history = history_feature(params, sample, setup)?;
    let pass = current_pass(params, sample, setup, &history)?;
    let probs = bev_probabilities(&pass.q, &params.probe)?;
    let bev = bev_loss(&pass.q, &params.probe, &sample.occupancy)?.loss;
    let depth = depth_term(&pass, sample)?.map(|d| d.loss);
    Ok((
        probs,
        LossParts {
            total: setup.lambda_bev * bev + setup.lambda_depth * depth.unwrap_or(0.0),
            bev,
            depth,
        },
    ))
}
