//! Learnable components around the kernel, each with a hand-written backward.
//!
//! Per-pixel and per-cell heads operate on row matrices: a feature map
//! `N×H×W×L` is viewed as `(N·H·W) × L`, a BEV map `X×Y×L` as `(X·Y) × L`.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    dva_backward, dva_forward, BevFeature, DepthMap, FeatureMap, KernelContext, OccupancyConfidence,
    Reduction, ScatterPlan,
};
use crate::real::Real;

/// `y = x·Wᵀ + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> LinearLayer<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Weights uniform in `[-1/√in, 1/√in]`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| {
                T::narrow(rng.random_range(-bound..=bound))
            }),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "linear input",
                &[x.nrows(), self.input_dim()],
                x.shape(),
            ));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Returns `(parameter gradient, input gradient)`.
    pub fn backward(&self, x: ArrayView2<T>, gy: ArrayView2<T>) -> (LinearLayer<T>, Array2<T>) {
        let grad = LinearLayer {
            weight: gy.t().dot(&x),
            bias: gy.sum_axis(Axis(0)),
        };
        (grad, gy.dot(&self.weight))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&format!("{prefix}.weight"), self.weight.shape(), self.weight.as_slice().unwrap());
        f(&format!("{prefix}.bias"), self.bias.shape(), self.bias.as_slice().unwrap());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let shape = self.weight.shape().to_vec();
        f(&format!("{prefix}.weight"), &shape, self.weight.as_slice_mut().unwrap());
        let shape = self.bias.shape().to_vec();
        f(&format!("{prefix}.bias"), &shape, self.bias.as_slice_mut().unwrap());
    }
}

/// Linear layers with `max(0, x)` between them (not after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T> {
    pub layers: Vec<LinearLayer<T>>,
}

/// Inputs to every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace<T> {
    inputs: Vec<Array2<T>>,
}

fn relu<T: Real>(x: Array2<T>) -> Array2<T> {
    x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
}

impl<T: Real> MlpHead<T> {
    pub fn new(layers: Vec<LinearLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp", "at least one layer is required"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::invalid(
                    "mlp",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].output_dim(),
                        i + 1,
                        pair[1].input_dim()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Layer widths `dims[0] → dims[1] → … → dims[k]`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims.windows(2).map(|w| LinearLayer::init(w[0], w[1], rng)).collect();
        Self::new(layers).expect("chained dims")
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LinearLayer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<(Array2<T>, MlpTrace<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(h.view())?;
            inputs.push(h);
            h = if i + 1 < self.layers.len() { relu(y) } else { y };
        }
        Ok((h, MlpTrace { inputs }))
    }

    pub fn backward(&self, trace: &MlpTrace<T>, g_out: Array2<T>) -> (MlpHead<T>, Array2<T>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = g_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (lg, gx) = layer.backward(trace.inputs[i].view(), g.view());
            grads.push(lg);
            g = if i > 0 {
                // Input i is relu of the previous pre-activation; subgradient 0 at 0.
                let mut gx = gx;
                ndarray::Zip::from(&mut gx)
                    .and(&trace.inputs[i])
                    .for_each(|gv, a| {
                        if *a <= T::zero() {
                            *gv = T::zero();
                        }
                    });
                gx
            } else {
                gx
            };
        }
        grads.reverse();
        (MlpHead { layers: grads }, g)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

fn rows<T: Real>(data: &[T], width: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((data.len() / width, width), data).expect("row view")
}

/// Row-wise normalised exponential, computed in `f64`.
pub fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(logits.raw_dim());
    let mut exps = vec![0f64; logits.ncols()];
    for (row, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.widen()));
        for (e, v) in exps.iter_mut().zip(row.iter()) {
            *e = (v.widen() - max).exp();
        }
        let sum: f64 = exps.iter().sum();
        for (d, e) in dst.iter_mut().zip(&exps) {
            *d = T::narrow(e / sum);
        }
    }
    out
}

/// `g_logit = p ⊙ (g - ⟨g, p⟩)` row by row.
pub fn softmax_backward<T: Real>(probs: ArrayView2<T>, g: ArrayView2<T>) -> Array2<T> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, gr), mut dst) in probs.rows().into_iter().zip(g.rows()).zip(out.rows_mut()) {
        let dot: f64 = p.iter().zip(gr.iter()).map(|(a, b)| a.widen() * b.widen()).sum();
        for ((d, pv), gv) in dst.iter_mut().zip(p.iter()).zip(gr.iter()) {
            *d = T::narrow(pv.widen() * (gv.widen() - dot));
        }
    }
    out
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct DepthTrace<T> {
    mlp: MlpTrace<T>,
    probs: Array2<T>,
}

/// Per-pixel head over the `L` channels followed by a softmax over depth bins.
pub fn depth_head<T: Real>(f: &FeatureMap<T>, head: &MlpHead<T>) -> Result<(DepthMap<T>, DepthTrace<T>)> {
    let [n, h, w, l] = f.dims();
    if head.input_dim() != l {
        return Err(Error::shape("depth head input", &[head.input_dim()], &[l]));
    }
    let data = f.data.as_standard_layout();
    let (logits, mlp) = head.forward(rows(data.as_slice().unwrap(), l))?;
    let probs = softmax_rows(&logits);
    let bins = head.output_dim();
    let depth = DepthMap::new(
        probs
            .clone()
            .into_shape_with_order((n, h, w, bins))
            .expect("depth shape"),
    );
    Ok((depth, DepthTrace { mlp, probs }))
}

impl<T: Real> DepthTrace<T> {
    /// Softmax outputs as a `(pixels × D)` matrix.
    pub fn probs(&self) -> ArrayView2<'_, T> {
        self.probs.view()
    }
}

/// Parameter gradient of the depth head given gradients w.r.t. its
/// probabilities and/or directly w.r.t. its logits.
pub fn depth_head_backward<T: Real>(
    head: &MlpHead<T>,
    trace: &DepthTrace<T>,
    g_depth: Option<&DepthMap<T>>,
    g_logits: Option<&DepthMap<T>>,
) -> Result<MlpHead<T>> {
    let mut g = Array2::<T>::zeros(trace.probs.raw_dim());
    if let Some(gd) = g_depth {
        let gd = gd.data.as_standard_layout();
        let gd = rows(gd.as_slice().unwrap(), trace.probs.ncols());
        if gd.shape() != trace.probs.shape() {
            return Err(Error::shape("depth gradient", trace.probs.shape(), gd.shape()));
        }
        g = g + softmax_backward(trace.probs.view(), gd);
    }
    if let Some(gl) = g_logits {
        let gl = gl.data.as_standard_layout();
        let gl = rows(gl.as_slice().unwrap(), trace.probs.ncols());
        if gl.shape() != trace.probs.shape() {
            return Err(Error::shape("logit gradient", trace.probs.shape(), gl.shape()));
        }
        g = g + gl;
    }
    Ok(head.backward(&trace.mlp, g).0)
}

/// Squashing applied to the occupancy head's output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccupancyActivation {
    /// Independent logistic per voxel.
    #[default]
    Logistic,
    /// Softmax over the `Z` voxels of each BEV column.
    SoftmaxHeight,
}

#[derive(Debug, Clone)]
pub struct OccupancyTrace<T> {
    mlp: MlpTrace<T>,
    probs: Array2<T>,
    activation: OccupancyActivation,
}

/// Per-cell MLP `L → … → Z` followed by `activation`.
pub fn occupancy_head<T: Real>(
    q: &BevFeature<T>,
    head: &MlpHead<T>,
    activation: OccupancyActivation,
) -> Result<(OccupancyConfidence<T>, OccupancyTrace<T>)> {
    let [nx, ny, l] = q.dims();
    if head.input_dim() != l {
        return Err(Error::shape("occupancy head input", &[head.input_dim()], &[l]));
    }
    let data = q.data.as_standard_layout();
    let (logits, mlp) = head.forward(rows(data.as_slice().unwrap(), l))?;
    let probs = match activation {
        OccupancyActivation::Logistic => logits.mapv(|v| T::narrow(logistic(v.widen()))),
        OccupancyActivation::SoftmaxHeight => softmax_rows(&logits),
    };
    let nz = head.output_dim();
    let p = OccupancyConfidence::new(
        probs
            .clone()
            .into_shape_with_order((nx, ny, nz))
            .expect("occupancy shape"),
    );
    Ok((
        p,
        OccupancyTrace {
            mlp,
            probs,
            activation,
        },
    ))
}

/// Returns `(parameter gradient, gradient w.r.t. the input BEV feature)`.
pub fn occupancy_head_backward<T: Real>(
    head: &MlpHead<T>,
    trace: &OccupancyTrace<T>,
    g: &OccupancyConfidence<T>,
) -> Result<(MlpHead<T>, BevFeature<T>)> {
    let [nx, ny, nz] = g.dims();
    if [nx * ny, nz] != [trace.probs.nrows(), trace.probs.ncols()] {
        return Err(Error::shape(
            "occupancy gradient",
            &[trace.probs.nrows(), trace.probs.ncols()],
            &[nx * ny, nz],
        ));
    }
    let gd = g.data.as_standard_layout();
    let gp = rows(gd.as_slice().unwrap(), nz);
    let g_logits = match trace.activation {
        OccupancyActivation::Logistic => {
            let mut out = gp.to_owned();
            ndarray::Zip::from(&mut out).and(&trace.probs).for_each(|gv, p| {
                let p = p.widen();
                *gv = T::narrow(gv.widen() * p * (1.0 - p));
            });
            out
        }
        OccupancyActivation::SoftmaxHeight => softmax_backward(trace.probs.view(), gp),
    };
    let (grad, gx) = head.backward(&trace.mlp, g_logits);
    let l = head.input_dim();
    Ok((
        grad,
        BevFeature::new(gx.into_shape_with_order((nx, ny, l)).expect("bev shape")),
    ))
}

/// `σ(gate)·current + (1 − σ(gate))·history`.
///
/// Stands in for deformable temporal self-attention.
pub fn temporal_fuse<T: Real>(current: &BevFeature<T>, history: &BevFeature<T>, gate: T) -> Result<BevFeature<T>> {
    if current.dims() != history.dims() {
        return Err(Error::shape("history BEV feature", &current.dims(), &history.dims()));
    }
    let s = logistic(gate.widen());
    let mut out = current.data.clone();
    ndarray::Zip::from(&mut out).and(&history.data).for_each(|c, h| {
        *c = T::narrow(s * c.widen() + (1.0 - s) * h.widen());
    });
    Ok(BevFeature::new(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseGrads<T> {
    pub current: BevFeature<T>,
    pub history: BevFeature<T>,
    pub gate: T,
}

pub fn temporal_fuse_backward<T: Real>(
    current: &BevFeature<T>,
    history: &BevFeature<T>,
    gate: T,
    g_out: &BevFeature<T>,
) -> Result<FuseGrads<T>> {
    if g_out.dims() != current.dims() || history.dims() != current.dims() {
        return Err(Error::shape("fusion gradient", &current.dims(), &g_out.dims()));
    }
    let s = logistic(gate.widen());
    let g_current = g_out.data.mapv(|g| T::narrow(s * g.widen()));
    let g_history = g_out.data.mapv(|g| T::narrow((1.0 - s) * g.widen()));
    let mut acc = 0f64;
    ndarray::Zip::from(&g_out.data)
        .and(&current.data)
        .and(&history.data)
        .for_each(|g, c, h| acc += g.widen() * (c.widen() - h.widen()));
    Ok(FuseGrads {
        current: BevFeature::new(g_current),
        history: BevFeature::new(g_history),
        gate: T::narrow(acc * s * (1.0 - s)),
    })
}

/// Source of the BEV-side weight inside an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    /// Predicted from the incoming BEV feature.
    Occupancy(OccupancyActivation),
    /// Constant one: no BEV-side weighting.
    Unit,
}

/// Parameters of one encoder: occupancy head `L → L → Z`, residual FFN
/// `L → L → L` and the temporal fusion gate.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub occupancy_head: MlpHead<T>,
    pub ffn: MlpHead<T>,
    pub fusion_gate: T,
}

impl<T: Real> EncoderParams<T> {
    pub fn init(channels: usize, height_cells: usize, rng: &mut impl Rng) -> Self {
        Self {
            occupancy_head: MlpHead::init(&[channels, channels, height_cells], rng),
            ffn: MlpHead::init(&[channels, channels, channels], rng),
            fusion_gate: T::zero(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            occupancy_head: self.occupancy_head.zeros_like(),
            ffn: self.ffn.zeros_like(),
            fusion_gate: T::zero(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.occupancy_head.visit(&format!("{prefix}.occupancy"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        f(&format!("{prefix}.fusion_gate"), &[1], std::slice::from_ref(&self.fusion_gate));
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.occupancy_head.visit_mut(&format!("{prefix}.occupancy"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        f(&format!("{prefix}.fusion_gate"), &[1], std::slice::from_mut(&mut self.fusion_gate));
    }
}

/// Camera-side inputs shared by every encoder of a stack.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInputs<'a, T> {
    pub features: &'a FeatureMap<T>,
    pub depth: &'a DepthMap<T>,
    pub plan: &'a ScatterPlan,
    pub gating: Gating,
    pub reduction: Reduction,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    occupancy: Option<OccupancyTrace<T>>,
    kernel: KernelContext<T>,
    fused: Option<(BevFeature<T>, BevFeature<T>)>,
    ffn: MlpTrace<T>,
}

/// `Q₁ = dva(F, D, P(Q))`, `Q₂ = fuse(Q₁, Q_hist)` (identity without
/// history), output `Q₂ + ffn(Q₂)`.
pub fn encoder_step<T: Real>(
    q: &BevFeature<T>,
    history: Option<&BevFeature<T>>,
    inputs: &EncoderInputs<'_, T>,
    params: &EncoderParams<T>,
) -> Result<(BevFeature<T>, EncoderTrace<T>)> {
    let grid = inputs.plan.grid_dims();
    let (p, occ_trace) = match inputs.gating {
        Gating::Occupancy(act) => {
            let (p, t) = occupancy_head(q, &params.occupancy_head, act)?;
            (p, Some(t))
        }
        Gating::Unit => (OccupancyConfidence::ones(grid), None),
    };
    let (q1, kernel) = dva_forward(inputs.features, inputs.depth, inputs.plan, &p, inputs.reduction)?;
    let (q2, fused) = match history {
        Some(h) => (temporal_fuse(&q1, h, params.fusion_gate)?, Some((q1, h.clone()))),
        None => (q1, None),
    };
    let l = q2.dims()[2];
    if params.ffn.input_dim() != l || params.ffn.output_dim() != l {
        return Err(Error::shape("ffn", &[l, l], &[params.ffn.input_dim(), params.ffn.output_dim()]));
    }
    let q2_data = q2.data.as_standard_layout();
    let (delta, ffn) = params.ffn.forward(rows(q2_data.as_slice().unwrap(), l))?;
    let out = &q2.data + &delta.into_shape_with_order(q2.data.raw_dim()).expect("ffn shape");
    Ok((
        BevFeature::new(out),
        EncoderTrace {
            occupancy: occ_trace,
            kernel,
            fused,
            ffn,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct EncoderStepGrads<T> {
    pub params: EncoderParams<T>,
    /// Gradient w.r.t. the incoming BEV feature.
    pub q: BevFeature<T>,
    pub depth: DepthMap<T>,
    pub features: FeatureMap<T>,
    /// Gradient w.r.t. the history input, when one was fused.
    pub history: Option<BevFeature<T>>,
}

pub fn encoder_step_backward<T: Real>(
    params: &EncoderParams<T>,
    trace: &EncoderTrace<T>,
    g_out: &BevFeature<T>,
) -> Result<EncoderStepGrads<T>> {
    let [nx, ny, l] = g_out.dims();
    let g = g_out.data.as_standard_layout();
    let (ffn_grad, g_through) = params.ffn.backward(&trace.ffn, rows(g.as_slice().unwrap(), l).to_owned());
    let g_q2 = BevFeature::new(&g_out.data + &g_through.into_shape_with_order((nx, ny, l)).unwrap());

    let (g_q1, gate, g_hist) = match &trace.fused {
        Some((q1, hist)) => {
            let fg = temporal_fuse_backward(q1, hist, params.fusion_gate, &g_q2)?;
            (fg.current, fg.gate, Some(fg.history))
        }
        None => (g_q2, T::zero(), None),
    };

    let kg = dva_backward(&g_q1, &trace.kernel)?;
    let (occ_grad, g_q) = match &trace.occupancy {
        Some(t) => occupancy_head_backward(&params.occupancy_head, t, &kg.occupancy)?,
        None => (params.occupancy_head.zeros_like(), BevFeature::zeros([nx, ny, l])),
    };
    Ok(EncoderStepGrads {
        params: EncoderParams {
            occupancy_head: occ_grad,
            ffn: ffn_grad,
            fusion_gate: gate,
        },
        q: g_q,
        depth: kg.depth,
        features: kg.features,
        history: g_hist,
    })
}

#[derive(Debug, Clone)]
pub struct StackTrace<T> {
    /// Index of the first encoder that was evaluated.
    first: usize,
    steps: Vec<EncoderTrace<T>>,
}

/// Iterates [`encoder_step`] over `params`, starting from `q0`.
///
/// Under [`Gating::Unit`] a step ignores its incoming feature, so only the
/// last encoder is evaluated; the result is identical.
pub fn encoder_stack<T: Real>(
    q0: &BevFeature<T>,
    history: Option<&BevFeature<T>>,
    inputs: &EncoderInputs<'_, T>,
    params: &[EncoderParams<T>],
) -> Result<(BevFeature<T>, StackTrace<T>)> {
    if params.is_empty() {
        return Err(Error::invalid("encoder stack", "at least one encoder is required"));
    }
    let first = match inputs.gating {
        Gating::Unit => params.len() - 1,
        Gating::Occupancy(_) => 0,
    };
    let mut q = q0.clone();
    let mut steps = Vec::with_capacity(params.len() - first);
    for p in &params[first..] {
        let (next, t) = encoder_step(&q, history, inputs, p)?;
        steps.push(t);
        q = next;
    }
    Ok((q, StackTrace { first, steps }))
}

#[derive(Debug, Clone)]
pub struct StackGrads<T> {
    pub encoders: Vec<EncoderParams<T>>,
    pub q0: BevFeature<T>,
    pub depth: DepthMap<T>,
    pub features: FeatureMap<T>,
    /// Summed over encoders; `None` without history.
    pub history: Option<BevFeature<T>>,
}

pub fn encoder_stack_backward<T: Real>(
    params: &[EncoderParams<T>],
    trace: &StackTrace<T>,
    g_out: &BevFeature<T>,
) -> Result<StackGrads<T>> {
    if params.len() != trace.first + trace.steps.len() {
        return Err(Error::ContextMismatch(format!(
            "trace covers {} encoders, got {}",
            trace.first + trace.steps.len(),
            params.len()
        )));
    }
    let mut g = g_out.clone();
    let mut encoders = Vec::with_capacity(params.len());
    let mut depth: Option<Array4<T>> = None;
    let mut features: Option<Array4<T>> = None;
    let mut history: Option<Array3<T>> = None;
    for (p, t) in params[trace.first..].iter().zip(&trace.steps).rev() {
        let sg = encoder_step_backward(p, t, &g)?;
        encoders.push(sg.params);
        depth = Some(match depth {
            Some(d) => d + &sg.depth.data,
            None => sg.depth.data,
        });
        features = Some(match features {
            Some(f) => f + &sg.features.data,
            None => sg.features.data,
        });
        if let Some(h) = sg.history {
            history = Some(match history {
                Some(acc) => acc + &h.data,
                None => h.data,
            });
        }
        g = sg.q;
    }
    encoders.extend(params[..trace.first].iter().rev().map(EncoderParams::zeros_like));
    encoders.reverse();
    Ok(StackGrads {
        encoders,
        q0: g,
        depth: DepthMap::new(depth.expect("non-empty stack")),
        features: FeatureMap::new(features.expect("non-empty stack")),
        history: history.map(BevFeature::new),
    })
}
