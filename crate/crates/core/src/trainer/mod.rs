//! Full-batch training and evaluation of the BEV pipeline on synthetic scenes.

mod checkpoint;
pub mod loss;
pub mod model;

pub use checkpoint::Checkpoint;
pub use loss::{bev_loss, bev_probabilities, bin_depths, depth_loss, BevLoss, DepthLoss, UNSUPERVISED};
pub use model::{
    history_feature, loss_and_grad, loss_only, predict, prepare_sample, LossParts, ModelDims, ModelParams,
    NamedTensor, PipelineSetup, PreparedSample,
};

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::error::{Error, Result};
use crate::geometry::{FrustumSpec, GeometryConfig, GridConfig};
use crate::heads::OccupancyActivation;
use crate::kernel::Reduction;
use crate::synth::{Scene, NUM_CLASSES};

/// Parameter update rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Gradient descent, with optional heavy-ball momentum.
    Sgd,
    /// Adam moments (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) with decoupled weight decay.
    #[default]
    AdamW,
}

/// Hyper-parameters and pipeline shape. Every field has a default, so a
/// JSON document only needs the fields it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub n_encoders: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Decoupled: each step also subtracts `learning_rate · weight_decay · θ`.
    pub weight_decay: f64,
    /// Heavy-ball coefficient for [`Optimizer::Sgd`]; 0 is plain gradient descent.
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lambda_depth: f64,
    pub lambda_bev: f64,
    pub channels: usize,
    pub occupancy_activation: OccupancyActivation,
    pub reduction: Reduction,
    pub grid: GridConfig,
    pub depth_bins: Vec<f64>,
    /// Trailing fraction of the scenes held out for evaluation. When it
    /// rounds to zero scenes (or to all of them) the training scenes are
    /// evaluated instead.
    pub eval_fraction: f64,
    /// Evaluate every this many epochs (0: only after the last one).
    pub eval_every: usize,
    /// Store wall-clock time in the report (makes reports differ between runs).
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let geometry = GeometryConfig::default_surround();
        Self {
            method: Method::Dva,
            n_encoders: 3,
            optimizer: Optimizer::AdamW,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            momentum: 0.0,
            epochs: 200,
            seed: 0,
            lambda_depth: 1.0,
            lambda_bev: 1.0,
            channels: 8,
            occupancy_activation: OccupancyActivation::Logistic,
            reduction: Reduction::Deterministic,
            grid: geometry.grid,
            depth_bins: geometry.depth_bins,
            eval_fraction: 0.2,
            eval_every: 10,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if self.n_encoders == 0 {
            return Err(Error::invalid("config", "n_encoders must be at least 1"));
        }
        if !positive(self.learning_rate) {
            return Err(Error::invalid("config", "learning_rate must be positive"));
        }
        if !non_negative(self.weight_decay) || !non_negative(self.lambda_depth) || !non_negative(self.lambda_bev) {
            return Err(Error::invalid("config", "weight_decay and loss weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("config", "momentum must lie in [0, 1)"));
        }
        if self.channels < NUM_CLASSES + 2 {
            return Err(Error::invalid(
                "config",
                format!("channels must be at least {}", NUM_CLASSES + 2),
            ));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::invalid("config", "eval_fraction must lie in [0, 1)"));
        }
        self.grid.spec()?;
        self.frustum()?;
        Ok(())
    }

    pub fn frustum(&self) -> Result<FrustumSpec> {
        FrustumSpec::new(self.depth_bins.clone())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            channels: self.channels,
            depth_bins: self.depth_bins.len(),
            grid: self.grid.dims,
            n_encoders: self.n_encoders,
        }
    }

    pub fn setup(&self) -> PipelineSetup {
        PipelineSetup {
            method: self.method,
            activation: self.occupancy_activation,
            reduction: self.reduction,
            lambda_depth: if self.method.uses_predicted_depth() {
                self.lambda_depth
            } else {
                0.0
            },
            lambda_bev: self.lambda_bev,
        }
    }

    /// `(train, eval)` scenes; see [`TrainConfig::eval_fraction`].
    pub fn split<'a>(&self, scenes: &'a [Scene]) -> (&'a [Scene], &'a [Scene]) {
        let n_eval = (scenes.len() as f64 * self.eval_fraction).round() as usize;
        if n_eval == 0 || n_eval >= scenes.len() {
            (scenes, scenes)
        } else {
            scenes.split_at(scenes.len() - n_eval)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    /// Mean BEV binary cross-entropy.
    pub bev_loss: f64,
    /// Mean depth cross-entropy over frames with supervised pixels.
    pub depth_loss: Option<f64>,
    /// Pooled intersection over union at probability 0.5.
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bev_loss: f64,
    pub train_depth_loss: Option<f64>,
    /// Evaluation after this epoch's update, when one was scheduled.
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: String,
    pub config: TrainConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub num_parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_eval: Option<EvalReport>,
    pub diverged: Option<Divergence>,
    pub wall_clock_seconds: Option<f64>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    /// `Err(DivergenceDetected)` if training was aborted.
    pub fn check(&self) -> Result<()> {
        match self.report.diverged {
            Some(d) => Err(Error::DivergenceDetected {
                epoch: d.epoch,
                loss: d.loss,
            }),
            None => Ok(()),
        }
    }
}

fn prepare_all(config: &TrainConfig, scenes: &[Scene]) -> Result<Vec<PreparedSample<f32>>> {
    let frustum = config.frustum()?;
    let grid = config.grid.spec()?;
    scenes
        .par_iter()
        .map(|s| prepare_sample(s, &frustum, &grid, config.channels))
        .collect()
}

fn mean_depth(parts: &[LossParts]) -> Option<f64> {
    let supervised: Vec<f64> = parts.iter().filter_map(|p| p.depth).collect();
    (!supervised.is_empty()).then(|| supervised.iter().sum::<f64>() / supervised.len() as f64)
}

fn evaluate_prepared(
    params: &ModelParams<f32>,
    samples: &[PreparedSample<f32>],
    setup: &PipelineSetup,
) -> Result<EvalReport> {
    let results: Vec<(Array2<f64>, LossParts)> =
        samples.par_iter().map(|s| predict(params, s, setup)).collect::<Result<_>>()?;
    let (mut inter, mut union) = (0usize, 0usize);
    for ((probs, _), s) in results.iter().zip(samples) {
        let (i, u) = loss::iou_counts(probs.view(), &s.occupancy, 0.5);
        inter += i;
        union += u;
    }
    let parts: Vec<LossParts> = results.iter().map(|r| r.1).collect();
    Ok(EvalReport {
        scenes: samples.len(),
        bev_loss: parts.iter().map(|p| p.bev).sum::<f64>() / parts.len().max(1) as f64,
        depth_loss: mean_depth(&parts),
        iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
    })
}

/// Scores a checkpoint on every scene in `scenes`.
pub fn evaluate(checkpoint: &Checkpoint, scenes: &[Scene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("dataset", "no scenes to evaluate"));
    }
    let samples = prepare_all(&checkpoint.config, scenes)?;
    evaluate_prepared(&checkpoint.params, &samples, &checkpoint.config.setup())
}

/// Occupancy probabilities `[x, y]` predicted by a checkpoint for one scene.
pub fn predict_scene(checkpoint: &Checkpoint, scene: &Scene) -> Result<Array2<f64>> {
    let config = &checkpoint.config;
    let sample = prepare_sample(scene, &config.frustum()?, &config.grid.spec()?, config.channels)?;
    predict(&checkpoint.params, &sample, &config.setup()).map(|(probs, _)| probs)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: momentum buffer for SGD, first and second moments for AdamW.
struct OptimizerState {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: i32,
}

impl OptimizerState {
    fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().into_iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    /// One update. Decoupled decay: `θ ← θ − lr·(step + wd·θ)`.
    fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, config: &TrainConfig) {
        self.steps += 1;
        let lr = config.learning_rate as f32;
        let decay = (config.learning_rate * config.weight_decay) as f32;
        let grads = grads.tensors();
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let c1 = 1.0 - ADAM_BETA1.powi(self.steps) as f32;
        let c2 = 1.0 - ADAM_BETA2.powi(self.steps) as f32;
        let momentum = config.momentum as f32;
        let mut i = 0;
        params.visit_mut(&mut |_, _, data| {
            let (m, v, g) = (&mut self.first[i], &mut self.second[i], &grads[i].data);
            for k in 0..data.len() {
                let step = match config.optimizer {
                    Optimizer::Sgd => {
                        m[k] = momentum * m[k] + g[k];
                        m[k]
                    }
                    Optimizer::AdamW => {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS as f32)
                    }
                };
                data[k] = data[k] - lr * step - decay * data[k];
            }
            i += 1;
        });
    }
}

/// Full-batch optimisation over the training split.
///
/// Per-sample forward/backward passes run in parallel; their gradients are
/// summed in scene order, so the result does not depend on the thread count
/// under deterministic reduction.
pub fn train(config: &TrainConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("dataset", "no scenes to train on"));
    }
    let start = Instant::now();
    let (train_scenes, eval_scenes) = config.split(scenes);
    let train_samples = prepare_all(config, train_scenes)?;
    let eval_samples = if std::ptr::eq(train_scenes, eval_scenes) {
        None
    } else {
        Some(prepare_all(config, eval_scenes)?)
    };
    let eval_set = eval_samples.as_deref().unwrap_or(&train_samples);
    let setup = config.setup();

    let mut params = ModelParams::<f32>::init(&config.model_dims(), config.seed);
    let mut optimizer = OptimizerState::new(&params);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut diverged = None;
    let inv_n = 1.0 / train_samples.len() as f32;

    for epoch in 0..config.epochs {
        let results: Vec<(LossParts, ModelParams<f32>)> = train_samples
            .par_iter()
            .map(|s| {
                let history = history_feature(&params, s, &setup)?;
                loss_and_grad(&params, s, &setup, &history)
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let parts: Vec<LossParts> = results.iter().map(|r| r.0).collect();
        let train_loss = parts.iter().map(|p| p.total).sum::<f64>() / n;
        let train_bev_loss = parts.iter().map(|p| p.bev).sum::<f64>() / n;
        if !train_loss.is_finite() {
            diverged = Some(Divergence {
                epoch,
                loss: train_loss,
            });
            break;
        }
        let mut grads = params.zeros_like();
        for (_, g) in &results {
            grads.add_assign(g);
        }
        grads.scale(inv_n);
        optimizer.step(&mut params, &grads, config);

        let last = epoch + 1 == config.epochs;
        let scheduled = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        let eval = if last || scheduled {
            Some(evaluate_prepared(&params, eval_set, &setup)?)
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_bev_loss,
            train_depth_loss: mean_depth(&parts),
            eval,
        });
    }

    let final_eval = if diverged.is_none() {
        epochs.last().and_then(|e| e.eval)
    } else {
        None
    };
    let report = TrainReport {
        version: crate::VERSION.to_owned(),
        config: config.clone(),
        train_scenes: train_scenes.len(),
        eval_scenes: eval_set.len(),
        num_parameters: params.num_parameters(),
        epochs,
        final_eval,
        diverged,
        wall_clock_seconds: config.record_timing.then(|| start.elapsed().as_secs_f64()),
    };
    Ok(TrainOutcome {
        report,
        checkpoint: Checkpoint {
            config: config.clone(),
            params,
        },
    })
}

#[cfg(test)]
mod tests;
