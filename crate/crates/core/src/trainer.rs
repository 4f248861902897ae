//! Mini-batch SGD with momentum over fixed-length windows.
//!
//! Per step: the gradient of every window in the batch is computed
//! independently (in parallel), summed in window order and divided by the
//! batch size; then `v <- momentum * v - lr * grad`, `param <- param + v`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::Video;
use crate::error::{Error, Result};
use crate::labels::{make_offset_targets, make_phase_labels, window_video, OffsetTargets, PhaseLabels};
use crate::losses::{total_loss, IntraImpl, LossReport, LossWeights};
use crate::model::{build_network, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_early: f64,
    pub lr_late: f64,
    /// First epoch (0-based) trained with `lr_late`.
    pub switch_epoch: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub intra_impl: IntraImpl,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr_early: 1e-3,
            lr_late: 1e-4,
            switch_epoch: 10,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            intra_impl: IntraImpl::Fast,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train: {m}")));
        if !(self.lr_early >= 0.0 && self.lr_late >= 0.0 && self.lr_early.is_finite() && self.lr_late.is_finite()) {
            return bad("learning rates must be finite and >= 0");
        }
        if self.switch_epoch > self.epochs {
            return bad("switch_epoch must not exceed epochs");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be > 0");
        }
        self.weights.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.lr_early
        } else {
            self.lr_late
        }
    }
}

/// One training window with its targets.
#[derive(Clone, Debug)]
pub struct TrainWindow {
    pub features: Tensor,
    pub labels: PhaseLabels,
    pub targets: OffsetTargets,
}

pub fn prepare_windows<'a>(videos: impl IntoIterator<Item = &'a Video>, window_length: usize) -> Vec<TrainWindow> {
    videos
        .into_iter()
        .flat_map(|v| window_video(&v.features, &v.annotations, window_length))
        .map(|w| TrainWindow {
            features: w.features.to_tensor(),
            labels: make_phase_labels(&w.annotations, window_length),
            targets: make_offset_targets(&w.annotations, window_length),
        })
        .collect()
}

/// Loss report and parameter gradients of one window.
pub fn window_gradient(
    params: &ModelParams,
    window: &TrainWindow,
    weights: &LossWeights,
    intra_impl: IntraImpl,
) -> Result<(Vec<Tensor>, LossReport)> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, true);
    let x = g.constant(window.features.clone());
    let heads = build_network(&mut g, params.config(), &vars, x)?;
    let (loss, report) = total_loss(&mut g, &heads, &window.labels, &window.targets, weights, intra_impl)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((grads, report))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Parameters, momentum buffers and completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState {
            params,
            velocity,
            epoch: 0,
        }
    }

    /// Apply one momentum step with a precomputed gradient.
    pub fn apply(&mut self, grads: &[Tensor], lr: f64, momentum: f64) {
        for ((p, v), g) in self.params.tensors_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = momentum * *vi - lr * gi;
                *pi += *vi;
            }
        }
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Train one epoch; returns the mean loss report over its windows.
pub fn train_epoch(
    state: &mut TrainState,
    windows: &[TrainWindow],
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<LossReport> {
    if windows.is_empty() {
        return Err(Error::DegenerateInput("training set has no windows".into()));
    }
    let epoch = state.epoch;
    let lr = config.lr_at(epoch);
    let order = epoch_order(config.seed, epoch, windows.len());
    let mut reports = Vec::with_capacity(windows.len());
    for (step, batch) in order.chunks(config.batch_size).enumerate() {
        let results: Vec<Result<(Vec<Tensor>, LossReport)>> = batch
            .par_iter()
            .map(|&i| window_gradient(&state.params, &windows[i], &config.weights, config.intra_impl))
            .collect();
        let mut sum: Option<Vec<Tensor>> = None;
        let mut batch_reports = Vec::with_capacity(batch.len());
        for r in results {
            let (grads, report) = r?;
            if let Some(component) = report.first_non_finite() {
                return Err(Error::NonFinite { component, epoch, step });
            }
            batch_reports.push(report);
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = sum.expect("non-empty batch");
        let scale = 1.0 / batch.len() as f64;
        let mut norm_sq = 0.0;
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= scale;
                norm_sq += *x * *x;
            }
        }
        if !norm_sq.is_finite() {
            return Err(Error::NonFinite {
                component: "gradient",
                epoch,
                step,
            });
        }
        if let Some(clip) = config.grad_clip {
            let norm = norm_sq.sqrt();
            if norm > clip {
                let f = clip / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= f));
            }
        }
        state.apply(&grads, lr, config.momentum);
        let mean = LossReport::mean(&batch_reports);
        on_step(&StepRecord {
            epoch,
            step,
            lr,
            losses: mean,
        });
        reports.extend(batch_reports);
    }
    state.epoch += 1;
    Ok(LossReport::mean(&reports))
}

/// Train from `state.epoch` up to `config.epochs`; returns one report per
/// epoch trained.
pub fn train(
    state: &mut TrainState,
    windows: &[TrainWindow],
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<LossReport>> {
    config.validate()?;
    let mut history = Vec::new();
    while state.epoch < config.epochs {
        history.push(train_epoch(state, windows, config, on_step)?);
    }
    Ok(history)
}
