//! The finite-difference suite behind `tal gradcheck`: every primitive op,
//! every loss term and the total loss through the network, each at a number
//! of random points away from kinks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Tensor, UnaryOp, Var};
use crate::data::{AnnotationSet, Instance};
use crate::error::{Error, Result};
use crate::gradcheck::{analytic_gradients, check_gradients, FdOutcome, FdSettings};
use crate::labels::{make_offset_targets, make_phase_labels, OffsetTargets, PhaseLabels};
use crate::losses::{
    inter_consistency, intra_consistency, intra_consistency_fast, phase_cls_loss, regression_loss, total_loss,
    IntraImpl, LossWeights,
};
use crate::model::{build_network, ModelParams, NetworkConfig};

/// Every op the suite knows, in run order.
pub const OPS: &[&str] = &[
    "conv1d",
    "relu",
    "sigmoid",
    "abs",
    "max_with_zero",
    "neg_min_with_zero",
    "ln",
    "smooth_l1",
    "add",
    "sub",
    "mul",
    "mean",
    "pairwise_diff",
    "intra_consistency",
    "intra_consistency_fast",
    "inter_consistency",
    "phase_cls_loss",
    "regression_loss",
    "total_loss",
];

/// Deliberate gradient corruption for negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the gradient leaving both IntraC implementations.
    IntraSignFlip,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Random base points per op.
    pub points: usize,
    pub settings: FdSettings,
    /// Network checked by `total_loss`.
    pub network: NetworkConfig,
    /// Sequence length fed to the network.
    pub network_len: usize,
    /// Fraction of network parameters probed per point.
    pub param_fraction: f64,
    pub fault: Option<Fault>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            points: 50,
            settings: FdSettings::default(),
            network: NetworkConfig::default(),
            network_len: 32,
            param_fraction: 0.01,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub points: usize,
    /// Base points discarded for lying within the kink margin.
    pub rejected_points: usize,
    pub checked: usize,
    pub skipped_at_kink: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

const MAX_REJECTIONS: usize = 1000;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize) -> (PhaseLabels, OffsetTargets) {
    let n = rng.random_range(1..=3);
    let instances = (0..n)
        .map(|_| {
            let s = rng.random_range(0..len - 2);
            let e = rng.random_range(s + 1..len);
            Instance::new(s, e, 0)
        })
        .collect();
    let a = AnnotationSet::new(instances, len).expect("valid instances");
    (make_phase_labels(&a, len), make_offset_targets(&a, len))
}

/// Weighted sum `sum(x * r)` with a fixed random `r`, turning any tensor
/// output into a scalar with a non-degenerate gradient.
fn project(g: &mut Graph, x: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let y = g.mul(x, r)?;
    g.sum(y)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Inputs, optional coordinate subset and loss builder of one random point.
struct Point {
    inputs: Vec<Tensor>,
    coords: Option<Vec<(usize, usize)>>,
    build: Build,
}

fn unary_point(rng: &mut ChaCha8Rng, op: UnaryOp) -> Point {
    let n = 12;
    let (lo, hi) = if op == UnaryOp::Ln { (0.1, 2.0) } else { (-2.0, 2.0) };
    let x = Tensor::vector(uniform(rng, n, lo, hi));
    let r = Tensor::vector(uniform(rng, n, -1.0, 1.0));
    Point {
        inputs: vec![x],
        coords: None,
        build: Box::new(move |g, v| {
            let y = g.unary(op, v[0])?;
            project(g, y, &r)
        }),
    }
}

fn make_point(op: &str, rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<Point> {
    let flip = cfg.fault == Some(Fault::IntraSignFlip);
    let point = match op {
        "conv1d" => {
            let (t, ci, co, k) = (10, 3, 4, 5);
            let x = Tensor::matrix(t, ci, uniform(rng, t * ci, -2.0, 2.0))?;
            let w = Tensor::matrix(k * ci, co, uniform(rng, k * ci * co, -2.0, 2.0))?;
            let b = Tensor::vector(uniform(rng, co, -2.0, 2.0));
            let r = Tensor::matrix(t, co, uniform(rng, t * co, -1.0, 1.0))?;
            Point {
                inputs: vec![x, w, b],
                coords: None,
                build: Box::new(move |g, v| {
                    let y = g.conv1d(v[0], v[1], v[2], k)?;
                    project(g, y, &r)
                }),
            }
        }
        "relu" => unary_point(rng, UnaryOp::Relu),
        "sigmoid" => unary_point(rng, UnaryOp::Sigmoid),
        "abs" => unary_point(rng, UnaryOp::Abs),
        "max_with_zero" => unary_point(rng, UnaryOp::MaxWithZero),
        "neg_min_with_zero" => unary_point(rng, UnaryOp::NegMinWithZero),
        "ln" => unary_point(rng, UnaryOp::Ln),
        "smooth_l1" => {
            let mut p = unary_point(rng, UnaryOp::SmoothL1);
            p.inputs[0].data_mut().iter_mut().for_each(|x| *x *= 1.5);
            p
        }
        "add" | "sub" | "mul" => {
            let n = 12;
            let a = Tensor::vector(uniform(rng, n, -2.0, 2.0));
            let b = Tensor::vector(uniform(rng, n, -2.0, 2.0));
            let s = Tensor::scalar(rng.random_range(-2.0..2.0));
            let r = Tensor::vector(uniform(rng, n, -1.0, 1.0));
            let op = op.to_string();
            Point {
                inputs: vec![a, b, s],
                coords: None,
                build: Box::new(move |g, v| {
                    let f = |g: &mut Graph, x: Var, y: Var| match op.as_str() {
                        "add" => g.add(x, y),
                        "sub" => g.sub(x, y),
                        _ => g.mul(x, y),
                    };
                    let y = f(g, v[0], v[1])?;
                    // Scalar broadcast on either side.
                    let y = f(g, y, v[2])?;
                    let y = f(g, v[2], y)?;
                    project(g, y, &r)
                }),
            }
        }
        "mean" => {
            let x = Tensor::matrix(3, 4, uniform(rng, 12, -2.0, 2.0))?;
            let r = Tensor::matrix(3, 4, uniform(rng, 12, -1.0, 1.0))?;
            Point {
                inputs: vec![x],
                coords: None,
                build: Box::new(move |g, v| {
                    let rc = g.constant(r.clone());
                    let y = g.mul(v[0], rc)?;
                    let m = g.mean(y)?;
                    g.mul(m, m)
                }),
            }
        }
        "pairwise_diff" => {
            let n = 8;
            let x = Tensor::vector(uniform(rng, n, -2.0, 2.0));
            let r = Tensor::matrix(n, n, uniform(rng, n * n, -1.0, 1.0))?;
            Point {
                inputs: vec![x],
                coords: None,
                build: Box::new(move |g, v| {
                    let y = g.pairwise_diff(v[0])?;
                    project(g, y, &r)
                }),
            }
        }
        "intra_consistency" | "intra_consistency_fast" => {
            let n = rng.random_range(4..=24);
            let p = Tensor::vector(uniform(rng, n, 0.0, 1.0));
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let fast = op == "intra_consistency_fast";
            Point {
                inputs: vec![p],
                coords: None,
                build: Box::new(move |g, v| {
                    let out = if fast {
                        intra_consistency_fast(g, v[0], &labels)?
                    } else {
                        intra_consistency(g, v[0], &labels)?
                    };
                    if flip {
                        g.scale_grad_at(out, -1.0);
                    }
                    Ok(out)
                }),
            }
        }
        "inter_consistency" => {
            let n = rng.random_range(3..=24);
            Point {
                inputs: (0..3).map(|_| Tensor::vector(uniform(rng, n, 0.0, 1.0))).collect(),
                coords: None,
                build: Box::new(|g, v| inter_consistency(g, v[0], v[1], v[2])),
            }
        }
        "phase_cls_loss" => {
            let n = rng.random_range(2..=24);
            let p = Tensor::vector(uniform(rng, n, 0.01, 0.99));
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            Point {
                inputs: vec![p],
                coords: None,
                build: Box::new(move |g, v| phase_cls_loss(g, v[0], &labels)),
            }
        }
        "regression_loss" => {
            let n = 24;
            let (_, targets) = random_labels(rng, n);
            Point {
                inputs: vec![
                    Tensor::vector(uniform(rng, n, -3.0, 3.0)),
                    Tensor::vector(uniform(rng, n, -3.0, 3.0)),
                ],
                coords: None,
                build: Box::new(move |g, v| regression_loss(g, v[0], v[1], &targets)),
            }
        }
        "total_loss" => {
            let net = cfg.network.clone();
            let len = cfg.network_len;
            let params = ModelParams::init(&net, rng.random())?;
            let x = Tensor::matrix(len, net.input_channels, uniform(rng, len * net.input_channels, -2.0, 2.0))?;
            let (labels, targets) = random_labels(rng, len);
            let inputs: Vec<Tensor> = params.tensors().to_vec();
            // Zero biases would park whole feature maps on ReLU kinks only
            // for degenerate inputs; random features keep them clear.
            let total: usize = inputs.iter().map(Tensor::numel).sum();
            let want = ((total as f64 * cfg.param_fraction).ceil() as usize).clamp(1, total);
            let flat: Vec<(usize, usize)> = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            let mut coords: Vec<(usize, usize)> = sample(rng, total, want).into_iter().map(|k| flat[k]).collect();
            coords.sort_unstable();
            Point {
                inputs,
                coords: Some(coords),
                build: Box::new(move |g, v| {
                    let xv = g.constant(x.clone());
                    let heads = build_network(g, &net, v, xv)?;
                    let (loss, _) = total_loss(g, &heads, &labels, &targets, &LossWeights::default(), IntraImpl::Fast)?;
                    Ok(loss)
                }),
            }
        }
        other => return Err(Error::InvalidConfig(format!("unknown gradcheck op {other:?}"))),
    };
    Ok(point)
}

/// Check one op at `cfg.points` base points.
pub fn check_op(op: &str, cfg: &SuiteConfig) -> Result<OpReport> {
    let index = OPS.iter().position(|o| *o == op).ok_or_else(|| {
        Error::InvalidConfig(format!("unknown gradcheck op {op:?}; known: {}", OPS.join(", ")))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut total = FdOutcome {
        kink_margin: f64::INFINITY,
        ..FdOutcome::default()
    };
    let mut rejected = 0;
    let mut done = 0;
    while done < cfg.points {
        let point = make_point(op, &mut rng, cfg)?;
        let (_, _, margin) = analytic_gradients(&point.inputs, &point.build)?;
        if margin < cfg.settings.min_kink_margin {
            rejected += 1;
            if rejected > MAX_REJECTIONS {
                return Err(Error::DegenerateInput(format!("{op}: no base point clear of kinks")));
            }
            continue;
        }
        let outcome = check_gradients(&point.inputs, &cfg.settings, point.coords.as_deref(), &point.build)?;
        total.merge(&outcome);
        done += 1;
    }
    Ok(OpReport {
        op: op.to_string(),
        points: done,
        rejected_points: rejected,
        checked: total.checked,
        skipped_at_kink: total.skipped_at_kink,
        max_rel_error: total.max_rel_error,
        passed: total.checked > 0 && total.passed(&cfg.settings),
    })
}

pub fn run_suite(ops: &[&str], cfg: &SuiteConfig) -> Result<Vec<OpReport>> {
    ops.iter().map(|op| check_op(op, cfg)).collect()
}
