//! Training objectives built on the autodiff graph.
//!
//! * classification: balanced negative log-likelihood per phase,
//! * regression: SmoothL1 on boundary offsets inside boundary regions,
//! * intra-phase consistency: pairwise l1 distances pulled together inside
//!   the positive and negative sets of a phase, pushed apart across them,
//! * inter-phase consistency: rises of `p^C` should match `p^S` and drops
//!   should match `p^E`,
//! * the weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, KinkLog, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::labels::{OffsetTargets, PhaseLabels};
use crate::model::ModelOutput;

/// Lower/upper clamp of probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

fn mask_tensor(mask: &[bool]) -> Tensor {
    Tensor::vector(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

fn vector_len(g: &Graph, v: Var) -> Result<usize> {
    match g.value(v).shape() {
        Shape::Vector(n) => Ok(n),
        other => Err(Error::Shape(format!("expected a vector, got {other}"))),
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn add_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(zero(g));
    };
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

/// `sum(x * mask)` over a constant 0/1 mask.
fn masked_sum(g: &mut Graph, x: Var, mask: Tensor) -> Result<Var> {
    let m = g.constant(mask);
    let prod = g.mul(x, m)?;
    g.sum(prod)
}

/// Selection masks over the `T x T` pair matrix for a label vector.
///
/// `same_pos` and `same_neg` include the diagonal; `cross` holds ordered
/// positive-to-negative pairs once, so `N_U + N_V + 2 N_UV = T^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMasks {
    pub same_pos: Tensor,
    pub same_neg: Tensor,
    pub cross: Tensor,
    pub n_pos_pairs: usize,
    pub n_neg_pairs: usize,
    pub n_cross_pairs: usize,
}

impl PairMasks {
    pub fn new(labels: &[bool]) -> Self {
        let n = labels.len();
        let mut u = vec![0.0; n * n];
        let mut v = vec![0.0; n * n];
        let mut uv = vec![0.0; n * n];
        for (i, &gi) in labels.iter().enumerate() {
            for (j, &gj) in labels.iter().enumerate() {
                let k = i * n + j;
                match (gi, gj) {
                    (true, true) => u[k] = 1.0,
                    (false, false) => v[k] = 1.0,
                    (true, false) => uv[k] = 1.0,
                    (false, true) => {}
                }
            }
        }
        let pos = labels.iter().filter(|&&g| g).count();
        let neg = n - pos;
        PairMasks {
            same_pos: Tensor::matrix(n, n, u).expect("square"),
            same_neg: Tensor::matrix(n, n, v).expect("square"),
            cross: Tensor::matrix(n, n, uv).expect("square"),
            n_pos_pairs: pos * pos,
            n_neg_pairs: neg * neg,
            n_cross_pairs: pos * neg,
        }
    }
}

/// Intra-phase consistency evaluated over the explicit `T x T` distance
/// matrix. Terms whose mask is empty are dropped, the cross term's leading
/// `1` included.
pub fn intra_consistency(g: &mut Graph, p: Var, labels: &[bool]) -> Result<Var> {
    check_len("intra_consistency", vector_len(g, p)?, labels.len())?;
    let masks = PairMasks::new(labels);
    let diff = g.pairwise_diff(p)?;
    let dist = g.abs(diff)?;
    let mut terms = Vec::with_capacity(3);
    if masks.n_pos_pairs > 0 {
        let s = masked_sum(g, dist, masks.same_pos)?;
        terms.push(g.scale(s, 1.0 / masks.n_pos_pairs as f64));
    }
    if masks.n_neg_pairs > 0 {
        let s = masked_sum(g, dist, masks.same_neg)?;
        terms.push(g.scale(s, 1.0 / masks.n_neg_pairs as f64));
    }
    if masks.n_cross_pairs > 0 {
        let s = masked_sum(g, dist, masks.cross)?;
        terms.push(g.affine(s, -1.0 / masks.n_cross_pairs as f64, 1.0));
    }
    add_all(g, &terms)
}

/// Same value and gradient as [`intra_consistency`] in `O(T log T)`.
pub fn intra_consistency_fast(g: &mut Graph, p: Var, labels: &[bool]) -> Result<Var> {
    check_len("intra_consistency_fast", vector_len(g, p)?, labels.len())?;
    g.custom(
        Box::new(IntraConsistencyOp {
            labels: labels.to_vec(),
        }),
        &[p],
    )
}

#[derive(Debug)]
struct IntraConsistencyOp {
    labels: Vec<bool>,
}

/// Per-member statistics of one set of values: the sum of `|x_i - x_j|`
/// over ordered pairs, and for each member `#{x_j < x_i} - #{x_j > x_i}`.
struct PairStats {
    total: f64,
    rank_balance: Vec<f64>,
}

impl PairStats {
    fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut total = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            total += values[i] * (2.0 * rank as f64 - (n as f64 - 1.0));
        }
        let mut rank_balance = vec![0.0; n];
        let mut lo = 0;
        while lo < n {
            let mut hi = lo;
            while hi + 1 < n && values[order[hi + 1]] == values[order[lo]] {
                hi += 1;
            }
            let balance = lo as f64 - (n - 1 - hi) as f64;
            for &i in &order[lo..=hi] {
                rank_balance[i] = balance;
            }
            lo = hi + 1;
        }
        PairStats {
            total: 2.0 * total,
            rank_balance,
        }
    }
}

struct IntraParts {
    value: f64,
    n_pos: usize,
    n_neg: usize,
    pos_idx: Vec<usize>,
    neg_idx: Vec<usize>,
    pos: PairStats,
    neg: PairStats,
    all: PairStats,
}

impl IntraConsistencyOp {
    fn parts(&self, p: &[f64]) -> IntraParts {
        let pos_idx: Vec<usize> = (0..p.len()).filter(|&i| self.labels[i]).collect();
        let neg_idx: Vec<usize> = (0..p.len()).filter(|&i| !self.labels[i]).collect();
        let pick = |idx: &[usize]| idx.iter().map(|&i| p[i]).collect::<Vec<_>>();
        let pos = PairStats::new(&pick(&pos_idx));
        let neg = PairStats::new(&pick(&neg_idx));
        let all = PairStats::new(p);
        let (n_pos, n_neg) = (pos_idx.len(), neg_idx.len());
        let mut value = 0.0;
        if n_pos > 0 {
            value += pos.total / (n_pos * n_pos) as f64;
        }
        if n_neg > 0 {
            value += neg.total / (n_neg * n_neg) as f64;
        }
        if n_pos > 0 && n_neg > 0 {
            let cross = 0.5 * (all.total - pos.total - neg.total);
            value += 1.0 - cross / (n_pos * n_neg) as f64;
        }
        IntraParts {
            value,
            n_pos,
            n_neg,
            pos_idx,
            neg_idx,
            pos,
            neg,
            all,
        }
    }
}

impl CustomOp for IntraConsistencyOp {
    fn name(&self) -> &'static str {
        "intra_consistency_fast"
    }

    fn forward(&self, inputs: &[&Tensor], kinks: &mut KinkLog) -> Result<Tensor> {
        let p = inputs[0].data();
        if kinks.enabled() {
            for i in 0..p.len() {
                for j in i + 1..p.len() {
                    let d = p[i] - p[j];
                    kinks.record(d.partial_cmp(&0.0).map_or(0, |o| o as i8), d.abs());
                }
            }
        }
        Ok(Tensor::scalar(self.parts(p).value))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let p = inputs[0].data();
        let up = grad_output.data()[0];
        let parts = self.parts(p);
        let mut grad = vec![0.0; p.len()];
        // d/dp_k of the ordered-pair sum over a set is 2 * rank_balance(k).
        let (np, nn) = (parts.n_pos as f64, parts.n_neg as f64);
        for (local, &k) in parts.pos_idx.iter().enumerate() {
            let own = 2.0 * parts.pos.rank_balance[local];
            grad[k] += own / (np * np);
            if parts.n_neg > 0 {
                let cross = 0.5 * (2.0 * parts.all.rank_balance[k] - own);
                grad[k] -= cross / (np * nn);
            }
        }
        for (local, &k) in parts.neg_idx.iter().enumerate() {
            let own = 2.0 * parts.neg.rank_balance[local];
            grad[k] += own / (nn * nn);
            if parts.n_pos > 0 {
                let cross = 0.5 * (2.0 * parts.all.rank_balance[k] - own);
                grad[k] -= cross / (np * nn);
            }
        }
        grad.iter_mut().for_each(|v| *v *= up);
        vec![Tensor::vector(grad)]
    }
}

/// Inter-phase consistency. With `d_t = p^C_{t+1} - p^C_t` for the first
/// `T - 1` frames, compares `max(0, d_t)` with `p^S_t` and `-min(0, d_t)`
/// with `p^E_t` in l1, averaged over the `T - 1` differences.
pub fn inter_consistency(g: &mut Graph, p_c: Var, p_s: Var, p_e: Var) -> Result<Var> {
    let len = vector_len(g, p_c)?;
    check_len("inter_consistency p^S", vector_len(g, p_s)?, len)?;
    check_len("inter_consistency p^E", vector_len(g, p_e)?, len)?;
    if len < 2 {
        return Err(Error::DegenerateInput(format!(
            "inter_consistency needs at least 2 frames, got {len}"
        )));
    }
    let n = len - 1;
    let next = g.slice(p_c, 1, n)?;
    let prev = g.slice(p_c, 0, n)?;
    let delta = g.sub(next, prev)?;
    let rise = g.max_with_zero(delta)?;
    let drop = g.neg_min_with_zero(delta)?;
    let s = g.slice(p_s, 0, n)?;
    let e = g.slice(p_e, 0, n)?;
    let ds = g.sub(rise, s)?;
    let ds = g.abs(ds)?;
    let de = g.sub(drop, e)?;
    let de = g.abs(de)?;
    let a = g.sum(ds)?;
    let b = g.sum(de)?;
    let total = g.add(a, b)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Negative log-likelihood with the positive and negative frames averaged
/// separately and mixed 1:1. An empty side contributes nothing.
pub fn phase_cls_loss(g: &mut Graph, p: Var, labels: &[bool]) -> Result<Var> {
    check_len("phase_cls_loss", vector_len(g, p)?, labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let clamped = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let mut terms = Vec::with_capacity(2);
    if n_pos > 0 {
        let lp = g.ln(clamped)?;
        let s = masked_sum(g, lp, mask_tensor(labels))?;
        terms.push(g.scale(s, -1.0 / n_pos as f64));
    }
    if n_neg > 0 {
        let q = g.affine(clamped, -1.0, 1.0);
        let lq = g.ln(q)?;
        let neg: Vec<bool> = labels.iter().map(|l| !l).collect();
        let s = masked_sum(g, lq, mask_tensor(&neg))?;
        terms.push(g.scale(s, -1.0 / n_neg as f64));
    }
    add_all(g, &terms)
}

/// SmoothL1 between predicted and target offsets, averaged over each
/// boundary region separately; zero when both regions are empty.
pub fn regression_loss(g: &mut Graph, start_offset: Var, end_offset: Var, targets: &OffsetTargets) -> Result<Var> {
    let len = targets.start.len();
    check_len("regression_loss start", vector_len(g, start_offset)?, len)?;
    check_len("regression_loss end", vector_len(g, end_offset)?, len)?;
    let mut terms = Vec::with_capacity(2);
    for (pred, target, mask) in [
        (start_offset, &targets.start, &targets.start_mask),
        (end_offset, &targets.end, &targets.end_mask),
    ] {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            continue;
        }
        let t = g.constant(Tensor::vector(target.clone()));
        let diff = g.sub(pred, t)?;
        let sl1 = g.smooth_l1(diff)?;
        let s = masked_sum(g, sl1, mask_tensor(mask))?;
        terms.push(g.scale(s, 1.0 / count as f64));
    }
    add_all(g, &terms)
}

/// Multipliers of the four loss groups in the total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub intra: f64,
    pub inter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            reg: 1.0,
            intra: 1.0,
            inter: 1.0,
        }
    }
}

impl LossWeights {
    pub fn baseline() -> Self {
        LossWeights {
            intra: 0.0,
            inter: 0.0,
            ..Self::default()
        }
    }

    /// Parse `"cls,reg,intra,inter"`.
    pub fn parse(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::InvalidConfig(format!("loss weights {s:?}: {e}")))?;
        let [cls, reg, intra, inter] = vals[..] else {
            return Err(Error::InvalidConfig(format!("loss weights {s:?}: expected 4 values")));
        };
        let w = LossWeights { cls, reg, intra, inter };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.reg, self.intra, self.inter].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Every loss component of one evaluation. Components are unweighted;
/// `l_total` applies [`LossWeights`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_s: f64,
    pub l_e: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_intra_c: f64,
    pub l_intra_s: f64,
    pub l_intra_e: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn components(&self) -> [(&'static str, f64); 11] {
        [
            ("l_c", self.l_c),
            ("l_s", self.l_s),
            ("l_e", self.l_e),
            ("l_cls", self.l_cls),
            ("l_reg", self.l_reg),
            ("l_intra_c", self.l_intra_c),
            ("l_intra_s", self.l_intra_s),
            ("l_intra_e", self.l_intra_e),
            ("l_intra", self.l_intra),
            ("l_inter", self.l_inter),
            ("l_total", self.l_total),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.components().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    /// Elementwise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = LossReport::default();
        for r in reports {
            acc.l_c += r.l_c;
            acc.l_s += r.l_s;
            acc.l_e += r.l_e;
            acc.l_cls += r.l_cls;
            acc.l_reg += r.l_reg;
            acc.l_intra_c += r.l_intra_c;
            acc.l_intra_s += r.l_intra_s;
            acc.l_intra_e += r.l_intra_e;
            acc.l_intra += r.l_intra;
            acc.l_inter += r.l_inter;
            acc.l_total += r.l_total;
        }
        LossReport {
            l_c: acc.l_c / n,
            l_s: acc.l_s / n,
            l_e: acc.l_e / n,
            l_cls: acc.l_cls / n,
            l_reg: acc.l_reg / n,
            l_intra_c: acc.l_intra_c / n,
            l_intra_s: acc.l_intra_s / n,
            l_intra_e: acc.l_intra_e / n,
            l_intra: acc.l_intra / n,
            l_inter: acc.l_inter / n,
            l_total: acc.l_total / n,
        }
    }
}

/// The five network outputs as graph vectors of length `T`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub continuing: Var,
    pub starting: Var,
    pub ending: Var,
    pub start_offset: Var,
    pub end_offset: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraImpl {
    Naive,
    #[default]
    Fast,
}

/// Builds the weighted total. Groups with zero weight are evaluated on
/// detached copies of the outputs so they appear in the report without
/// contributing gradient.
pub fn total_loss(
    g: &mut Graph,
    heads: &HeadVars,
    labels: &PhaseLabels,
    targets: &OffsetTargets,
    weights: &LossWeights,
    intra_impl: IntraImpl,
) -> Result<(Var, LossReport)> {
    let detach = |g: &mut Graph, v: Var| {
        let t = g.value(v).clone();
        g.constant(t)
    };
    let pick = |g: &mut Graph, v: Var, w: f64| if w == 0.0 { detach(g, v) } else { v };

    let (pc, ps, pe) = (
        pick(g, heads.continuing, weights.cls),
        pick(g, heads.starting, weights.cls),
        pick(g, heads.ending, weights.cls),
    );
    let l_c = phase_cls_loss(g, pc, &labels.continuing)?;
    let l_s = phase_cls_loss(g, ps, &labels.starting)?;
    let l_e = phase_cls_loss(g, pe, &labels.ending)?;
    let l_cls = add_all(g, &[l_c, l_s, l_e])?;

    let (os, oe) = (
        pick(g, heads.start_offset, weights.reg),
        pick(g, heads.end_offset, weights.reg),
    );
    let l_reg = regression_loss(g, os, oe, targets)?;

    let intra = match intra_impl {
        IntraImpl::Naive => intra_consistency,
        IntraImpl::Fast => intra_consistency_fast,
    };
    let (pc, ps, pe) = (
        pick(g, heads.continuing, weights.intra),
        pick(g, heads.starting, weights.intra),
        pick(g, heads.ending, weights.intra),
    );
    let l_intra_c = intra(g, pc, &labels.continuing)?;
    let l_intra_s = intra(g, ps, &labels.starting)?;
    let l_intra_e = intra(g, pe, &labels.ending)?;
    let l_intra = add_all(g, &[l_intra_c, l_intra_s, l_intra_e])?;

    let (pc, ps, pe) = (
        pick(g, heads.continuing, weights.inter),
        pick(g, heads.starting, weights.inter),
        pick(g, heads.ending, weights.inter),
    );
    let l_inter = inter_consistency(g, pc, ps, pe)?;

    let mut weighted = Vec::with_capacity(4);
    for (term, w) in [
        (l_cls, weights.cls),
        (l_reg, weights.reg),
        (l_intra, weights.intra),
        (l_inter, weights.inter),
    ] {
        if w != 0.0 {
            weighted.push(if w == 1.0 { term } else { g.scale(term, w) });
        }
    }
    let total = add_all(g, &weighted)?;

    let v = |x: Var| g.value(x).item().expect("scalar loss");
    let report = LossReport {
        l_c: v(l_c),
        l_s: v(l_s),
        l_e: v(l_e),
        l_cls: v(l_cls),
        l_reg: v(l_reg),
        l_intra_c: v(l_intra_c),
        l_intra_s: v(l_intra_s),
        l_intra_e: v(l_intra_e),
        l_intra: v(l_intra),
        l_inter: v(l_inter),
        l_total: v(total),
    };
    Ok((total, report))
}

/// Loss report for already-computed outputs, without gradients.
pub fn evaluate_losses(
    output: &ModelOutput,
    labels: &PhaseLabels,
    targets: &OffsetTargets,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let heads = HeadVars {
        continuing: g.constant(Tensor::vector(output.continuing.clone())),
        starting: g.constant(Tensor::vector(output.starting.clone())),
        ending: g.constant(Tensor::vector(output.ending.clone())),
        start_offset: g.constant(Tensor::vector(output.start_offset.clone())),
        end_offset: g.constant(Tensor::vector(output.end_offset.clone())),
    };
    total_loss(&mut g, &heads, labels, targets, weights, IntraImpl::Fast).map(|(_, r)| r)
}

/// Scalar value of a single-vector loss builder, for quick evaluation.
pub fn eval_scalar<F>(p: &[f64], build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(p.to_vec()));
    let out = build(&mut g, v)?;
    Ok(g.value(out).item().expect("scalar"))
}
