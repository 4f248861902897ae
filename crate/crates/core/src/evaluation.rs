//! Proposal and detection metrics: temporal IoU, AR@AN, the AR-AN AUC,
//! all-points interpolated AP / mAP, and the ground-truth oracles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::inference::Proposal;

/// Intersection over union of two segments on the real line. A zero-length
/// segment overlaps only an identical one.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn gt_segment(inst: &Instance) -> (f64, f64) {
    (inst.start as f64, inst.end as f64)
}

/// Per-video proposals, best first.
pub type ProposalMap = BTreeMap<String, Vec<Proposal>>;
/// Per-video ground truth.
pub type GroundTruth = BTreeMap<String, Vec<Instance>>;

fn total_gt(gt: &GroundTruth) -> usize {
    gt.values().map(Vec::len).sum()
}

/// `0.5, 0.55, ..., hi` built from integer hundredths.
pub fn iou_grid(lo_pct: u32, hi_pct: u32, step_pct: u32) -> Vec<f64> {
    (lo_pct..=hi_pct).step_by(step_pct as usize).map(|k| k as f64 / 100.0).collect()
}

/// For every video, the best tIoU each GT instance reaches among the
/// top-`an` proposals.
fn best_overlaps(proposals: &ProposalMap, gt: &GroundTruth, an: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(total_gt(gt));
    for (video, instances) in gt {
        let props = proposals.get(video).map(|v| &v[..v.len().min(an)]).unwrap_or(&[]);
        for inst in instances {
            let seg = gt_segment(inst);
            out.push(props.iter().map(|p| tiou(p.segment(), seg)).fold(0.0, f64::max));
        }
    }
    out
}

/// AR@AN: mean over `grid` of the corpus recall, each video truncated to
/// its top-`an` proposals.
pub fn average_recall(proposals: &ProposalMap, gt: &GroundTruth, an: usize, grid: &[f64]) -> Result<f64> {
    let n = total_gt(gt);
    if n == 0 {
        return Err(Error::UndefinedMetric("average recall with no ground-truth instances".into()));
    }
    if grid.is_empty() {
        return Err(Error::UndefinedMetric("average recall over an empty IoU grid".into()));
    }
    let best = best_overlaps(proposals, gt, an);
    let recall_sum: f64 = grid
        .iter()
        .map(|&thr| best.iter().filter(|&&b| b >= thr).count() as f64 / n as f64)
        .sum();
    Ok(recall_sum / grid.len() as f64)
}

/// Trapezoidal area under `(an, ar)` points, divided by the AN span.
pub fn curve_auc(curve: &[(usize, f64)]) -> Result<f64> {
    let (Some(first), Some(last)) = (curve.first(), curve.last()) else {
        return Err(Error::UndefinedMetric("AUC of an empty curve".into()));
    };
    if curve.len() == 1 {
        return Ok(first.1);
    }
    let span = (last.0 - first.0) as f64;
    let area: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * 0.5 * (w[0].1 + w[1].1))
        .sum();
    Ok(area / span)
}

/// AR at every AN in `an_range`.
pub fn ar_curve(proposals: &ProposalMap, gt: &GroundTruth, an_range: &[usize], grid: &[f64]) -> Result<Vec<(usize, f64)>> {
    an_range
        .iter()
        .map(|&an| average_recall(proposals, gt, an, grid).map(|ar| (an, ar)))
        .collect()
}

pub fn ar_an_auc(proposals: &ProposalMap, gt: &GroundTruth, an_range: &[usize], grid: &[f64]) -> Result<f64> {
    if an_range.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("AN range must be strictly increasing".into()));
    }
    curve_auc(&ar_curve(proposals, gt, an_range, grid)?)
}

/// All-points interpolated AP from a ranked hit list: precision at each
/// rank replaced by its running maximum from the tail, summed over recall
/// steps.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    hits.iter()
        .zip(&precision)
        .filter(|(&h, _)| h)
        .map(|(_, &p)| p)
        .sum::<f64>()
        / num_gt as f64
}

/// AP of one class. Detections of that class are ranked by score (stable,
/// so ties keep map order) and greedily matched to the unmatched GT of the
/// same video with the highest tIoU at or above `threshold`.
pub fn class_average_precision(proposals: &ProposalMap, gt: &GroundTruth, class: usize, threshold: f64) -> f64 {
    let mut dets: Vec<(&str, &Proposal)> = proposals
        .iter()
        .flat_map(|(v, ps)| ps.iter().filter(|p| p.class_id == Some(class)).map(move |p| (v.as_str(), p)))
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: BTreeMap<&str, Vec<bool>> = gt.iter().map(|(v, g)| (v.as_str(), vec![false; g.len()])).collect();
    let num_gt = gt.values().flatten().filter(|i| i.class_id == class).count();
    let hits: Vec<bool> = dets
        .iter()
        .map(|(video, det)| {
            let (Some(instances), Some(used)) = (gt.get(*video), matched.get_mut(video)) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, inst) in instances.iter().enumerate() {
                if inst.class_id != class || used[j] {
                    continue;
                }
                let o = tiou(det.segment(), gt_segment(inst));
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    interpolated_ap(&hits, num_gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub threshold: f64,
    /// AP of every class present in the ground truth.
    pub per_class: BTreeMap<usize, f64>,
    pub map: f64,
}

pub fn mean_average_precision(proposals: &ProposalMap, gt: &GroundTruth, threshold: f64) -> Result<MapResult> {
    let classes: std::collections::BTreeSet<usize> = gt.values().flatten().map(|i| i.class_id).collect();
    if classes.is_empty() {
        return Err(Error::UndefinedMetric("mAP with no ground-truth instances".into()));
    }
    let per_class: BTreeMap<usize, f64> = classes
        .iter()
        .map(|&c| (c, class_average_precision(proposals, gt, c, threshold)))
        .collect();
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapResult {
        threshold,
        per_class,
        map,
    })
}

fn best_gt(p: &Proposal, instances: &[Instance]) -> Option<(usize, f64)> {
    // Earliest-starting instance wins ties.
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by_key(|&j| (instances[j].start, instances[j].end));
    let mut best: Option<(usize, f64)> = None;
    for j in order {
        let o = tiou(p.segment(), gt_segment(&instances[j]));
        if best.is_none_or(|(_, b)| o > b) {
            best = Some((j, o));
        }
    }
    best
}

/// Replace each score by the proposal's best tIoU with the video's GT.
pub fn oracle_rank(proposals: &ProposalMap, gt: &GroundTruth) -> ProposalMap {
    proposals
        .iter()
        .map(|(v, ps)| {
            let instances = gt.get(v).map(Vec::as_slice).unwrap_or(&[]);
            let rescored = ps
                .iter()
                .map(|p| Proposal {
                    score: best_gt(p, instances).map_or(0.0, |(_, o)| o),
                    ..*p
                })
                .collect();
            (v.clone(), rescored)
        })
        .collect()
}

/// Give each proposal the class of its best-overlapping GT instance; no
/// overlap leaves it unlabeled.
pub fn oracle_cls(proposals: &ProposalMap, gt: &GroundTruth) -> ProposalMap {
    proposals
        .iter()
        .map(|(v, ps)| {
            let instances = gt.get(v).map(Vec::as_slice).unwrap_or(&[]);
            let labeled = ps
                .iter()
                .map(|p| Proposal {
                    class_id: best_gt(p, instances).filter(|(_, o)| *o > 0.0).map(|(j, _)| instances[j].class_id),
                    ..*p
                })
                .collect();
            (v.clone(), labeled)
        })
        .collect()
}

/// Stable re-sort of every video's proposals by descending score.
pub fn sort_by_score(proposals: &mut ProposalMap) {
    for ps in proposals.values_mut() {
        ps.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU thresholds averaged by AR@AN.
    pub iou_grid_proposals: Vec<f64>,
    /// IoU thresholds averaged into the average mAP.
    pub iou_grid_map: Vec<f64>,
    pub an_values: Vec<usize>,
    /// Thresholds at which mAP is reported individually.
    pub map_points: Vec<f64>,
    /// The AUC integrates AR over `1..=auc_max_an`.
    pub auc_max_an: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_grid_proposals: iou_grid(50, 100, 5),
            iou_grid_map: iou_grid(50, 95, 5),
            an_values: vec![10, 50, 100, 200],
            map_points: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            auc_max_an: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, grid) in [
            ("iou_grid_proposals", &self.iou_grid_proposals),
            ("iou_grid_map", &self.iou_grid_map),
            ("map_points", &self.map_points),
        ] {
            if grid.is_empty()
                || grid.iter().any(|&t| !(t > 0.0 && t <= 1.0))
                || grid.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::InvalidConfig(format!(
                    "eval.{name} must be non-empty, strictly increasing, within (0, 1]"
                )));
            }
        }
        if self.an_values.is_empty() || self.an_values[0] == 0 || self.an_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("eval.an_values must be positive and strictly increasing".into()));
        }
        if self.auc_max_an < 2 {
            return Err(Error::InvalidConfig("eval.auc_max_an must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArPoint {
    pub an: usize,
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub iou: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ar_an: Vec<ArPoint>,
    pub auc: f64,
    pub map: Vec<MapPoint>,
    /// Mean of mAP over the mAP IoU grid.
    pub average_map: f64,
    /// Per-class AP at each reported threshold.
    pub per_class_ap: Vec<MapResult>,
    /// The full AR curve over `1..=auc_max_an`.
    #[serde(skip)]
    pub curve: Vec<(usize, f64)>,
}

pub fn evaluate(proposals: &ProposalMap, gt: &GroundTruth, config: &EvalConfig) -> Result<Metrics> {
    config.validate()?;
    let dense: Vec<usize> = (1..=config.auc_max_an).collect();
    let curve = ar_curve(proposals, gt, &dense, &config.iou_grid_proposals)?;
    let auc = curve_auc(&curve)?;
    let ar_an = config
        .an_values
        .iter()
        .map(|&an| average_recall(proposals, gt, an, &config.iou_grid_proposals).map(|ar| ArPoint { an, ar }))
        .collect::<Result<Vec<_>>>()?;
    let per_class_ap = config
        .map_points
        .iter()
        .map(|&t| mean_average_precision(proposals, gt, t))
        .collect::<Result<Vec<_>>>()?;
    let map = per_class_ap.iter().map(|r| MapPoint { iou: r.threshold, map: r.map }).collect();
    let grid_maps = config
        .iou_grid_map
        .iter()
        .map(|&t| mean_average_precision(proposals, gt, t).map(|r| r.map))
        .collect::<Result<Vec<_>>>()?;
    let average_map = grid_maps.iter().sum::<f64>() / grid_maps.len() as f64;
    Ok(Metrics {
        ar_an,
        auc,
        map,
        average_map,
        per_class_ap,
        curve,
    })
}
