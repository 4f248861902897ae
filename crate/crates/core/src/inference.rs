//! Bottom-up proposal generation: candidate boundaries from the starting and
//! ending probabilities, start-end pairing under a duration cap, product
//! scoring, optional offset refinement, Soft-NMS.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, Instance};
use crate::error::{Error, Result};
use crate::evaluation::tiou;
use crate::labels::{make_offset_targets, make_phase_labels, window_video};
use crate::data::AnnotationSet;
use crate::model::{ModelOutput, ModelParams};

/// A candidate segment in frame coordinates, `0 <= t_s < t_e <= T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub t_s: f64,
    pub t_e: f64,
    pub score: f64,
    pub class_id: Option<usize>,
}

impl Proposal {
    pub fn new(t_s: f64, t_e: f64, score: f64) -> Self {
        Proposal {
            t_s,
            t_e,
            score,
            class_id: None,
        }
    }

    pub fn length(&self) -> f64 {
        self.t_e - self.t_s
    }

    pub fn segment(&self) -> (f64, f64) {
        (self.t_s, self.t_e)
    }
}

/// Second selection rule for candidate boundaries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakRule {
    /// Strict local maximum, `p[t-1] < p[t] > p[t+1]`.
    #[default]
    Peak,
    /// Monotone rise, `p[t-1] < p[t] < p[t+1]`.
    Rise,
}

/// Frames above the mid-range threshold, unioned with frames picked by
/// `rule`. Sorted, no duplicates.
pub fn select_candidates(p: &[f64], rule: PeakRule) -> Vec<usize> {
    if p.is_empty() {
        return Vec::new();
    }
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = 0.5 * (max + min);
    (0..p.len())
        .filter(|&t| {
            if p[t] > threshold {
                return true;
            }
            if t == 0 || t + 1 >= p.len() {
                return false;
            }
            match rule {
                PeakRule::Peak => p[t - 1] < p[t] && p[t] > p[t + 1],
                PeakRule::Rise => p[t - 1] < p[t] && p[t] < p[t + 1],
            }
        })
        .collect()
}

/// Every pair with `s < e` and `e - s <= max_duration`, scores zero.
pub fn generate_proposals(starts: &[usize], ends: &[usize], max_duration: usize) -> Vec<Proposal> {
    let mut out = Vec::new();
    for &s in starts {
        for &e in ends {
            if s < e && e - s <= max_duration {
                out.push(Proposal::new(s as f64, e as f64, 0.0));
            }
        }
    }
    out
}

fn frame_index(t: f64, len: usize) -> usize {
    (t.round().max(0.0) as usize).min(len - 1)
}

/// `score = p_s[t_s] * p_e[t_e]`, reading fractional positions at the
/// nearest frame.
pub fn score_proposals(proposals: &mut [Proposal], p_s: &[f64], p_e: &[f64]) {
    for p in proposals {
        p.score = p_s[frame_index(p.t_s, p_s.len())] * p_e[frame_index(p.t_e, p_e.len())];
    }
}

/// Shift boundaries by the predicted offsets at their frames, clipped to
/// `[0, len]`; a proposal whose shifted boundaries would invert keeps its
/// original ones.
pub fn refine_boundaries(proposals: &mut [Proposal], o_s: &[f64], o_e: &[f64], len: usize) {
    let upper = len as f64;
    for p in proposals {
        let s = (p.t_s + o_s[frame_index(p.t_s, o_s.len())]).clamp(0.0, upper);
        let e = (p.t_e + o_e[frame_index(p.t_e, o_e.len())]).clamp(0.0, upper);
        if s < e {
            p.t_s = s;
            p.t_e = e;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// `score * exp(-iou^2 / sigma)`
    #[default]
    Gaussian,
    /// `score * (1 - iou)` for `iou > sigma`
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftNmsConfig {
    pub sigma: f64,
    pub score_floor: f64,
    pub top_k: usize,
    pub decay: Decay,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        SoftNmsConfig {
            sigma: 0.5,
            score_floor: 1e-3,
            top_k: 200,
            decay: Decay::Gaussian,
        }
    }
}

impl SoftNmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("soft-nms sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.score_floor >= 0.0) {
            return Err(Error::InvalidConfig("soft-nms score floor must be >= 0".into()));
        }
        Ok(())
    }

    fn decay_factor(&self, iou: f64) -> f64 {
        match self.decay {
            Decay::Gaussian => (-iou * iou / self.sigma).exp(),
            Decay::Linear if iou > self.sigma => 1.0 - iou,
            Decay::Linear => 1.0,
        }
    }
}

/// Selection order among remaining proposals: higher score, then shorter,
/// then earlier start.
fn ranks_before(a: &Proposal, b: &Proposal) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.length() != b.length() {
        return a.length() < b.length();
    }
    a.t_s < b.t_s
}

/// Soft-NMS. Returns the selected proposals, best first.
pub fn soft_nms(proposals: &[Proposal], config: &SoftNmsConfig) -> Vec<Proposal> {
    let mut remaining: Vec<Proposal> = proposals.iter().copied().filter(|p| p.score >= config.score_floor).collect();
    let mut out = Vec::with_capacity(config.top_k.min(remaining.len()));
    while out.len() < config.top_k && !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if ranks_before(&remaining[i], &remaining[best]) {
                best = i;
            }
        }
        let picked = remaining.swap_remove(best);
        out.push(picked);
        for p in remaining.iter_mut() {
            p.score *= config.decay_factor(tiou(picked.segment(), p.segment()));
        }
        remaining.retain(|p| p.score >= config.score_floor);
    }
    out
}

/// Where boundary refinement happens relative to scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Off,
    /// Score at the candidate frames, then move the boundaries.
    #[default]
    ScoreThenRefine,
    /// Move the boundaries, then score at the moved positions.
    RefineThenScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub peak_rule: PeakRule,
    pub refine: RefineMode,
    pub soft_nms: SoftNmsConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            peak_rule: PeakRule::Peak,
            refine: RefineMode::ScoreThenRefine,
            soft_nms: SoftNmsConfig::default(),
        }
    }
}

/// Proposals of one window before suppression, in window coordinates.
/// Candidates are restricted to the first `valid` frames.
pub fn window_proposals(
    out: &ModelOutput,
    valid: usize,
    max_duration: usize,
    config: &InferenceConfig,
) -> Vec<Proposal> {
    let valid = valid.min(out.len());
    if valid == 0 {
        return Vec::new();
    }
    let starts = select_candidates(&out.starting[..valid], config.peak_rule);
    let ends = select_candidates(&out.ending[..valid], config.peak_rule);
    let mut props = generate_proposals(&starts, &ends, max_duration);
    let (ps, pe) = (&out.starting[..valid], &out.ending[..valid]);
    let (os, oe) = (&out.start_offset[..valid], &out.end_offset[..valid]);
    match config.refine {
        RefineMode::Off => score_proposals(&mut props, ps, pe),
        RefineMode::ScoreThenRefine => {
            score_proposals(&mut props, ps, pe);
            refine_boundaries(&mut props, os, oe, valid);
        }
        RefineMode::RefineThenScore => {
            refine_boundaries(&mut props, os, oe, valid);
            score_proposals(&mut props, ps, pe);
        }
    }
    props
}

/// Phase "predictions" built from ground truth: binary labels as
/// probabilities and the offset targets as offsets.
pub fn outputs_from_labels(annotations: &AnnotationSet, len: usize) -> ModelOutput {
    let labels = make_phase_labels(annotations, len);
    let targets = make_offset_targets(annotations, len);
    let f = |v: &[bool]| v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    ModelOutput {
        continuing: f(&labels.continuing),
        starting: f(&labels.starting),
        ending: f(&labels.ending),
        start_offset: targets.start,
        end_offset: targets.end,
    }
}

/// Source of per-window phase outputs for [`infer_video`].
pub enum PhaseSource<'a> {
    Model(&'a ModelParams),
    Labels(&'a AnnotationSet),
}

/// Full video pipeline: window, predict, propose, shift to video
/// coordinates, suppress across the whole video.
pub fn infer_video(
    source: &PhaseSource<'_>,
    features: &FeatureSequence,
    window_length: usize,
    max_duration: usize,
    config: &InferenceConfig,
) -> Result<Vec<Proposal>> {
    let empty = AnnotationSet::empty(features.frames());
    let annotations = match source {
        PhaseSource::Labels(a) => a,
        PhaseSource::Model(_) => &empty,
    };
    let mut all = Vec::new();
    for window in window_video(features, annotations, window_length) {
        let out = match source {
            PhaseSource::Model(params) => params.forward(&window.features)?,
            PhaseSource::Labels(_) => outputs_from_labels(&window.annotations, window_length),
        };
        let shift = window.offset as f64;
        all.extend(
            window_proposals(&out, window.valid_frames, max_duration, config)
                .into_iter()
                .map(|p| Proposal {
                    t_s: p.t_s + shift,
                    t_e: p.t_e + shift,
                    ..p
                }),
        );
    }
    Ok(soft_nms(&all, &config.soft_nms))
}

/// Per-class mean feature vectors over the frames of training instances.
/// Classes without instances get an empty centroid and are never assigned.
pub fn class_centroids<'a>(
    videos: impl IntoIterator<Item = (&'a FeatureSequence, &'a [Instance])>,
    num_classes: usize,
    channels: usize,
) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; channels]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (features, instances) in videos {
        for inst in instances {
            for t in inst.start..=inst.end.min(features.frames().saturating_sub(1)) {
                for (s, v) in sums[inst.class_id].iter_mut().zip(features.frame(t)) {
                    *s += v;
                }
                counts[inst.class_id] += 1;
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| if n == 0 { Vec::new() } else { s.into_iter().map(|v| v / n as f64).collect() })
        .collect()
}

/// Label each proposal with the class whose centroid is nearest to the
/// mean feature over the proposal's frames.
pub fn classify_proposals(proposals: &mut [Proposal], features: &FeatureSequence, centroids: &[Vec<f64>]) {
    if features.frames() == 0 {
        return;
    }
    let channels = features.channels();
    for p in proposals {
        let lo = frame_index(p.t_s, features.frames());
        let hi = frame_index(p.t_e, features.frames()).max(lo);
        let mut mean = vec![0.0; channels];
        for t in lo..=hi {
            for (m, v) in mean.iter_mut().zip(features.frame(t)) {
                *m += v;
            }
        }
        let n = (hi - lo + 1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        p.class_id = centroids
            .iter()
            .enumerate()
            .filter(|(_, c)| c.len() == channels)
            .map(|(k, c)| (k, c.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .fold(None, |best: Option<(usize, f64)>, (k, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((k, d)),
            })
            .map(|(k, _)| k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_examples() {
        assert_eq!(select_candidates(&[0.1, 0.9, 0.2, 0.6, 0.3], PeakRule::Peak), vec![1, 3]);
        assert!(select_candidates(&[0.4; 6], PeakRule::Peak).is_empty());
        assert_eq!(select_candidates(&[0.0, 1.0, 0.0], PeakRule::Peak), vec![1]);
        assert!(select_candidates(&[], PeakRule::Peak).is_empty());
        // Endpoints only through the threshold.
        assert_eq!(select_candidates(&[0.5, 0.1, 0.2, 0.1, 0.45], PeakRule::Peak), vec![0, 2, 4]);
    }

    #[test]
    fn rise_rule_picks_monotone_rise() {
        let p = [0.0, 0.1, 0.2, 0.3, 1.0, 0.0];
        assert_eq!(select_candidates(&p, PeakRule::Rise), vec![1, 2, 3, 4]);
        assert_eq!(select_candidates(&p, PeakRule::Peak), vec![4]);
    }

    #[test]
    fn pairing_examples() {
        let p = generate_proposals(&[2], &[10, 200], 50);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].t_s, p[0].t_e), (2.0, 10.0));
        assert_eq!(generate_proposals(&[1, 5], &[10, 20], 100).len(), 4);
        assert!(generate_proposals(&[10], &[5], 100).is_empty());
        assert!(generate_proposals(&[], &[5], 100).is_empty());
    }

    #[test]
    fn scoring_examples() {
        let mut p = vec![Proposal::new(1.0, 3.0, 0.0), Proposal::new(0.0, 3.0, 0.0)];
        score_proposals(&mut p, &[0.0, 0.8, 0.1, 0.1], &[0.3, 0.3, 0.3, 0.5]);
        assert!((p[0].score - 0.4).abs() < 1e-15);
        assert_eq!(p[1].score, 0.0);
    }

    #[test]
    fn refinement_examples() {
        let base = vec![Proposal::new(2.0, 6.0, 0.5)];
        let mut p = base.clone();
        refine_boundaries(&mut p, &[0.0; 10], &[0.0; 10], 10);
        assert_eq!(p, base);
        let mut os = vec![0.0; 10];
        os[2] = 1.5;
        let mut p = base.clone();
        refine_boundaries(&mut p, &os, &[0.0; 10], 10);
        assert_eq!(p[0].t_s, 3.5);
        let mut oe = vec![0.0; 10];
        oe[6] = -5.0;
        let mut p = base.clone();
        refine_boundaries(&mut p, &os, &oe, 10);
        assert_eq!(p, base);
        let mut oe = vec![0.0; 10];
        oe[6] = 9.0;
        let mut p = base.clone();
        refine_boundaries(&mut p, &[0.0; 10], &oe, 10);
        assert_eq!(p[0].t_e, 10.0);
    }

    #[test]
    fn soft_nms_examples() {
        let cfg = SoftNmsConfig::default();
        let out = soft_nms(&[Proposal::new(0.0, 5.0, 0.4), Proposal::new(10.0, 20.0, 0.9)], &cfg);
        assert_eq!(out.iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.9, 0.4]);

        // tIoU of (0,10) and (1,10) on the continuous line is 9/10.
        let out = soft_nms(&[Proposal::new(0.0, 10.0, 0.9), Proposal::new(1.0, 10.0, 0.8)], &cfg);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-0.81f64 / 0.5).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.158_32).abs() < 1e-5);
    }

    #[test]
    fn soft_nms_floor_and_top_k() {
        let p: Vec<Proposal> = (0..10).map(|i| Proposal::new(i as f64 * 10.0, i as f64 * 10.0 + 5.0, 0.5)).collect();
        let cfg = SoftNmsConfig {
            top_k: 3,
            ..SoftNmsConfig::default()
        };
        assert_eq!(soft_nms(&p, &cfg).len(), 3);
        let dup = vec![Proposal::new(0.0, 5.0, 0.9); 3];
        let cfg = SoftNmsConfig {
            score_floor: 0.2,
            ..SoftNmsConfig::default()
        };
        // Identical copies decay by exp(-2) each time.
        let out = soft_nms(&dup, &cfg);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn linear_decay() {
        let cfg = SoftNmsConfig {
            decay: Decay::Linear,
            sigma: 0.3,
            ..SoftNmsConfig::default()
        };
        let out = soft_nms(&[Proposal::new(0.0, 10.0, 0.9), Proposal::new(1.0, 10.0, 0.8)], &cfg);
        assert!((out[1].score - 0.8 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn label_phases_recover_ground_truth() {
        let a = AnnotationSet::new(vec![Instance::new(10, 30, 0), Instance::new(50, 60, 1)], 100).unwrap();
        let out = outputs_from_labels(&a, 100);
        let props = window_proposals(&out, 100, 40, &InferenceConfig::default());
        let top = soft_nms(&props, &SoftNmsConfig::default());
        assert_eq!((top[0].t_s, top[0].t_e), (50.0, 60.0));
        assert_eq!((top[1].t_s, top[1].t_e), (10.0, 30.0));
    }

    #[test]
    fn nearest_centroid_classification() {
        let f = FeatureSequence::new(6, 2, vec![0., 0., 1., 1., 1., 1., 0., 0., -1., 3., -1., 3.]).unwrap();
        let c = class_centroids([(&f, &[Instance::new(1, 2, 0), Instance::new(4, 5, 1)][..])], 3, 2);
        assert_eq!(c[0], vec![1.0, 1.0]);
        assert_eq!(c[1], vec![-1.0, 3.0]);
        assert!(c[2].is_empty());
        let mut p = vec![Proposal::new(1.0, 2.0, 1.0), Proposal::new(4.0, 5.0, 1.0)];
        classify_proposals(&mut p, &f, &c);
        assert_eq!(p[0].class_id, Some(0));
        assert_eq!(p[1].class_id, Some(1));
    }
}
