//! Ground-truth construction: per-frame phase labels, boundary-offset
//! regression targets, and fixed-length windowing of videos.
//!
//! Each instance `(t_s, t_e)` marks `g^C = 1` on `[t_s, t_e]`. Its boundaries
//! are widened to regions `[t_s - d, t_s + d]` and `[t_e - d, t_e + d]` with
//! `d = 0.1 * (t_e - t_s)`, rounded half-up to whole frames, clipped to the
//! window, closed at both ends.

use crate::data::{AnnotationSet, FeatureSequence, Instance};

/// Binary starting/continuing/ending labels for `T` frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseLabels {
    pub continuing: Vec<bool>,
    pub starting: Vec<bool>,
    pub ending: Vec<bool>,
}

/// Boundary offsets in frames, valid only where the mask is set.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetTargets {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub start_mask: Vec<bool>,
    pub end_mask: Vec<bool>,
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Closed frame range of the region around `boundary`, clipped to `0..len`.
fn boundary_region(boundary: usize, duration: usize, len: usize) -> Option<(usize, usize)> {
    let delta = duration as f64 / 10.0;
    let lo = round_half_up(boundary as f64 - delta).max(0);
    let hi = round_half_up(boundary as f64 + delta).min(len as i64 - 1);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

fn in_window(inst: &Instance, len: usize) -> bool {
    inst.start < len
}

fn sorted_instances(annotations: &AnnotationSet) -> Vec<Instance> {
    let mut v = annotations.instances.clone();
    v.sort_by_key(|i| (i.start, i.end, i.class_id));
    v
}

pub fn make_phase_labels(annotations: &AnnotationSet, len: usize) -> PhaseLabels {
    let mut labels = PhaseLabels {
        continuing: vec![false; len],
        starting: vec![false; len],
        ending: vec![false; len],
    };
    for inst in annotations.instances.iter().filter(|i| in_window(i, len)) {
        let end = inst.end.min(len - 1);
        labels.continuing[inst.start..=end].iter_mut().for_each(|g| *g = true);
        if let Some((lo, hi)) = boundary_region(inst.start, inst.duration(), len) {
            labels.starting[lo..=hi].iter_mut().for_each(|g| *g = true);
        }
        if let Some((lo, hi)) = boundary_region(inst.end, inst.duration(), len) {
            labels.ending[lo..=hi].iter_mut().for_each(|g| *g = true);
        }
    }
    labels
}

/// Offsets `boundary - t` over each boundary region. Where regions of two
/// instances overlap, the nearest boundary wins (earlier instance on ties).
pub fn make_offset_targets(annotations: &AnnotationSet, len: usize) -> OffsetTargets {
    let mut targets = OffsetTargets {
        start: vec![0.0; len],
        end: vec![0.0; len],
        start_mask: vec![false; len],
        end_mask: vec![false; len],
    };
    let instances = sorted_instances(annotations);
    let assign = |offsets: &mut [f64], mask: &mut [bool], boundary: usize, duration: usize| {
        let Some((lo, hi)) = boundary_region(boundary, duration, len) else { return };
        for t in lo..=hi {
            let offset = boundary as f64 - t as f64;
            if !mask[t] || offset.abs() < offsets[t].abs() {
                offsets[t] = offset;
            }
            mask[t] = true;
        }
    };
    for inst in instances.iter().filter(|i| in_window(i, len)) {
        assign(&mut targets.start, &mut targets.start_mask, inst.start, inst.duration());
        assign(&mut targets.end, &mut targets.end_mask, inst.end, inst.duration());
    }
    targets
}

/// A fixed-length slice of a video in window coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// First video frame covered by this window.
    pub offset: usize,
    /// Frames that carry real features; the rest are zero padding.
    pub valid_frames: usize,
    pub features: FeatureSequence,
    pub annotations: AnnotationSet,
}

/// Fraction of an instance's frames a window must contain to keep it.
pub const MIN_RETAINED_FRACTION: f64 = 0.5;

/// Cut a video into consecutive non-overlapping windows of `window_len`
/// frames, zero-padding the last one. Instances cut by a window edge are
/// kept (clipped) only if at least half of their frames fall inside.
pub fn window_video(features: &FeatureSequence, annotations: &AnnotationSet, window_len: usize) -> Vec<Window> {
    assert!(window_len >= 1, "window length must be positive");
    let total = features.frames();
    let count = total.div_ceil(window_len).max(1);
    let channels = features.channels();
    (0..count)
        .map(|w| {
            let offset = w * window_len;
            let valid = total.saturating_sub(offset).min(window_len);
            let mut feats = FeatureSequence::zeros(window_len, channels);
            for t in 0..valid {
                feats.frame_mut(t).copy_from_slice(features.frame(offset + t));
            }
            let last = offset + window_len - 1;
            let instances = annotations
                .instances
                .iter()
                .filter_map(|inst| {
                    if inst.end < offset || inst.start > last {
                        return None;
                    }
                    let start = inst.start.max(offset);
                    let end = inst.end.min(last);
                    let kept = (end - start + 1) as f64 / inst.frame_span() as f64;
                    (start < end && kept >= MIN_RETAINED_FRACTION)
                        .then(|| Instance::new(start - offset, end - offset, inst.class_id))
                })
                .collect();
            Window {
                offset,
                valid_frames: valid,
                features: feats,
                annotations: AnnotationSet {
                    instances,
                    video_length: window_len,
                },
            }
        })
        .collect()
}
