//! Deterministic synthetic corpus: Gaussian background frames with action
//! instances drawn around per-class mean vectors.
//!
//! Every video uses its own ChaCha8 stream (the corpus seed, stream = video
//! index), so videos can be generated in any order or in parallel with the
//! same result. Class means come from a reserved stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, FeatureSequence, Instance, Video};
use crate::error::{Error, Result};

const CLASS_MEAN_STREAM: u64 = u64::MAX;
const MAX_PACKING_ATTEMPTS: usize = 1000;

/// Ramp weights of the first (and, reversed, last) frames of an instance.
pub const RAMP: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_videos: usize,
    /// The last `num_test` videos form the test split.
    pub num_test: usize,
    pub frames: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Inclusive range of instances per video.
    pub instances_per_video: (usize, usize),
    /// Inclusive range of instance durations `end - start`, in frames.
    pub duration: (usize, usize),
    pub noise_sigma: f64,
    pub class_sep: f64,
    /// Minimum number of background frames between two instances. The
    /// default keeps the start and end label regions of neighbours (half
    /// width up to a tenth of the longest duration) from colliding.
    pub min_gap: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            num_videos: 250,
            num_test: 50,
            frames: 128,
            channels: 8,
            num_classes: 5,
            instances_per_video: (1, 4),
            duration: (8, 40),
            noise_sigma: 0.5,
            class_sep: 2.0,
            min_gap: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Test,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("synthetic: {m}")));
        if self.frames == 0 || self.channels == 0 || self.num_classes == 0 {
            return bad("frames, channels and num_classes must be >= 1".into());
        }
        if self.num_test > self.num_videos {
            return bad(format!("num_test {} exceeds num_videos {}", self.num_test, self.num_videos));
        }
        let (lo, hi) = self.instances_per_video;
        let (dlo, dhi) = self.duration;
        if lo > hi || dlo > dhi || dlo == 0 {
            return bad("ranges must satisfy min <= max and durations >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite() && self.class_sep.is_finite()) {
            return bad("noise_sigma must be >= 0 and class_sep finite".into());
        }
        Ok(())
    }

    pub fn subset(&self, index: usize) -> Subset {
        if index + self.num_test >= self.num_videos {
            Subset::Test
        } else {
            Subset::Train
        }
    }

    pub fn video_id(index: usize) -> String {
        format!("video_{index:04}")
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class_{c}")).collect()
    }

    /// Frames needed by `n` instances of the given durations plus gaps.
    fn footprint(&self, durations: &[usize]) -> usize {
        durations.iter().map(|d| d + 1).sum::<usize>() + durations.len().saturating_sub(1) * self.min_gap
    }

    /// Class means: random directions scaled to norm `class_sep`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(CLASS_MEAN_STREAM);
        (0..self.num_classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..self.channels).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break v.into_iter().map(|x| x * self.class_sep / norm).collect();
                }
            })
            .collect()
    }

    fn instances(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Instance>> {
        let (lo, hi) = self.instances_per_video;
        let n = rng.random_range(lo..=hi);
        if n == 0 {
            return Ok(Vec::new());
        }
        let (dlo, dhi) = self.duration;
        for _ in 0..MAX_PACKING_ATTEMPTS {
            let durations: Vec<usize> = (0..n).map(|_| rng.random_range(dlo..=dhi)).collect();
            let used = self.footprint(&durations);
            if used > self.frames {
                continue;
            }
            // Spread the slack over the n + 1 gaps.
            let slack = self.frames - used;
            let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
            cuts.sort_unstable();
            let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.num_classes)).collect();
            let mut out = Vec::with_capacity(n);
            let mut cursor = 0;
            let mut prev_cut = 0;
            for (i, (&d, &c)) in durations.iter().zip(&classes).enumerate() {
                cursor += cuts[i] - prev_cut;
                prev_cut = cuts[i];
                out.push(Instance::new(cursor, cursor + d, c));
                cursor += d + 1 + self.min_gap;
            }
            return Ok(out);
        }
        Err(Error::Generation(format!(
            "could not pack {n} instances of {dlo}..={dhi} frames into {} frames",
            self.frames
        )))
    }

    pub fn generate_video(&self, index: usize, means: &[Vec<f64>]) -> Result<Video> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let instances = self.instances(&mut rng)?;
        let mut values = Vec::with_capacity(self.frames * self.channels);
        for _ in 0..self.frames * self.channels {
            let z: f64 = rng.sample(StandardNormal);
            values.push(self.noise_sigma * z);
        }
        let mut features = FeatureSequence::new(self.frames, self.channels, values)?;
        for inst in &instances {
            let span = inst.frame_span();
            for (k, t) in (inst.start..=inst.end).enumerate() {
                let w = ramp_weight(k, span);
                for (x, m) in features.frame_mut(t).iter_mut().zip(&means[inst.class_id]) {
                    *x += w * m;
                }
            }
        }
        let values = features.values().iter().map(|&v| v as f32 as f64).collect();
        Ok(Video {
            id: Self::video_id(index),
            features: FeatureSequence::new(self.frames, self.channels, values)?,
            annotations: AnnotationSet::new(instances, self.frames)?,
        })
    }

    /// The whole corpus, in index order.
    pub fn generate(&self) -> Result<Vec<Video>> {
        self.validate()?;
        let min_needed = self.footprint(&vec![self.duration.0; self.instances_per_video.0]);
        if min_needed > self.frames {
            return Err(Error::Generation(format!(
                "{} instances of at least {} frames cannot fit in {} frames",
                self.instances_per_video.0, self.duration.0, self.frames
            )));
        }
        let means = self.class_means();
        (0..self.num_videos)
            .into_par_iter()
            .map(|i| self.generate_video(i, &means))
            .collect()
    }
}

/// Weight of the class mean at position `k` of an instance spanning `span`
/// frames: linear ramps over the first and last two frames, 1 inside.
pub fn ramp_weight(k: usize, span: usize) -> f64 {
    let from_edge = k.min(span - 1 - k);
    RAMP.get(from_edge).copied().unwrap_or(1.0)
}
