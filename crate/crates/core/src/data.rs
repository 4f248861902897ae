//! Feature sequences and action annotations.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `T x C` per-frame features, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(frames: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * channels {
            return Err(Error::Shape(format!(
                "feature sequence {frames}x{channels} needs {} values, got {}",
                frames * channels,
                values.len()
            )));
        }
        Ok(FeatureSequence {
            frames,
            channels,
            values,
        })
    }

    pub fn zeros(frames: usize, channels: usize) -> Self {
        FeatureSequence {
            frames,
            channels,
            values: vec![0.0; frames * channels],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.channels..(t + 1) * self.channels]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.frames, self.channels, self.values.clone()).expect("consistent shape")
    }
}

/// One annotated action: inclusive frame indices `start..=end` and a class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub start: usize,
    pub end: usize,
    pub class_id: usize,
}

impl Instance {
    pub fn new(start: usize, end: usize, class_id: usize) -> Self {
        Instance { start, end, class_id }
    }

    /// `end - start`, the length used for boundary-region widths.
    pub fn duration(&self) -> usize {
        self.end - self.start
    }

    /// Number of frames covered, `end - start + 1`.
    pub fn frame_span(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Action instances of one video (or one window of it).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub instances: Vec<Instance>,
    pub video_length: usize,
}

impl AnnotationSet {
    pub fn new(instances: Vec<Instance>, video_length: usize) -> Result<Self> {
        let set = AnnotationSet {
            instances,
            video_length,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(video_length: usize) -> Self {
        AnnotationSet {
            instances: Vec::new(),
            video_length,
        }
    }

    /// Checks `start < end < video_length` for every instance.
    pub fn validate(&self) -> Result<()> {
        for inst in &self.instances {
            if inst.start >= inst.end || inst.end >= self.video_length {
                return Err(Error::Shape(format!(
                    "instance ({}, {}) invalid for video length {}",
                    inst.start, inst.end, self.video_length
                )));
            }
        }
        Ok(())
    }
}

/// A video: identifier, features and annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: FeatureSequence,
    pub annotations: AnnotationSet,
}
