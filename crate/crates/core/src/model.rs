//! The fully convolutional network: a shared BaseNet followed by three
//! probability heads (continuing, starting, ending) and two offset heads.
//!
//! | block          | layers | kernel        | channels                   | activation       |
//! |----------------|--------|---------------|----------------------------|------------------|
//! | BaseNet        | `base_layers` | `base_kernel` | `base_channels`     | ReLU             |
//! | ProbNet (x3)   | 2      | `head_kernel` | `head_channels`, 1         | ReLU, sigmoid    |
//! | RegrNet (x2)   | 2      | `head_kernel` | `head_channels`, 1         | ReLU, identity   |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::losses::HeadVars;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub head_channels: usize,
    pub base_kernel: usize,
    pub head_kernel: usize,
    pub base_layers: usize,
    pub window_length: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 8,
            base_channels: 32,
            head_channels: 16,
            base_kernel: 9,
            head_kernel: 5,
            base_layers: 2,
            window_length: 128,
        }
    }
}

impl NetworkConfig {
    /// Full-size widths (512 / 256 channels, 750-frame windows).
    pub fn full_scale(input_channels: usize) -> Self {
        NetworkConfig {
            input_channels,
            base_channels: 512,
            head_channels: 256,
            window_length: 750,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_channels", self.input_channels),
            ("base_channels", self.base_channels),
            ("head_channels", self.head_channels),
            ("base_layers", self.base_layers),
            ("window_length", self.window_length),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("network.{name} must be >= 1")));
            }
        }
        for (name, k) in [("base_kernel", self.base_kernel), ("head_kernel", self.head_kernel)] {
            if k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("network.{name} must be odd, got {k}")));
            }
        }
        Ok(())
    }

    /// Conv layers in parameter order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::with_capacity(self.base_layers + 2 * HEADS.len());
        for i in 0..self.base_layers {
            layers.push(LayerSpec {
                name: format!("base.{i}"),
                kernel: self.base_kernel,
                c_in: if i == 0 { self.input_channels } else { self.base_channels },
                c_out: self.base_channels,
            });
        }
        for head in HEADS {
            layers.push(LayerSpec {
                name: format!("{head}.0"),
                kernel: self.head_kernel,
                c_in: self.base_channels,
                c_out: self.head_channels,
            });
            layers.push(LayerSpec {
                name: format!("{head}.1"),
                kernel: self.head_kernel,
                c_in: self.head_channels,
                c_out: 1,
            });
        }
        layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::parameter_count).sum()
    }
}

/// Head names, in output order.
pub const HEADS: [&str; 5] = ["prob_c", "prob_s", "prob_e", "regr_s", "regr_e"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Shape {
        Shape::Matrix(self.kernel * self.c_in, self.c_out)
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel * self.c_in * self.c_out + self.c_out
    }
}

/// Named weights and biases, two tensors per conv layer in
/// [`NetworkConfig::layers`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: NetworkConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Per-frame network outputs for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub continuing: Vec<f64>,
    pub starting: Vec<f64>,
    pub ending: Vec<f64>,
    pub start_offset: Vec<f64>,
    pub end_offset: Vec<f64>,
}

impl ModelOutput {
    pub fn len(&self) -> usize {
        self.continuing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.continuing.is_empty()
    }
}

impl ModelParams {
    /// Glorot-uniform weights, `U(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`,
    /// `fan = kernel * channels`; zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for layer in config.layers() {
            let fan_in = (layer.kernel * layer.c_in) as f64;
            let fan_out = (layer.kernel * layer.c_out) as f64;
            let s = (6.0 / (fan_in + fan_out)).sqrt();
            let shape = layer.weight_shape();
            let w = (0..shape.numel()).map(|_| rng.random_range(-s..s)).collect();
            names.push(format!("{}.weight", layer.name));
            tensors.push(Tensor::new(shape, w)?);
            names.push(format!("{}.bias", layer.name));
            tensors.push(Tensor::zeros(Shape::Vector(layer.c_out)));
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Assemble from named tensors, checking names and shapes against `config`.
    pub fn from_named(config: &NetworkConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_layout(config);
        if named.len() != expected.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (want_name, want_shape)) in named.iter().zip(&expected) {
            if name != want_name || t.shape() != *want_shape {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {name} {} does not match expected {want_name} {want_shape}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::ConfigMismatch(format!("tensor {name} has non-finite values")));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    fn expected_layout(config: &NetworkConfig) -> Vec<(String, Shape)> {
        config
            .layers()
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.weight_shape()),
                    (format!("{}.bias", l.name), Shape::Vector(l.c_out)),
                ]
            })
            .collect()
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every tensor as a leaf of `g`.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    pub fn forward(&self, features: &FeatureSequence) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let x = g.constant(features.to_tensor());
        let heads = build_network(&mut g, &self.config, &vars, x)?;
        let read = |v: Var| g.value(v).data().to_vec();
        Ok(ModelOutput {
            continuing: read(heads.continuing),
            starting: read(heads.starting),
            ending: read(heads.ending),
            start_offset: read(heads.start_offset),
            end_offset: read(heads.end_offset),
        })
    }
}

/// Record the network on `g`. `params` are the leaves from
/// [`ModelParams::register`] (or any vars with the same shapes); `x` is a
/// `T x input_channels` matrix.
pub fn build_network(g: &mut Graph, config: &NetworkConfig, params: &[Var], x: Var) -> Result<HeadVars> {
    match g.value(x).shape() {
        Shape::Matrix(_, c) if c == config.input_channels => {}
        other => {
            return Err(Error::Shape(format!(
                "features shape {other}, expected T x {} channels",
                config.input_channels
            )))
        }
    }
    let layers = config.layers();
    if params.len() != 2 * layers.len() {
        return Err(Error::Shape(format!(
            "expected {} parameter tensors, got {}",
            2 * layers.len(),
            params.len()
        )));
    }
    let conv = |g: &mut Graph, idx: usize, input: Var| -> Result<Var> {
        g.conv1d(input, params[2 * idx], params[2 * idx + 1], layers[idx].kernel)
    };

    let mut h = x;
    for i in 0..config.base_layers {
        let y = conv(g, i, h)?;
        h = g.relu(y)?;
    }
    let shared = h;
    let mut outs = [shared; 5];
    for (k, out) in outs.iter_mut().enumerate() {
        let first = config.base_layers + 2 * k;
        let hidden = conv(g, first, shared)?;
        let hidden = g.relu(hidden)?;
        let y = conv(g, first + 1, hidden)?;
        let y = g.flatten(y);
        *out = if k < 3 { g.sigmoid(y)? } else { y };
    }
    Ok(HeadVars {
        continuing: outs[0],
        starting: outs[1],
        ending: outs[2],
        start_offset: outs[3],
        end_offset: outs[4],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            input_channels: 3,
            base_channels: 8,
            head_channels: 4,
            base_kernel: 9,
            head_kernel: 5,
            base_layers: 2,
            window_length: 16,
        }
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // base: 9*3*8+8 = 224, 9*8*8+8 = 584
        // each head: 5*8*4+4 = 164, 5*4*1+1 = 21 -> 185, five heads = 925
        let expected = 224 + 584 + 5 * 185;
        assert_eq!(small().parameter_count(), expected);
        assert_eq!(ModelParams::init(&small(), 0).unwrap().parameter_count(), expected);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::init(&small(), 42).unwrap();
        let b = ModelParams::init(&small(), 42).unwrap();
        let c = ModelParams::init(&small(), 43).unwrap();
        let bits = |p: &ModelParams| {
            p.tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
        for (name, t) in a.named() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let params = ModelParams::init(&small(), 1).unwrap();
        let x = FeatureSequence::new(16, 3, (0..48).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let out = params.forward(&x).unwrap();
        for v in [&out.continuing, &out.starting, &out.ending, &out.start_offset, &out.end_offset] {
            assert_eq!(v.len(), 16);
        }
        for p in out.continuing.iter().chain(&out.starting).chain(&out.ending) {
            assert!(*p > 0.0 && *p < 1.0);
        }
    }

    #[test]
    fn zero_input_gives_half_probabilities() {
        let params = ModelParams::init(&small(), 5).unwrap();
        let out = params.forward(&FeatureSequence::zeros(16, 3)).unwrap();
        assert!(out.continuing.iter().chain(&out.starting).chain(&out.ending).all(|&p| p == 0.5));
        assert!(out.start_offset.iter().chain(&out.end_offset).all(|&o| o == 0.0));
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let params = ModelParams::init(&small(), 5).unwrap();
        assert!(matches!(params.forward(&FeatureSequence::zeros(16, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.base_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = small();
        c.head_channels = 0;
        assert!(ModelParams::init(&c, 0).is_err());
    }
}
