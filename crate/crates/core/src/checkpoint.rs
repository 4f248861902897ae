//! Self-describing binary checkpoints.
//!
//! ```text
//! magic    b"TALCKPT\0"
//! version  u32 LE
//! hlen     u32 LE, then hlen bytes of JSON header
//! count    u32 LE, then `count` tensors:
//!            name_len u32, name (utf-8), ndims u32, dims u64 x ndims,
//!            values f64 LE, row-major
//! ```
//!
//! The header carries the network config, the epoch count and inference
//! metadata. Optimizer velocity, when present, is stored as extra tensors
//! named `velocity/<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelParams, NetworkConfig};

pub const MAGIC: &[u8; 8] = b"TALCKPT\0";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity/";

/// Dataset facts inference needs alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Longest training instance, in frames; caps proposal length.
    pub max_duration: usize,
    pub class_names: Vec<String>,
    /// Mean feature vector of each class over training instances.
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkConfig,
    epoch: usize,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Completed training epochs.
    pub epoch: usize,
    pub meta: CheckpointMeta,
    pub velocity: Option<Vec<Tensor>>,
}

impl Checkpoint {
    pub fn network(&self) -> &NetworkConfig {
        self.params.config()
    }

    /// Fails with a config mismatch unless the stored network equals `expected`.
    pub fn require_network(&self, expected: &NetworkConfig) -> Result<()> {
        if self.network() != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint network {:?} differs from configured {:?}",
                self.network(),
                expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            network: self.network().clone(),
            epoch: self.epoch,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut named: Vec<(String, &Tensor)> = self.params.named().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(vel) = &self.velocity {
            if vel.len() != self.params.tensors().len() {
                return Err(Error::Shape(format!(
                    "velocity has {} tensors, params {}",
                    vel.len(),
                    self.params.tensors().len()
                )));
            }
            for ((name, _), v) in self.params.named().zip(vel) {
                named.push((format!("{VELOCITY_PREFIX}{name}"), v));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {version}, expected {VERSION}"),
            ));
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(origin, format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format(origin, "tensor name is not utf-8"))?
                .to_string();
            let ndims = r.u32()? as usize;
            if ndims > 2 {
                return Err(Error::format(origin, format!("tensor {name} has {ndims} dims")));
            }
            let dims = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let shape = Shape::from_dims(&dims).expect("at most two dims");
            let bytes_needed = dims
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(origin, format!("tensor {name} too large")))?;
            let raw = r.take(bytes_needed)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(base) => velocity.push((base.to_string(), t)),
                None => params.push((name, t)),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after tensors"));
        }
        let params = ModelParams::from_named(&header.network, params)?;
        let velocity = if velocity.is_empty() {
            None
        } else {
            if velocity.len() != params.tensors().len()
                || velocity.iter().zip(params.named()).any(|((vn, vt), (pn, pt))| vn != pn || vt.shape() != pt.shape())
            {
                return Err(Error::format(origin, "velocity tensors do not match parameters"));
            }
            Some(velocity.into_iter().map(|(_, t)| t).collect())
        };
        Ok(Checkpoint {
            params,
            epoch: header.epoch,
            meta: header.meta,
            velocity,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.origin, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_velocity: bool) -> Checkpoint {
        let cfg = NetworkConfig {
            input_channels: 2,
            base_channels: 4,
            head_channels: 3,
            base_kernel: 3,
            head_kernel: 3,
            base_layers: 1,
            window_length: 8,
        };
        let params = ModelParams::init(&cfg, 9).unwrap();
        let velocity = with_velocity.then(|| {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::new(t.shape(), t.data().iter().map(|v| v * -0.5 + 1e-300).collect()).unwrap())
                .collect()
        });
        Checkpoint {
            params,
            epoch: 3,
            meta: CheckpointMeta {
                max_duration: 17,
                class_names: vec!["a".into(), "b".into()],
                centroids: vec![vec![0.1, -0.2], vec![1.0 / 3.0, 7.0]],
            },
            velocity,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        for v in [false, true] {
            let ck = sample(v);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample(true);
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_magic_and_version() {
        let mut bytes = sample(false).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, "mem"), Err(Error::Format { .. })));
        let mut bytes = sample(false).to_bytes().unwrap();
        bytes[8] = 99;
        let err = Checkpoint::from_bytes(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample(true).to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            assert!(Checkpoint::from_bytes(&bytes[..cut], "mem").is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, "mem").is_err());
    }

    #[test]
    fn network_mismatch_detected() {
        let ck = sample(false);
        let mut other = ck.network().clone();
        other.base_channels = 5;
        assert!(matches!(ck.require_network(&other), Err(Error::ConfigMismatch(_))));
        assert!(ck.require_network(&ck.network().clone()).is_ok());
    }
}
