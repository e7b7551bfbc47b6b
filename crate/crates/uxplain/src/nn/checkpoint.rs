//! Binary checkpoint format and ensemble manifests.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "UXN1"
//! u32 layer_count
//! per layer:
//!   u8  kind tag
//!   u32 rank, then rank × u32 dims (weight shape; rank 0 when no weights)
//!   f32 parameters in declared order:
//!     dense (0):            weights row-major, bias
//!     conv2d (1):           weights, bias
//!     relu (2), flatten (3): none
//!     dropout (4):          p
//!     dropconnect_dense (5): weights, bias, p
//!     flipout_dense (6):    mean, log-sigma, bias, prior_mean, prior_sigma
//! ```
//!
//! Task head, input shape and seed are not part of the file; the caller
//! supplies them on load. Ensembles persist as one checkpoint per member
//! plus a plain-text manifest.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::nn::layer::Layer;
use crate::nn::network::{Head, Network};
use crate::rng::{fnv1a64, hex64};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UXN1";

const TAG_DENSE: u8 = 0;
const TAG_CONV2D: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_DROPOUT: u8 = 4;
const TAG_DROPCONNECT: u8 = 5;
const TAG_FLIPOUT: u8 = 6;

pub fn checkpoint_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        match layer {
            Layer::Dense { weight, bias } => {
                out.push(TAG_DENSE);
                push_dims(&mut out, weight.shape());
                push_f32s(&mut out, weight.data());
                push_f32s(&mut out, bias.data());
            }
            Layer::Conv2D { weight, bias } => {
                out.push(TAG_CONV2D);
                push_dims(&mut out, weight.shape());
                push_f32s(&mut out, weight.data());
                push_f32s(&mut out, bias.data());
            }
            Layer::ReLU => {
                out.push(TAG_RELU);
                push_dims(&mut out, &[]);
            }
            Layer::Flatten => {
                out.push(TAG_FLATTEN);
                push_dims(&mut out, &[]);
            }
            Layer::Dropout { p } => {
                out.push(TAG_DROPOUT);
                push_dims(&mut out, &[]);
                push_f32s(&mut out, &[*p]);
            }
            Layer::DropConnectDense { weight, bias, p } => {
                out.push(TAG_DROPCONNECT);
                push_dims(&mut out, weight.shape());
                push_f32s(&mut out, weight.data());
                push_f32s(&mut out, bias.data());
                push_f32s(&mut out, &[*p]);
            }
            Layer::FlipoutDense { mean, log_sigma, bias, prior_mean, prior_sigma } => {
                out.push(TAG_FLIPOUT);
                push_dims(&mut out, mean.shape());
                push_f32s(&mut out, mean.data());
                push_f32s(&mut out, log_sigma.data());
                push_f32s(&mut out, bias.data());
                push_f32s(&mut out, &[*prior_mean, *prior_sigma]);
            }
        }
    }
    out
}

pub fn network_from_bytes(bytes: &[u8], input_shape: Vec<usize>, head: Head) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let tag = r.u8()?;
        let dims = r.dims()?;
        let layer = match tag {
            TAG_DENSE => {
                let (out_dim, in_dim) = dense_dims(&dims, i)?;
                Layer::Dense {
                    weight: Tensor::new(vec![out_dim, in_dim], r.f32s(out_dim * in_dim)?)?,
                    bias: Tensor::new(vec![out_dim], r.f32s(out_dim)?)?,
                }
            }
            TAG_CONV2D => {
                if dims.len() != 4 {
                    return Err(Error::Checkpoint(format!(
                        "layer {i}: conv2d expects rank 4, got {}",
                        dims.len()
                    )));
                }
                let n: usize = dims.iter().product();
                Layer::Conv2D {
                    weight: Tensor::new(dims.clone(), r.f32s(n)?)?,
                    bias: Tensor::new(vec![dims[0]], r.f32s(dims[0])?)?,
                }
            }
            TAG_RELU => Layer::ReLU,
            TAG_FLATTEN => Layer::Flatten,
            TAG_DROPOUT => Layer::Dropout { p: r.f32s(1)?[0] },
            TAG_DROPCONNECT => {
                let (out_dim, in_dim) = dense_dims(&dims, i)?;
                Layer::DropConnectDense {
                    weight: Tensor::new(vec![out_dim, in_dim], r.f32s(out_dim * in_dim)?)?,
                    bias: Tensor::new(vec![out_dim], r.f32s(out_dim)?)?,
                    p: r.f32s(1)?[0],
                }
            }
            TAG_FLIPOUT => {
                let (out_dim, in_dim) = dense_dims(&dims, i)?;
                let mean = Tensor::new(vec![out_dim, in_dim], r.f32s(out_dim * in_dim)?)?;
                let log_sigma = Tensor::new(vec![out_dim, in_dim], r.f32s(out_dim * in_dim)?)?;
                let bias = Tensor::new(vec![out_dim], r.f32s(out_dim)?)?;
                let prior = r.f32s(2)?;
                Layer::FlipoutDense {
                    mean,
                    log_sigma,
                    bias,
                    prior_mean: prior[0],
                    prior_sigma: prior[1],
                }
            }
            other => {
                return Err(Error::Checkpoint(format!("layer {i}: unknown kind tag {other}")))
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after layer {count}",
            bytes.len() - r.pos
        )));
    }
    Network::from_layers(input_shape, layers, head)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(net))
}

pub fn load_checkpoint(path: &Path, input_shape: Vec<usize>, head: Head) -> Result<Network> {
    let bytes = std::fs::read(path)?;
    network_from_bytes(&bytes, input_shape, head)
}

/// Content fingerprint of a network's checkpoint serialization. Two networks
/// hash equal iff their persisted parameters are bit-identical.
pub fn checkpoint_hash(net: &Network) -> String {
    hex64(fnv1a64(&checkpoint_bytes(net)))
}

/// Persist ensemble members as `<prefix>_member_<k>.uxn` next to a manifest
/// listing each file plus the shared architecture hash.
pub fn save_ensemble(members: &[Network], dir: &Path, prefix: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("arch={}\n", members[0].architecture_hash()));
    for (k, net) in members.iter().enumerate() {
        let name = format!("{prefix}_member_{k}.uxn");
        save_checkpoint(net, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let manifest_path = dir.join(format!("{prefix}_ensemble.manifest"));
    atomic_write(&manifest_path, manifest.as_bytes())?;
    Ok(manifest_path)
}

pub fn load_ensemble(manifest_path: &Path, input_shape: Vec<usize>, head: Head) -> Result<Vec<Network>> {
    let text = std::fs::read_to_string(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    let arch_line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty ensemble manifest".into()))?;
    let Some(expected_arch) = arch_line.strip_prefix("arch=") else {
        return Err(Error::Checkpoint(format!(
            "manifest must start with arch=<hash>, got {arch_line:?}"
        )));
    };
    let mut members = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let net = load_checkpoint(&dir.join(line.trim()), input_shape.clone(), head)?;
        if net.architecture_hash() != expected_arch {
            return Err(Error::Checkpoint(format!(
                "member {line} architecture {} does not match manifest {expected_arch}",
                net.architecture_hash()
            )));
        }
        members.push(net);
    }
    if members.is_empty() {
        return Err(Error::Checkpoint("manifest lists no members".into()));
    }
    Ok(members)
}

fn dense_dims(dims: &[usize], layer: usize) -> Result<(usize, usize)> {
    match dims {
        [out, inp] => Ok((*out, *inp)),
        _ => Err(Error::Checkpoint(format!(
            "layer {layer}: dense-like layer expects rank 2, got {}",
            dims.len()
        ))),
    }
}

fn push_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::LayerSpec;

    fn small_net() -> Network {
        Network::new(
            vec![3],
            &[
                LayerSpec::Dense { in_dim: 3, out_dim: 2 },
                LayerSpec::ReLU,
                LayerSpec::Dropout { p: 0.25 },
                LayerSpec::FlipoutDense { in_dim: 2, out_dim: 1, prior_mean: 0.0, prior_sigma: 1.0 },
            ],
            Head::Regression,
            77,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = small_net();
        let bytes = checkpoint_bytes(&net);
        let back = network_from_bytes(&bytes, vec![3], Head::Regression).unwrap();
        assert!(net.params_equal(&back));
        assert_eq!(bytes, checkpoint_bytes(&back));
    }

    #[test]
    fn golden_bytes_for_a_fixed_tiny_net() {
        // Dense 1->1 with pinned values: the exact byte layout is part of
        // the format contract.
        let mut net = Network::new(
            vec![1],
            &[LayerSpec::Dense { in_dim: 1, out_dim: 1 }],
            Head::Regression,
            0,
        )
        .unwrap();
        match &mut net.layers_mut()[0] {
            Layer::Dense { weight, bias } => {
                weight.data_mut()[0] = 2.0;
                bias.data_mut()[0] = -1.0;
            }
            _ => unreachable!(),
        }
        let mut expected: Vec<u8> = Vec::new();
        expected.extend_from_slice(b"UXN1");
        expected.extend_from_slice(&1u32.to_le_bytes()); // layer count
        expected.push(0); // dense tag
        expected.extend_from_slice(&2u32.to_le_bytes()); // rank
        expected.extend_from_slice(&1u32.to_le_bytes()); // out
        expected.extend_from_slice(&1u32.to_le_bytes()); // in
        expected.extend_from_slice(&2.0f32.to_le_bytes());
        expected.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(checkpoint_bytes(&net), expected);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let net = small_net();
        let bytes = checkpoint_bytes(&net);
        assert!(network_from_bytes(&bytes[..bytes.len() - 2], vec![3], Head::Regression).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(network_from_bytes(&bad, vec![3], Head::Regression).is_err());
    }

    #[test]
    fn ensemble_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let members: Vec<Network> = (0..3)
            .map(|k| {
                Network::new(
                    vec![3],
                    &[LayerSpec::Dense { in_dim: 3, out_dim: 1 }],
                    Head::Regression,
                    k,
                )
                .unwrap()
            })
            .collect();
        let manifest = save_ensemble(&members, dir.path(), "model").unwrap();
        let loaded = load_ensemble(&manifest, vec![3], Head::Regression).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in members.iter().zip(&loaded) {
            assert!(a.params_equal(b));
        }
    }

    #[test]
    fn hash_tracks_content() {
        let net = small_net();
        let h1 = checkpoint_hash(&net);
        assert_eq!(h1, checkpoint_hash(&net.clone()));
        let redrawn = net.reinitialize_layer(0, 123).unwrap();
        assert_ne!(h1, checkpoint_hash(&redrawn));
    }
}
