//! Single-file model archive: encoder configuration, every named parameter
//! tensor, the centroid pair and the digest of the configuration that
//! produced it.
//!
//! Layout: the 8-byte magic `DDCSADv1`, a little-endian `u64` manifest
//! length, the JSON manifest, then each tensor listed in the manifest as
//! row-major little-endian `f64` values, in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centroids::CentroidPair;
use crate::encoder::{EncoderConfig, ModelParams, NamedParam, ParamGroup};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DDCSADv1";

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serializes to JSON");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub centroids: CentroidPair,
    pub loss: LossConfig,
    /// Optimizer steps taken since random initialization.
    pub iterations: usize,
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TensorGroup {
    Conv,
    Head,
    Centroid,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: TensorGroup,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    digest: String,
    encoder: EncoderConfig,
    loss: LossConfig,
    iterations: usize,
    centroid_epoch: usize,
    centroid_members: (usize, usize),
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut data: Vec<&[f64]> = Vec::new();
        for p in &self.params.params {
            entries.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                group: match p.group {
                    ParamGroup::Conv => TensorGroup::Conv,
                    ParamGroup::Head => TensorGroup::Head,
                },
            });
            data.push(p.tensor.data());
        }
        for (name, c) in [("centroid.c_p", &self.centroids.c_p), ("centroid.c_n", &self.centroids.c_n)] {
            entries.push(TensorEntry {
                name: name.into(),
                shape: vec![c.len()],
                group: TensorGroup::Centroid,
            });
            data.push(c);
        }
        let manifest = Manifest {
            digest: self.digest.clone(),
            encoder: self.params.config.clone(),
            loss: self.loss.clone(),
            iterations: self.iterations,
            centroid_epoch: self.centroids.epoch_computed,
            centroid_members: self.centroids.member_counts,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes to JSON");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * data.iter().map(|d| d.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for d in data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(&format!("manifest: {e}")))?;
        let mut rest = &bytes[16 + len..];
        let mut params = Vec::new();
        let mut c_p = None;
        let mut c_n = None;
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad(&format!("truncated data for {}", e.name)));
            }
            let values: Vec<f64> = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[8 * n..];
            let group = match e.group {
                TensorGroup::Conv => ParamGroup::Conv,
                TensorGroup::Head => ParamGroup::Head,
                TensorGroup::Centroid => {
                    match e.name.as_str() {
                        "centroid.c_p" => c_p = Some(values),
                        "centroid.c_n" => c_n = Some(values),
                        other => return Err(bad(&format!("unknown centroid tensor {other}"))),
                    }
                    continue;
                }
            };
            params.push(NamedParam {
                name: e.name,
                group,
                tensor: Tensor::new(e.shape, values)?,
            });
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let reference = crate::encoder::init_params(&manifest.encoder, 0)?;
        let layout = |p: &ModelParams| -> Vec<(String, Vec<usize>, ParamGroup)> {
            p.params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.group))
                .collect()
        };
        let params = ModelParams {
            config: manifest.encoder,
            params,
        };
        if layout(&params) != layout(&reference) {
            return Err(bad("tensor layout does not match the encoder configuration"));
        }
        let centroids = CentroidPair {
            c_p: c_p.ok_or_else(|| bad("missing c_p"))?,
            c_n: c_n.ok_or_else(|| bad("missing c_n"))?,
            epoch_computed: manifest.centroid_epoch,
            member_counts: manifest.centroid_members,
        };
        centroids.check()?;
        if centroids.dim() != params.embedding_dim() {
            return Err(bad("centroid dimension does not match the encoder"));
        }
        Ok(Self {
            params,
            centroids,
            loss: manifest.loss,
            iterations: manifest.iterations,
            digest: manifest.digest,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
