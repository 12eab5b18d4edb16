//! Versioned JSON checkpoints.
//!
//! ```text
//! {
//!   "version": 1,
//!   "created": "fewshot-dml 0.1.0",
//!   "kind": "dml",
//!   "seed": 7,
//!   "config_hash": "…",
//!   "metadata": { … },
//!   "networks": [
//!     { "name": "trunk", "layer_specs": [ … ], "weights": [[…row-major…]],
//!       "biases": [[…]], "adam_m": {"weights": …, "biases": …} | null,
//!       "adam_v": … | null, "step_count": 0 }
//!   ]
//! }
//! ```
//!
//! `created` names the writing tool rather than a wall-clock time so that a
//! rerun with the same inputs reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, LayerSpec, Mlp, ParamBundle};
use crate::optim::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named network with optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub name: String,
    pub net: Mlp,
    pub adam: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub metadata: serde_json::Value,
    pub networks: Vec<NetworkState>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Result<&NetworkState> {
        self.networks
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no network named {name}")))
    }

    pub fn require_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MomentFile {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    name: String,
    layer_specs: Vec<LayerSpec>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    adam_m: Option<MomentFile>,
    adam_v: Option<MomentFile>,
    step_count: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    created: String,
    kind: String,
    seed: u64,
    config_hash: String,
    metadata: serde_json::Value,
    networks: Vec<NetworkFile>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn flatten(bundle: &ParamBundle) -> MomentFile {
    MomentFile {
        weights: bundle.layers.iter().map(|l| l.weight.iter().copied().collect()).collect(),
        biases: bundle.layers.iter().map(|l| l.bias.to_vec()).collect(),
    }
}

fn unflatten(specs: &[LayerSpec], weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<ParamBundle> {
    if weights.len() != specs.len() || biases.len() != specs.len() {
        return Err(Error::Shape(format!(
            "{} layer specs but {} weight and {} bias arrays",
            specs.len(),
            weights.len(),
            biases.len()
        )));
    }
    let layers = specs
        .iter()
        .zip(weights.into_iter().zip(biases))
        .map(|(s, (w, b))| {
            let weight = Array2::from_shape_vec((s.output_dim, s.input_dim), w)
                .map_err(|e| Error::Shape(format!("weight: {e}")))?;
            if b.len() != s.output_dim {
                return Err(Error::Shape("bias length does not match layer spec".into()));
            }
            Ok(Dense {
                weight,
                bias: Array1::from(b),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ParamBundle { layers })
}

impl From<&NetworkState> for NetworkFile {
    fn from(n: &NetworkState) -> Self {
        let params = flatten(&n.net.params);
        NetworkFile {
            name: n.name.clone(),
            layer_specs: n.net.specs().to_vec(),
            weights: params.weights,
            biases: params.biases,
            adam_m: n.adam.as_ref().map(|a| flatten(&a.first_moment)),
            adam_v: n.adam.as_ref().map(|a| flatten(&a.second_moment)),
            step_count: n.adam.as_ref().map_or(0, |a| a.step_count),
        }
    }
}

impl TryFrom<NetworkFile> for NetworkState {
    type Error = Error;

    fn try_from(f: NetworkFile) -> Result<Self> {
        let params = unflatten(&f.layer_specs, f.weights, f.biases)?;
        let net = Mlp::from_parts(f.layer_specs.clone(), params)?;
        let adam = match (f.adam_m, f.adam_v) {
            (Some(m), Some(v)) => Some(AdamState {
                step_count: f.step_count,
                first_moment: unflatten(&f.layer_specs, m.weights, m.biases)?,
                second_moment: unflatten(&f.layer_specs, v.weights, v.biases)?,
            }),
            (None, None) => None,
            _ => {
                return Err(Error::Config(format!(
                    "network {}: adam_m and adam_v must both be present or both absent",
                    f.name
                )))
            }
        };
        Ok(NetworkState {
            name: f.name,
            net,
            adam,
        })
    }
}

pub fn checkpoint_to_string(ckpt: &Checkpoint) -> String {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        created: format!("fewshot-dml {}", env!("CARGO_PKG_VERSION")),
        kind: ckpt.kind.clone(),
        seed: ckpt.seed,
        config_hash: ckpt.config_hash.clone(),
        metadata: ckpt.metadata.clone(),
        networks: ckpt.networks.iter().map(NetworkFile::from).collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("checkpoint always serializes");
    text.push('\n');
    text
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let parse_err = |e: serde_json::Error| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: probe.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_str(text).map_err(parse_err)?;
    let networks = file
        .networks
        .into_iter()
        .map(NetworkState::try_from)
        .collect::<Result<_>>()?;
    Ok(Checkpoint {
        kind: file.kind,
        seed: file.seed,
        config_hash: file.config_hash,
        metadata: file.metadata,
        networks,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}
