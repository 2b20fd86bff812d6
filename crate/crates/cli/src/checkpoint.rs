//! Versioned JSON checkpoints. Tensors are stored by name as base64 of their
//! little-endian f64 bytes, so a reload is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cornet_core::numcore::{AdamConfig, OptimizerState};
use cornet_core::seqmodel::{NetworkConfig, NetworkParams};
use cornet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "cornet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("tensor `{name}`: {message}")]
    Tensor { name: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl NamedTensor {
    pub fn encode(name: &str, t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor, CheckpointError> {
        let err = |message: String| CheckpointError::Tensor {
            name: self.name.clone(),
            message,
        };
        let bytes = STANDARD.decode(&self.data).map_err(|e| err(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(err(format!("{} bytes is not a whole number of f64 values", bytes.len())));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| err(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<NamedTensor>,
    pub second_moment: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_digest: String,
    pub seed: u64,
    /// 1-based index of the last completed epoch.
    pub epoch: usize,
    pub network: NetworkConfig,
    pub params: Vec<NamedTensor>,
    pub optimizer: OptimizerRecord,
}

impl Checkpoint {
    pub fn capture(
        network: &NetworkConfig,
        params: &NetworkParams,
        optimizer: &OptimizerState,
        epoch: usize,
        seed: u64,
        config_digest: &str,
    ) -> Self {
        let named = params.named();
        let encode_all = |ts: &[Tensor]| {
            named
                .iter()
                .zip(ts)
                .map(|((name, _), t)| NamedTensor::encode(name, t))
                .collect()
        };
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config_digest: config_digest.into(),
            seed,
            epoch,
            network: network.clone(),
            params: named.iter().map(|(name, t)| NamedTensor::encode(name, t)).collect(),
            optimizer: OptimizerRecord {
                config: optimizer.config,
                step: optimizer.step,
                first_moment: encode_all(&optimizer.first_moment),
                second_moment: encode_all(&optimizer.second_moment),
            },
        }
    }

    /// Rebuilds the parameters, checking every name and shape against the stored network.
    pub fn params(&self) -> Result<NetworkParams, CheckpointError> {
        let mut params = NetworkParams::init(&self.network, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| {
            CheckpointError::Format {
                path: "<network>".into(),
                message: e.to_string(),
            }
        })?;
        let mut slots = params.named_mut();
        if slots.len() != self.params.len() {
            return Err(CheckpointError::Format {
                path: "<params>".into(),
                message: format!("network has {} tensors, checkpoint stores {}", slots.len(), self.params.len()),
            });
        }
        for ((name, slot), stored) in slots.iter_mut().zip(&self.params) {
            if *name != stored.name {
                return Err(CheckpointError::Tensor {
                    name: name.clone(),
                    message: format!("expected here, found `{}`", stored.name),
                });
            }
            let t = stored.decode()?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::Tensor {
                    name: name.clone(),
                    message: format!("stored shape {:?}, network implies {:?}", t.shape(), slot.shape()),
                });
            }
            **slot = t;
        }
        drop(slots);
        Ok(params)
    }

    pub fn optimizer(&self) -> Result<OptimizerState, CheckpointError> {
        let decode = |ts: &[NamedTensor]| ts.iter().map(NamedTensor::decode).collect::<Result<Vec<_>, _>>();
        Ok(OptimizerState {
            config: self.optimizer.config,
            step: self.optimizer.step,
            first_moment: decode(&self.optimizer.first_moment)?,
            second_moment: decode(&self.optimizer.second_moment)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        fs::write(path, text + "\n").map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: shown.clone(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| CheckpointError::Format {
            path: shown.clone(),
            message: e.to_string(),
        })?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(CheckpointError::Format {
                path: shown,
                message: format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version),
            });
        }
        Ok(ckpt)
    }
}
