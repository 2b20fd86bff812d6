//! Run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use cornet_core::corm::{CormConfig, CorrelationFn};
use cornet_core::seqmodel::{EncoderConfig, NetworkConfig};
use cornet_core::synth::Corpus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Module settings that do not follow from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CormOptions {
    pub dv: usize,
    pub d_k: usize,
    pub vcor_fn: CorrelationFn,
    pub scor_fn: CorrelationFn,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub freeze_alpha: bool,
    pub freeze_beta: bool,
    pub scor_once: bool,
}

impl Default for CormOptions {
    fn default() -> Self {
        let r = CormConfig::reference();
        CormOptions {
            dv: r.dv,
            d_k: r.d_k,
            vcor_fn: r.vcor_fn,
            scor_fn: r.scor_fn,
            alpha_init: r.alpha_init,
            beta_init: r.beta_init,
            freeze_alpha: false,
            freeze_beta: false,
            scor_once: false,
        }
    }
}

fn default_learning_rate() -> f64 {
    5e-4
}

fn default_batch_size() -> usize {
    16
}

fn default_balance() -> f64 {
    1e-3
}

fn default_crop() -> usize {
    256
}

/// Everything a training run depends on. Relative paths are resolved against
/// the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus directory (see [`cornet_core::synth`]).
    pub data: PathBuf,
    /// Label embeddings; defaults to `embeddings.json` inside `data`.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub corm: CormOptions,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Weight `a` of the co-occurrence term in `bce + a * mse`.
    #[serde(default = "default_balance")]
    pub balance_factor: f64,
    /// Training window length; longer videos are cropped, shorter ones padded.
    #[serde(default = "default_crop")]
    pub crop_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Divide both co-occurrence matrices by the window length before the MSE.
    #[serde(default)]
    pub normalize_cooc: bool,
}

impl RunConfig {
    /// Settings for the bundled synthetic benchmark (64-frame videos of 16-wide features).
    pub fn benchmark(data: impl Into<PathBuf>, seed: u64) -> Self {
        RunConfig {
            data: data.into(),
            embeddings: None,
            encoder: EncoderConfig::synthetic_default(16),
            corm: CormOptions::default(),
            learning_rate: default_learning_rate(),
            epochs: 30,
            batch_size: 1,
            balance_factor: default_balance(),
            crop_len: 64,
            seed,
            normalize_cooc: false,
        }
    }

    /// Parses `path`. Syntax and field errors are usage errors carrying the
    /// line and column.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.data = base.join(&config.data);
        config.embeddings = config.embeddings.map(|p| base.join(p));
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("crop_len", self.crop_len),
        ] {
            if v == 0 {
                return usage(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return usage(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.balance_factor >= 0.0 && self.balance_factor.is_finite()) {
            return usage(format!("balance_factor must be >= 0, got {}", self.balance_factor));
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Full network shape for `corpus`, checking the encoder input width.
    pub fn network(&self, corpus: &Corpus) -> Result<NetworkConfig, CliError> {
        let width = corpus.feature_dim();
        if width != self.encoder.d_in {
            return Err(CliError::Usage(format!(
                "encoder.d_in is {} but the features in {} are {width} wide",
                self.encoder.d_in,
                self.data.display()
            )));
        }
        let o = &self.corm;
        let network = NetworkConfig {
            encoder: self.encoder.clone(),
            corm: CormConfig {
                d0: self.encoder.hidden,
                dv: o.dv,
                num_classes: corpus.vocab.len(),
                embed_dim: corpus.semantic.width(),
                d_k: o.d_k,
                vcor_fn: o.vcor_fn,
                scor_fn: o.scor_fn,
                alpha_init: o.alpha_init,
                beta_init: o.beta_init,
                freeze_alpha: o.freeze_alpha,
                freeze_beta: o.freeze_beta,
                scor_once: o.scor_once,
            },
        };
        network.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(network)
    }
}
