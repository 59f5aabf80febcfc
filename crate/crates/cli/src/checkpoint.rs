//! Single-document JSON checkpoints.
//!
//! Values are written with the shortest decimal representation that round-trips
//! to the same `f64`, so `save(load(save(x)))` reproduces the bytes of `save(x)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use localness::rng::RngState;
use localness::{Encoder, EncoderConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredParam {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    /// Sorted by name.
    pub params: BTreeMap<String, StoredParam>,
    pub rng_state: RngState,
    pub step: usize,
}

impl Checkpoint {
    pub fn from_encoder(encoder: &Encoder, rng_state: RngState, step: usize) -> Self {
        let params = encoder
            .params()
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    StoredParam {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: encoder.config().clone(),
            params,
            rng_state,
            step,
        }
    }

    pub fn to_encoder(&self) -> Result<Encoder, CliError> {
        let mut params = BTreeMap::new();
        for (name, p) in &self.params {
            let t = Tensor::new(p.shape.clone(), p.values.clone())
                .map_err(|e| CliError::Usage(format!("checkpoint parameter `{name}`: {e}")))?;
            params.insert(name.clone(), t);
        }
        Ok(Encoder::from_params(self.config.clone(), params)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(self).expect("checkpoint values are finite");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| CliError::Usage(format!("invalid checkpoint: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(CliError::Usage(format!(
                    "checkpoint format_version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(CliError::Usage("checkpoint has no format_version".into())),
        }
        serde_json::from_slice(bytes).map_err(|e| CliError::Usage(format!("invalid checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
