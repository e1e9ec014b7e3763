//! Versioned checkpoints holding any trained model.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{DelanModel, LnnDiffusionModel, OnnModel, PureDiffusionModel};
use crate::data::{error_offset, TrajectoryDataset};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::model::{DynamicsModel, ModelKind};
use crate::stride::StrideModel;
use crate::train::{LossCurve, TrainConfig};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum AnyModel {
    Stride(StrideModel),
    Onn(OnnModel),
    Delan(DelanModel),
    LnnDiffusion(LnnDiffusionModel),
    PureDiffusion(PureDiffusionModel),
}

impl AnyModel {
    pub fn train(kind: ModelKind, ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(Self, LossCurve)> {
        Ok(match kind {
            ModelKind::Stride => {
                let (m, c) = StrideModel::train(ds, cfg)?;
                (AnyModel::Stride(m), c)
            }
            ModelKind::Onn => {
                let (m, c) = OnnModel::train(ds, cfg)?;
                (AnyModel::Onn(m), c)
            }
            ModelKind::Delan => {
                let (m, c) = DelanModel::train(ds, cfg)?;
                (AnyModel::Delan(m), c)
            }
            ModelKind::LnnDiffusion => {
                let (m, c) = LnnDiffusionModel::train(ds, cfg)?;
                (AnyModel::LnnDiffusion(m), c)
            }
            ModelKind::PureDiffusion => {
                let (m, c) = PureDiffusionModel::train(ds, cfg)?;
                (AnyModel::PureDiffusion(m), c)
            }
            other => {
                return Err(Error::Usage(format!("{} is not a trainable model", other.cli_name())));
            }
        })
    }

    pub fn as_model(&self) -> &dyn DynamicsModel {
        match self {
            AnyModel::Stride(m) => m,
            AnyModel::Onn(m) => m,
            AnyModel::Delan(m) => m,
            AnyModel::LnnDiffusion(m) => m,
            AnyModel::PureDiffusion(m) => m,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.as_model().kind()
    }

    pub fn env(&self) -> &EnvSpec {
        match self {
            AnyModel::Stride(m) => &m.env,
            AnyModel::Onn(m) => &m.env,
            AnyModel::Delan(m) => &m.env,
            AnyModel::LnnDiffusion(m) => &m.env,
            AnyModel::PureDiffusion(m) => &m.env,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        match self {
            AnyModel::Stride(m) => &m.config,
            AnyModel::Onn(m) => &m.config,
            AnyModel::Delan(m) => &m.config,
            AnyModel::LnnDiffusion(m) => &m.config,
            AnyModel::PureDiffusion(m) => &m.config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub data: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model_kind: ModelKind,
    pub env: EnvSpec,
    pub train_config: TrainConfig,
    pub seeds: Seeds,
    pub model: AnyModel,
}

impl Checkpoint {
    pub fn new(model: AnyModel, data_seed: u64) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            model_kind: model.kind(),
            env: model.env().clone(),
            train_config: model.config().clone(),
            seeds: Seeds {
                train: model.config().seed,
                data: data_seed,
            },
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Corrupt {
            offset: error_offset(text, &e),
            message: e.to_string(),
        })?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Schema(format!(
                    "checkpoint schema_version {v} (expected {CHECKPOINT_SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Schema("checkpoint has no schema_version".into())),
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
        if ck.model.kind() != ck.model_kind {
            return Err(Error::Schema(format!(
                "model_kind {} does not match stored parameters ({})",
                ck.model_kind.cli_name(),
                ck.model.kind().cli_name()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Short hex digest of the training configuration, environment and seeds.
    pub fn config_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.train_config).unwrap().as_bytes());
        h.update(serde_json::to_string(&self.env).unwrap().as_bytes());
        h.update(serde_json::to_string(&self.seeds).unwrap().as_bytes());
        h.update(self.model_kind.cli_name().as_bytes());
        hex16(&h.finalize())
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Digest of arbitrary serializable settings, used to tag reports.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("digest input serializes");
    hex16(&Sha256::digest(json.as_bytes()))
}
