//! Checkpoints: parameters, optimizer momentum, and the identity of the
//! run that produced them.
//!
//! Values are stored as JSON. Serialization uses shortest-roundtrip float
//! formatting, so a save/load cycle reproduces every `f64` bit for bit and
//! training resumed from a checkpoint matches an uninterrupted run
//! exactly. The embedded config digest refuses restores into a model built
//! from different settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::optim::Sgd;
use crate::tensor::params::ParamSet;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {source}")]
    Format {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint was produced by a different configuration (digest {got} vs expected {want})")]
    DigestMismatch { got: String, want: String },
    #[error("checkpoint parameter mismatch: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub velocity: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Digest of the resolved run configuration.
    pub config_digest: String,
    /// Number of optimizer steps already taken.
    pub step: usize,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    /// Snapshot the current parameters and momentum.
    pub fn capture(params: &ParamSet, opt: &Sgd, step: usize, config_digest: &str) -> Checkpoint {
        let velocity = opt.velocity();
        let saved = params
            .ids()
            .enumerate()
            .map(|(i, id)| SavedParam {
                name: params.name(id).to_owned(),
                shape: params.shape(id).to_vec(),
                data: params.data(id).to_vec(),
                velocity: velocity[i].clone(),
            })
            .collect();
        Checkpoint {
            config_digest: config_digest.to_owned(),
            step,
            params: saved,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(io_err)?;
            }
        }
        let text = serde_json::to_string(self).map_err(|source| CheckpointError::Format {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, text).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CheckpointError::Format {
            path: path.display().to_string(),
            source,
        })
    }

    /// Restore parameters and momentum into a freshly built model whose
    /// parameter set must match by name and shape. `expected_digest`
    /// guards against restoring into a different configuration; pass
    /// `None` to skip the check (e.g. for inspection tools).
    pub fn restore(
        &self,
        params: &mut ParamSet,
        opt: &mut Sgd,
        expected_digest: Option<&str>,
    ) -> Result<(), CheckpointError> {
        if let Some(want) = expected_digest {
            if self.config_digest != want {
                return Err(CheckpointError::DigestMismatch {
                    got: self.config_digest.clone(),
                    want: want.to_owned(),
                });
            }
        }
        if self.params.len() != params.len() {
            return Err(CheckpointError::ParamMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        let mut velocity = Vec::with_capacity(ids.len());
        for (saved, &id) in self.params.iter().zip(&ids) {
            let name = params.name(id);
            if saved.name != name {
                return Err(CheckpointError::ParamMismatch(format!(
                    "parameter order differs: checkpoint has '{}', model has '{}'",
                    saved.name, name
                )));
            }
            if saved.shape != params.shape(id) {
                return Err(CheckpointError::ParamMismatch(format!(
                    "'{}' has shape {:?} in the checkpoint but {:?} in the model",
                    saved.name,
                    saved.shape,
                    params.shape(id)
                )));
            }
            if saved.velocity.len() != saved.data.len() {
                return Err(CheckpointError::ParamMismatch(format!(
                    "'{}' stores {} velocity entries for {} values",
                    saved.name,
                    saved.velocity.len(),
                    saved.data.len()
                )));
            }
            velocity.push(saved.velocity.clone());
        }
        for (saved, &id) in self.params.iter().zip(&ids) {
            params
                .set_data(id, saved.data.clone())
                .map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
        }
        opt.set_velocity(velocity)
            .map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
        Ok(())
    }
}
