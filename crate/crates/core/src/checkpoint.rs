//! Versioned model checkpoints.
//!
//! JSON with every parameter tensor, the run configuration, and the final
//! thresholds / running statistics. `f64` values serialize in shortest
//! round-trip form, so save -> load -> save is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub run: RunConfig,
    pub model: Model,
}

pub fn save(path: &Path, model: &Model, run: &RunConfig) -> Result<(), CheckpointError> {
    let payload = Checkpoint {
        version: CHECKPOINT_VERSION,
        run: run.clone(),
        model: model.clone(),
    };
    let json = serde_json::to_string(&payload)?;
    fs::write(path, json).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(ckpt.version));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 4,
            sim_embed_dim: 2,
            iis_start_layer: 2,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 3, 2, &mut rng);
        // Exercise awkward values.
        model.input_w.data[0] = 1.0 / 3.0;
        model.input_w.data[1] = 1e-300;
        model.layers[0].thresholds = vec![0.1 + 0.2, 0.5];

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let run = RunConfig::default();
        save(&path, &model, &run).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.model.input_w, model.input_w);
        assert_eq!(loaded.model.layers[0].thresholds, model.layers[0].thresholds);

        // Saving the reloaded model writes identical bytes.
        let path2 = dir.path().join("ckpt2.json");
        save(&path2, &loaded.model, &loaded.run).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(
            ModelConfig {
                num_layers: 1,
                hidden_dim: 2,
                sim_embed_dim: 2,
                iis_start_layer: 2,
                ..ModelConfig::default()
            },
            2,
            1,
            &mut rng,
        );
        save(&path, &model, &RunConfig::default()).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Version(9))));
    }
}
