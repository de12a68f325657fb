//! Toy-detector checkpoints: a JSON header (shape manifest plus a config
//! echo) and the flat parameter array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use detkit_core::toydet::{HeadLayout, ToyModelParams, TrainConfig};

use crate::persist::{write_json_atomic, PersistError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layout: HeadLayout,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f64>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ToyModelParams,
    config: &TrainConfig,
) -> Result<(), PersistError> {
    let ckpt = Checkpoint {
        header: CheckpointHeader { layout: params.layout, config: config.clone() },
        values: params.values.clone(),
    };
    write_json_atomic(path, &ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyModelParams, TrainConfig), PersistError> {
    let text = std::fs::read_to_string(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|source| PersistError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let params = ToyModelParams::from_values(ckpt.header.layout, ckpt.values).ok_or_else(|| {
        PersistError::Invalid {
            path: path.display().to_string(),
            what: "value count does not match the layout manifest".into(),
        }
    })?;
    Ok((params, ckpt.header.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = TrainConfig::default();
        let mut params = ToyModelParams::zeros(cfg.layout());
        for (i, v) in params.values.iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save_checkpoint(&path, &params, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.values, params.values);
        assert_eq!(loaded.layout, params.layout);
        assert_eq!(loaded_cfg, cfg);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = TrainConfig::default();
        let params = ToyModelParams::zeros(cfg.layout());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let mut ckpt = Checkpoint {
            header: CheckpointHeader { layout: params.layout, config: cfg },
            values: params.values,
        };
        ckpt.values.pop();
        write_json_atomic(&path, &ckpt).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
