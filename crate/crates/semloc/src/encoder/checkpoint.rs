//! Versioned JSON checkpoints: named tensors plus the hyperparameter block,
//! validated against the architecture contract at load time.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormStats, Tensor};

use super::{init_params, EncoderError, EncoderHyperparams, EncoderParams};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    hyper: EncoderHyperparams,
    tensors: BTreeMap<String, Tensor>,
    bn_stats: BTreeMap<String, BatchNormStats>,
}

pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    let path = path.as_ref();
    let tensors: BTreeMap<String, Tensor> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.clone()))
        .collect();
    let bn_stats: BTreeMap<String, BatchNormStats> = params
        .mpnn
        .iter()
        .enumerate()
        .map(|(i, layer)| (format!("mpnn.{i}"), layer.bn_stats.clone()))
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        hyper: params.hyper.clone(),
        tensors,
        bn_stats,
    };
    let text = serde_json::to_string(&file).expect("checkpoint serialises");
    std::fs::write(path, text).map_err(|e| EncoderError::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams, EncoderError> {
    let path = path.as_ref();
    let err = |detail: String| EncoderError::Checkpoint {
        path: path.display().to_string(),
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }

    // Rebuild from the hyperparameter block, then fill every tensor,
    // validating names and shapes against the architecture contract.
    let mut params = init_params(&file.hyper, 0);
    let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for name in &expected {
        if !file.tensors.contains_key(name) {
            return Err(err(format!("missing tensor {name}")));
        }
    }
    if file.tensors.len() != expected.len() {
        let extra: Vec<&String> = file
            .tensors
            .keys()
            .filter(|k| !expected.contains(k))
            .collect();
        return Err(err(format!("unexpected tensors: {extra:?}")));
    }
    for (name, slot) in params.named_tensors_mut() {
        let t = &file.tensors[&name];
        if t.shape() != slot.shape() {
            return Err(err(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    for (i, layer) in params.mpnn.iter_mut().enumerate() {
        let key = format!("mpnn.{i}");
        let stats = file
            .bn_stats
            .get(&key)
            .ok_or_else(|| err(format!("missing batch-norm stats {key}")))?;
        if stats.mean.len() != file.hyper.hidden_dim || stats.var.len() != file.hyper.hidden_dim {
            return Err(err(format!("batch-norm stats {key} have the wrong width")));
        }
        layer.bn_stats = stats.clone();
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_exactly() {
        let hyper = EncoderHyperparams::standard(6);
        let params = init_params(&hyper, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn rejects_shape_drift() {
        let params = init_params(&EncoderHyperparams::standard(6), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&params, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Claim a different hidden dimension than the tensors carry.
        let tampered = text.replace("\"hidden_dim\":64", "\"hidden_dim\":32");
        std::fs::write(&path, tampered).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let e = load_checkpoint("/nonexistent/ckpt.json").unwrap_err();
        assert!(e.to_string().contains("/nonexistent/ckpt.json"));
    }
}
