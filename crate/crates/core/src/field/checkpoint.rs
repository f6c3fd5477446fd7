//! Versioned JSON tensor archive.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Normalization, NeuralField};
use crate::scene_io::SceneConfig;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "WILDRECON-CKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Archive {
    magic: String,
    version: u32,
    iteration: u64,
    config: SceneConfig,
    frame: Normalization,
    log_inv_std: f64,
    tensors: Vec<NamedTensor>,
}

/// Model state at a given iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: SceneConfig,
    pub field: NeuralField,
    /// Log of the renderer's inverse standard deviation.
    pub log_inv_std: f64,
}

fn named_tensors(field: &NeuralField) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (prefix, mlp) in [("geometry", &field.geometry), ("color", &field.color)] {
        for (k, l) in mlp.layers.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{prefix}.{k}.weight"),
                shape: l.weight.shape().to_vec(),
                data: l.weight.iter().copied().collect(),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.{k}.bias"),
                shape: l.bias.shape().to_vec(),
                data: l.bias.to_vec(),
            });
        }
    }
    out.push(NamedTensor {
        name: "embeddings".into(),
        shape: field.embeddings.shape().to_vec(),
        data: field.embeddings.iter().copied().collect(),
    });
    out
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let archive = Archive {
        magic: CHECKPOINT_MAGIC.into(),
        version: VERSION,
        iteration: ckpt.iteration,
        config: ckpt.config.clone(),
        frame: ckpt.field.frame,
        log_inv_std: ckpt.log_inv_std,
        tensors: named_tensors(&ckpt.field),
    };
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec(&archive)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let archive: Archive = serde_json::from_slice(&bytes)?;
    if archive.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic `{}`", archive.magic)));
    }
    if archive.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", archive.version)));
    }
    let emb = archive
        .tensors
        .iter()
        .find(|t| t.name == "embeddings")
        .ok_or_else(|| Error::Checkpoint("missing embeddings".into()))?;
    let num_images = emb.shape.first().copied().unwrap_or(0);
    let mut field = NeuralField::new(archive.config.field.clone(), archive.frame, num_images, 0)?;
    let expected = named_tensors(&field);
    if expected.len() != archive.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            archive.tensors.len()
        )));
    }
    for ((dst, want), got) in field.tensors_mut().into_iter().zip(&expected).zip(&archive.tensors) {
        if want.name != got.name || want.shape != got.shape || got.data.len() != dst.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match `{}` {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
        dst.copy_from_slice(&got.data);
    }
    Ok(Checkpoint { iteration: archive.iteration, config: archive.config, field, log_inv_std: archive.log_inv_std })
}
