//! Parameter checkpoints: the flat parameter vector as a binary container
//! next to a JSON manifest of names, shapes and the configuration hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stb_tensor::{ParamStore, Tensor};

use crate::config::RunConfig;
use crate::data::{Container, DType, Normalizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub params: Vec<(String, Vec<usize>)>,
    pub normalizer: Normalizer,
}

fn manifest_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Writes `weights` (container) and its sibling `.json` manifest.
pub fn save_checkpoint(weights: &Path, store: &ParamStore, cfg: &RunConfig, normalizer: &Normalizer) -> Result<()> {
    let flat = Tensor::from_vec(store.flatten());
    Container::from_tensor(&flat, DType::F64).write(weights)?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        params: store.manifest(),
        normalizer: normalizer.clone(),
    };
    let path = manifest_path(weights);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads weights into `store`, which must have been built with the same
/// parameter layout. A differing configuration hash only warns, since
/// evaluation settings may legitimately change.
pub fn load_checkpoint(weights: &Path, store: &mut ParamStore, cfg: &RunConfig) -> Result<Manifest> {
    let path = manifest_path(weights);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&path, format!("line {}", e.line()), e.to_string()))?;
    if manifest.params != store.manifest() {
        return Err(Error::Validation(format!(
            "{}: parameter layout does not match the configured model",
            path.display()
        )));
    }
    if manifest.config_hash != cfg.hash() {
        log::warn!("checkpoint was trained with a different configuration");
    }
    let flat = Container::read(weights)?.to_tensor()?;
    if flat.len() != store.num_scalars() {
        return Err(Error::parse(
            weights,
            "byte 8",
            format!("{} values for {} parameters", flat.len(), store.num_scalars()),
        ));
    }
    store.assign_flat(flat.data())?;
    Ok(manifest)
}
