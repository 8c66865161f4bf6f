//! Checkpoints: a tensor directory of named parameters plus `config.toml`
//! echoing the architecture.

use std::path::Path;

use protoseg_core::backbone::BackboneConfig;
use protoseg_core::params::ParamStore;
use protoseg_core::train::{Model, ModelConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::io;
use crate::pt3d::TensorDir;

pub const CONFIG_FILE: &str = "config.toml";
const KIND_MODEL: &str = "model";
const KIND_BACKBONE: &str = "backbone";

fn write_params<C: Serialize>(dir: &Path, kind: &str, params: &ParamStore, config: &C) -> Result<()> {
    let mut out = TensorDir::default();
    out.meta.insert("kind".into(), kind.into());
    out.tensors = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    out.write(dir)?;
    io::write_toml(&dir.join(CONFIG_FILE), config)
}

fn read_params<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(ParamStore, C)> {
    let d = TensorDir::read(dir)?;
    let found = d.meta.get("kind").map(String::as_str).unwrap_or("unknown");
    if found != kind {
        return Err(CliError::format(dir, format!("expected a {kind} checkpoint, found `{found}`")));
    }
    let mut params = ParamStore::new();
    for (n, t) in d.tensors {
        params.insert(n, t);
    }
    let config = io::read_toml(&dir.join(CONFIG_FILE))?;
    Ok((params, config))
}

pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    write_params(dir, KIND_MODEL, &model.params, &model.config)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let (params, config): (ParamStore, ModelConfig) = read_params(dir, KIND_MODEL)?;
    Model::from_parts(config, params).map_err(|e| CliError::format(dir, e.to_string()))
}

pub fn save_backbone(dir: &Path, cfg: &BackboneConfig, weights: &ParamStore) -> Result<()> {
    write_params(dir, KIND_BACKBONE, weights, cfg)
}

pub fn load_backbone(dir: &Path) -> Result<(BackboneConfig, ParamStore)> {
    let (params, cfg): (ParamStore, BackboneConfig) = read_params(dir, KIND_BACKBONE)?;
    protoseg_core::backbone::check_weights(&cfg, &params).map_err(|e| CliError::format(dir, e.to_string()))?;
    Ok((cfg, params))
}
