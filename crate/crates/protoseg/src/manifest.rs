//! Run manifests: what a command was asked to do and what it produced.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::DataSpec;
use crate::error::Result;
use crate::io;

pub const MANIFEST_FILE: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Full argument list after the program name; `replay` re-runs it.
    pub args: Vec<String>,
    pub artifact_version: String,
    pub seed: u64,
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub config: Option<RunConfig>,
    pub data_spec: Option<DataSpec>,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, args: &[String], seed: u64, threads: usize) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        ManifestBuilder {
            manifest: RunManifest {
                command: command.into(),
                args: args.to_vec(),
                artifact_version: env!("CARGO_PKG_VERSION").into(),
                seed,
                threads,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix,
                wall_clock_seconds: 0.0,
                config: None,
                data_spec: None,
            },
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.inputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.outputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn config(&mut self, cfg: &RunConfig) -> &mut Self {
        self.manifest.config = Some(cfg.clone());
        self
    }

    pub fn data_spec(&mut self, spec: &DataSpec) -> &mut Self {
        self.manifest.data_spec = Some(spec.clone());
        self
    }

    pub fn finish(mut self, dir: &Path) -> Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        io::write_toml(&dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

pub fn read(path: &Path) -> Result<RunManifest> {
    io::read_toml(path)
}
