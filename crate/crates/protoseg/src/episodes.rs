//! Episode manifests: the classes and block files of every episode, so an
//! evaluation can be replayed without resampling.

use std::collections::HashMap;
use std::path::Path;

use protoseg_core::episode::{episode_from_sources, Episode, EpisodeConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{CliError, Result};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeEntry {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<String>>,
    pub queries: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeManifest {
    pub seed: u64,
    pub fold: usize,
    pub split: Split,
    pub config: EpisodeConfig,
    #[serde(rename = "episode")]
    pub episodes: Vec<EpisodeEntry>,
}

impl EpisodeManifest {
    pub fn describe(
        episodes: &[Episode],
        files: &[String],
        seed: u64,
        fold: usize,
        split: Split,
        config: EpisodeConfig,
    ) -> Self {
        let entries = episodes
            .iter()
            .map(|e| EpisodeEntry {
                classes: e.class_map.clone(),
                support: e.support.iter().map(|s| s.iter().map(|x| files[x.source].clone()).collect()).collect(),
                queries: e.queries.iter().map(|q| files[q.source].clone()).collect(),
            })
            .collect();
        EpisodeManifest { seed, fold, split, config, episodes: entries }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_toml(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        io::read_toml(path)
    }

    /// Rebuilds the episodes from the blocks of `data`.
    pub fn episodes(&self, data: &Dataset) -> Result<Vec<Episode>> {
        let (pool, files) = data.pool(self.split);
        let index: HashMap<&str, usize> = files.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
        let find = |f: &String| {
            index
                .get(f.as_str())
                .copied()
                .ok_or_else(|| CliError::invalid(format!("episode block `{f}` is not in the dataset's {:?} split", self.split)))
        };
        self.episodes
            .iter()
            .map(|e| {
                let support = e
                    .support
                    .iter()
                    .map(|s| s.iter().map(find).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                let queries = e.queries.iter().map(find).collect::<Result<Vec<_>>>()?;
                Ok(episode_from_sources(pool, &e.classes, &support, &queries)?)
            })
            .collect()
    }
}
