//! Synthetic dataset directories: block files, a manifest with the class
//! table and fold assignment, and the class-name embedding file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use protoseg_core::data::{ClassTable, PointCloudBlock};
use protoseg_core::episode::{make_fold_split, FoldSplit};
use protoseg_core::projection::SemanticEmbeddingTable;
use protoseg_core::synth::{generate_blocks, synthetic_embeddings, BlockingConfig, GeneratorConfig};
use protoseg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pt3d::TensorDir;
use crate::{io, pb3d};

pub const MANIFEST_FILE: &str = "dataset.toml";
pub const BLOCK_DIR: &str = "blocks";
pub const EMBEDDING_DIR: &str = "embeddings";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSpec {
    pub dim: usize,
    pub noise: f64,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        EmbeddingSpec { dim: 16, noise: 0.02 }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub seed: u64,
    pub scenes: usize,
    /// Share of scenes (taken from the end) held out for test episodes.
    pub test_fraction: f64,
    /// Keeps only the first `classes` foreground classes of the generator.
    pub classes: Option<usize>,
    /// Room generator; the built-in indoor rooms when absent.
    pub generator: Option<GeneratorConfig>,
    pub blocking: BlockingConfig,
    pub embedding: EmbeddingSpec,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            seed: 0,
            scenes: 40,
            test_fraction: 0.25,
            classes: None,
            generator: None,
            blocking: BlockingConfig { num_points: 256, ..BlockingConfig::default() },
            embedding: EmbeddingSpec::default(),
        }
    }
}

impl DataSpec {
    pub fn generator(&self) -> protoseg_core::Result<GeneratorConfig> {
        let base = self.generator.clone().unwrap_or_else(|| GeneratorConfig {
            points_per_scene: 20_000,
            ..GeneratorConfig::indoor()
        });
        match self.classes {
            Some(n) => base.with_classes(n),
            None => Ok(base),
        }
    }

    pub fn test_scenes(&self) -> usize {
        ((self.scenes as f64 * self.test_fraction).round() as usize).clamp(1, self.scenes.saturating_sub(1).max(1))
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.scenes < 2 {
            out.push(format!("scenes must be at least 2 (one train, one test), got {}", self.scenes));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            out.push(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if let Some(n) = self.classes {
            if n < 2 {
                out.push(format!("classes must be at least 2, got {n}"));
            }
        }
        match self.generator() {
            Ok(g) => {
                if let Err(e) = g.validate() {
                    out.push(e.to_string());
                }
            }
            Err(e) => out.push(e.to_string()),
        }
        let b = &self.blocking;
        if !(b.block_size > 0.0) || !(b.stride > 0.0) {
            out.push("blocking.block_size and blocking.stride must be positive".into());
        }
        if b.num_points == 0 {
            out.push("blocking.num_points must be at least 1".into());
        }
        if self.embedding.dim == 0 {
            out.push("embedding.dim must be at least 1".into());
        }
        if !(self.embedding.noise >= 0.0) {
            out.push(format!("embedding.noise must be nonnegative, got {}", self.embedding.noise));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub file: String,
    pub scene: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldEntry {
    pub fold: usize,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// Label names; index 0 is the background.
    pub classes: Vec<String>,
    pub folds: Vec<FoldEntry>,
    pub embeddings: String,
    pub spec: DataSpec,
    #[serde(rename = "block")]
    pub blocks: Vec<BlockEntry>,
}

/// A loaded dataset with train and test pools.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub table: ClassTable,
    pub train: Vec<PointCloudBlock>,
    pub test: Vec<PointCloudBlock>,
    pub train_files: Vec<String>,
    pub test_files: Vec<String>,
}

impl Dataset {
    pub fn split(&self, fold: usize) -> Result<FoldSplit> {
        Ok(make_fold_split(&self.table, fold)?)
    }

    pub fn pool(&self, split: Split) -> (&[PointCloudBlock], &[String]) {
        match split {
            Split::Train => (&self.train, &self.train_files),
            Split::Test => (&self.test, &self.test_files),
        }
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.root.join(&self.manifest.embeddings)
    }

    /// In-memory dataset; nothing is read from or written to `root`.
    pub fn from_generated(root: &Path, generated: &Generated) -> Result<Self> {
        let table = ClassTable::from_names(generated.manifest.classes.clone())?;
        let mut ds = Dataset {
            root: root.to_path_buf(),
            manifest: generated.manifest.clone(),
            table,
            train: Vec::new(),
            test: Vec::new(),
            train_files: Vec::new(),
            test_files: Vec::new(),
        };
        for (entry, block) in generated.manifest.blocks.iter().zip(&generated.blocks) {
            ds.push(entry, block.clone());
        }
        Ok(ds)
    }

    fn push(&mut self, entry: &BlockEntry, block: PointCloudBlock) {
        let (pool, files) = match entry.split {
            Split::Train => (&mut self.train, &mut self.train_files),
            Split::Test => (&mut self.test, &mut self.test_files),
        };
        pool.push(block);
        files.push(entry.file.clone());
    }
}

/// Blocks of a generated dataset, before anything is written.
pub struct Generated {
    pub manifest: DatasetManifest,
    pub blocks: Vec<PointCloudBlock>,
    pub embeddings: SemanticEmbeddingTable,
}

pub fn generate(spec: &DataSpec) -> Result<Generated> {
    spec.validate()?;
    let gen = spec.generator()?;
    let sourced = generate_blocks(&gen, &spec.blocking, spec.scenes, spec.seed)?;
    let first_test = (spec.scenes - spec.test_scenes()) as u32;
    let mut counters: BTreeMap<u32, usize> = BTreeMap::new();
    let mut entries = Vec::with_capacity(sourced.len());
    let mut blocks = Vec::with_capacity(sourced.len());
    for sb in sourced {
        let idx = counters.entry(sb.scene).or_default();
        entries.push(BlockEntry {
            file: format!("{BLOCK_DIR}/s{:04}_b{:04}.pb3d", sb.scene, idx),
            scene: sb.scene,
            split: if sb.scene >= first_test { Split::Test } else { Split::Train },
        });
        *idx += 1;
        blocks.push(sb.block);
    }
    let table = gen.class_table();
    let folds = (0..2)
        .map(|fold| {
            let s = make_fold_split(&table, fold)?;
            Ok(FoldEntry { fold, seen: s.seen, unseen: s.unseen })
        })
        .collect::<protoseg_core::Result<Vec<_>>>()?;
    let embeddings = synthetic_embeddings(&gen, spec.embedding.dim, spec.embedding.noise, spec.seed)?;
    Ok(Generated {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            classes: table.names().to_vec(),
            folds,
            embeddings: EMBEDDING_DIR.into(),
            spec: spec.clone(),
            blocks: entries,
        },
        blocks,
        embeddings,
    })
}

pub fn write(root: &Path, generated: &Generated) -> Result<()> {
    let block_dir = root.join(BLOCK_DIR);
    std::fs::create_dir_all(&block_dir).map_err(|e| CliError::io(&block_dir, e))?;
    for (entry, block) in generated.manifest.blocks.iter().zip(&generated.blocks) {
        pb3d::write_block(&root.join(&entry.file), block)?;
    }
    write_embeddings(&root.join(&generated.manifest.embeddings), &generated.embeddings)?;
    io::write_toml(&root.join(MANIFEST_FILE), &generated.manifest)
}

/// Reads `root/dataset.toml` and every block it lists.
pub fn load(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST_FILE);
    let manifest: DatasetManifest = io::read_toml(&path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CliError::format(&path, format!("unsupported manifest version {}", manifest.version)));
    }
    let table = ClassTable::from_names(manifest.classes.clone())?;
    for f in &manifest.folds {
        let s = make_fold_split(&table, f.fold)?;
        if s.seen != f.seen || s.unseen != f.unseen {
            return Err(CliError::format(&path, format!("fold {} assignment disagrees with the class table", f.fold)));
        }
    }
    let mut ds = Dataset {
        root: root.to_path_buf(),
        manifest,
        table,
        train: Vec::new(),
        test: Vec::new(),
        train_files: Vec::new(),
        test_files: Vec::new(),
    };
    for entry in ds.manifest.blocks.clone() {
        if entry.file.split('/').any(|c| c == "..") || Path::new(&entry.file).is_absolute() {
            return Err(CliError::format(&path, format!("block path `{}` leaves the dataset", entry.file)));
        }
        let block = pb3d::read_block(&root.join(&entry.file))?;
        block.validate(&ds.table)?;
        ds.push(&entry, block);
    }
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(CliError::format(&path, "dataset needs both train and test blocks"));
    }
    Ok(ds)
}

/// One tensor per class in the index, background first, then sorted names.
pub fn write_embeddings(dir: &Path, table: &SemanticEmbeddingTable) -> Result<()> {
    let mut names: Vec<&str> = table.names().collect();
    names.sort_by_key(|n| (*n != protoseg_core::projection::BACKGROUND, *n));
    let mut out = TensorDir::default();
    out.meta.insert("kind".into(), "class_embeddings".into());
    out.meta.insert("encoder".into(), table.encoder.clone());
    for n in names {
        let v = table.get(n)?.to_vec();
        out.tensors.push((n.to_string(), Tensor::row(&v)));
    }
    out.write(dir)
}

pub fn read_embeddings(dir: &Path) -> Result<SemanticEmbeddingTable> {
    let d = TensorDir::read(dir)?;
    if d.meta.get("kind").map(String::as_str) != Some("class_embeddings") {
        return Err(CliError::format(dir, "not a class embedding directory"));
    }
    let mut table = SemanticEmbeddingTable::new(d.meta.get("encoder").cloned().unwrap_or_default());
    for (name, t) in d.tensors {
        table.insert(name, t.into_data()).map_err(|e| CliError::format(dir, e.to_string()))?;
    }
    Ok(table)
}
