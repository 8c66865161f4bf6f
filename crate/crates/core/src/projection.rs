//! Semantic projection: class-name embeddings mapped to visual prototypes
//! and trained against adapted prototypes with a multi-bandwidth MMD.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::ClassTable;
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, uniform, ParamStore, TapeParams};
use crate::prototype::{PrototypeSet, Provenance};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

pub const PREFIX: &str = "projection.";
pub const BLOCK_WEIGHT: &str = "projection.block.weight";
pub const BLOCK_BIAS: &str = "projection.block.bias";
pub const HEAD_WEIGHT: &str = "projection.head.weight";
pub const HEAD_BIAS: &str = "projection.head.bias";

pub const BACKGROUND: &str = "background";
pub const DEFAULT_BANDWIDTHS: [f64; 6] = [2.0, 5.0, 10.0, 20.0, 40.0, 60.0];

/// Class name to embedding vector. Every vector has the same width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticEmbeddingTable {
    entries: BTreeMap<String, Vec<f64>>,
    dim: usize,
    /// Free-text note on where the vectors came from.
    pub encoder: String,
}

impl SemanticEmbeddingTable {
    pub fn new(encoder: impl Into<String>) -> Self {
        SemanticEmbeddingTable {
            entries: BTreeMap::new(),
            dim: 0,
            encoder: encoder.into(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("embedding vectors must be nonempty and finite"));
        }
        if self.dim != 0 && vector.len() != self.dim {
            return Err(Error::shape("embedding_insert", &[self.dim], &[vector.len()]));
        }
        self.dim = vector.len();
        self.entries.insert(name.into(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingClass(name.to_string()))
    }

    /// Checks that the background and every class of `table` are present.
    pub fn validate_for(&self, table: &ClassTable) -> Result<()> {
        self.get(BACKGROUND)?;
        for name in table.names() {
            self.get(name)?;
        }
        Ok(())
    }

    /// Rows for the background followed by `classes`, (C+1) × d_e.
    pub fn episode_matrix(&self, classes: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity((classes.len() + 1) * self.dim);
        data.extend_from_slice(self.get(BACKGROUND)?);
        for c in classes {
            data.extend_from_slice(self.get(c)?);
        }
        Tensor::matrix(classes.len() + 1, self.dim, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProjectionConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub slope: f64,
    pub dropout: f64,
}

impl ProjectionConfig {
    /// Hidden width twice the prototype width.
    pub fn new(embed_dim: usize, out_dim: usize) -> Self {
        ProjectionConfig {
            embed_dim,
            hidden: 2 * out_dim,
            out_dim,
            slope: 0.2,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.out_dim == 0 {
            return Err(Error::config("projection sizes must be positive"));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::config("projection slope must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("projection dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn init_projection(cfg: &ProjectionConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    store.insert(BLOCK_WEIGHT, kaiming_uniform(cfg.embed_dim, cfg.hidden, rng));
    store.insert(BLOCK_BIAS, uniform(&[1, cfg.hidden], 0.01, rng));
    store.insert(HEAD_WEIGHT, kaiming_uniform(cfg.hidden, cfg.out_dim, rng));
    store.insert(HEAD_BIAS, Tensor::zeros(&[1, cfg.out_dim]));
    Ok(store)
}

/// Checks that the stored weights match `cfg`.
pub fn check_weights(cfg: &ProjectionConfig, store: &ParamStore) -> Result<()> {
    cfg.validate()?;
    let expect = [
        (BLOCK_WEIGHT, [cfg.embed_dim, cfg.hidden]),
        (BLOCK_BIAS, [1, cfg.hidden]),
        (HEAD_WEIGHT, [cfg.hidden, cfg.out_dim]),
        (HEAD_BIAS, [1, cfg.out_dim]),
    ];
    for (name, shape) in expect {
        let t = store.get(name)?;
        if t.shape() != shape {
            return Err(Error::config(alloc::format!(
                "parameter `{name}` has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Projection forward on the tape. Dropout is applied only when `rng` is given.
pub fn project_on(
    tape: &mut Tape,
    embeds: Var,
    params: &TapeParams,
    cfg: &ProjectionConfig,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let h = tape.matmul(embeds, params.var(BLOCK_WEIGHT)?)?;
    let h = tape.add_row(h, params.var(BLOCK_BIAS)?)?;
    let h = tape.leaky_relu(h, cfg.slope)?;
    let h = match rng {
        Some(rng) => tape.dropout(h, cfg.dropout, rng, true)?,
        None => h,
    };
    let out = tape.matmul(h, params.var(HEAD_WEIGHT)?)?;
    tape.add_row(out, params.var(HEAD_BIAS)?)
}

/// Projected prototypes for the background and `classes`.
pub fn project(
    table: &SemanticEmbeddingTable,
    classes: &[&str],
    weights: &ParamStore,
    cfg: &ProjectionConfig,
    rng: Option<&mut Rng>,
) -> Result<PrototypeSet> {
    check_weights(cfg, weights)?;
    if table.dim() != cfg.embed_dim {
        return Err(Error::shape("project", &[table.dim()], &[cfg.embed_dim]));
    }
    let embeds = table.episode_matrix(classes)?;
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, weights, &[]);
    let e = tape.constant(embeds);
    let out = project_on(&mut tape, e, &params, cfg, rng)?;
    PrototypeSet::new(tape.value(out).clone(), Provenance::Projected)
}

/// Prototypes for inference without any support data.
pub fn zero_shot_prototypes(
    classes: &[&str],
    table: &SemanticEmbeddingTable,
    weights: &ParamStore,
    cfg: &ProjectionConfig,
) -> Result<PrototypeSet> {
    project(table, classes, weights, cfg, None)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct MmdConfig {
    pub bandwidths: Vec<f64>,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::config("mmd needs at least one bandwidth"));
        }
        if let Some(s) = self.bandwidths.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(alloc::format!("mmd bandwidth must be positive, got {s}")));
        }
        Ok(())
    }
}

fn kernel_sum(tape: &mut Tape, a: Var, b: Var, sigma: f64) -> Result<Var> {
    let d = tape.pairwise_sq_dist(a, b)?;
    let scaled = tape.scale(d, -1.0 / (2.0 * sigma * sigma))?;
    let k = tape.exp(scaled)?;
    tape.sum(k)
}

/// Biased multi-bandwidth MMD between two equally sized sets of rows, summing
/// Gaussian kernels over all ordered pairs including self pairs.
pub fn mmd_on(tape: &mut Tape, x: Var, y: Var, cfg: &MmdConfig) -> Result<Var> {
    cfg.validate()?;
    let (xs, ys) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if xs != ys {
        return Err(Error::shape("mmd", &xs, &ys));
    }
    let mut total: Option<Var> = None;
    for &sigma in &cfg.bandwidths {
        let kxx = kernel_sum(tape, x, x, sigma)?;
        let kyy = kernel_sum(tape, y, y, sigma)?;
        let kxy = kernel_sum(tape, x, y, sigma)?;
        let kxy = tape.scale(kxy, 2.0)?;
        let same = tape.add(kxx, kyy)?;
        let term = tape.sub(same, kxy)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("bandwidths validated nonempty"))
}

pub fn mmd(x: &Tensor, y: &Tensor, cfg: &MmdConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let loss = mmd_on(&mut tape, a, b, cfg)?;
    Ok(tape.value(loss).to_scalar())
}

/// MMD between target (adapted) prototypes and projected prototypes.
pub fn mmd_loss(target: &PrototypeSet, projected: &PrototypeSet, cfg: &MmdConfig) -> Result<f64> {
    if projected.provenance != Provenance::Projected {
        return Err(Error::Contract("mmd_loss expects projected prototypes".into()));
    }
    mmd(&target.vectors, &projected.vectors, cfg)
}
