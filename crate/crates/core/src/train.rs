//! Episodic training with two optimizers and accumulated-IoU evaluation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{self, argmax, BackboneConfig};
use crate::data::{augment, AugmentationConfig, ClassTable, PointCloudBlock};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParamStore, TapeParams};
use crate::projection::{self, MmdConfig, ProjectionConfig, SemanticEmbeddingTable};
use crate::prototype::{
    align_loss_on, logits_on, masked_average_pool_on, segmentation_loss_on, ProtoVars, DEFAULT_ALPHA,
};
use crate::qgpa::{self, QgpaConfig, QgpaVars, QgpaWeights};
use crate::self_recon::{self_reconstruct_on, total_loss_on};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{derive_rng, Rng};

pub const DEFAULT_MAX_ITERATIONS: usize = 2000;

const AUGMENT_STREAM: u64 = 0x61;
const PROJECTION_STREAM: u64 = 0x70;
const SHUFFLE_STREAM: u64 = 0x73;

/// Architecture of a model. Absent optional parts are disabled.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub qgpa: Option<QgpaConfig>,
    pub projection: Option<ProjectionConfig>,
    pub alpha: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(alloc::format!("alpha must be positive, got {}", self.alpha)));
        }
        if let Some(q) = &self.qgpa {
            q.validate()?;
            if q.dim != self.backbone.output_dim {
                return Err(Error::config(alloc::format!(
                    "qgpa width {} differs from backbone output {}",
                    q.dim,
                    self.backbone.output_dim
                )));
            }
        }
        if let Some(p) = &self.projection {
            p.validate()?;
            if p.out_dim != self.backbone.output_dim {
                return Err(Error::config(alloc::format!(
                    "projection output {} differs from backbone output {}",
                    p.out_dim,
                    self.backbone.output_dim
                )));
            }
        }
        Ok(())
    }
}

/// All learnable parameters, keyed `backbone.*`, `qgpa.*` and `projection.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Builds a model around (pretrained) backbone weights, initializing the
    /// remaining parts from `rng`.
    pub fn new(config: ModelConfig, backbone_weights: ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        backbone::check_weights(&config.backbone, &backbone_weights)?;
        let mut params = ParamStore::new();
        for (name, t) in backbone_weights.with_prefix(backbone::PREFIX) {
            params.insert(name, t.clone());
        }
        if let Some(q) = &config.qgpa {
            QgpaWeights::init(q, rng)?.insert_into(&mut params);
        }
        if let Some(p) = &config.projection {
            params.merge(projection::init_projection(p, rng)?);
        }
        Ok(Model { config, params })
    }

    /// Checks that `params` holds exactly the parameters `config` describes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        backbone::check_weights(&config.backbone, &params)?;
        let mut expected = params.with_prefix(backbone::PREFIX).count();
        if let Some(q) = &config.qgpa {
            let w = QgpaWeights::from_store(&params)?;
            if w.config()? != *q {
                return Err(Error::config("qgpa weights do not match the model config"));
            }
            expected += 4;
        }
        if let Some(p) = &config.projection {
            projection::check_weights(p, &params)?;
            expected += 4;
        }
        if params.len() != expected {
            return Err(Error::config(alloc::format!(
                "checkpoint holds {} parameters, model config expects {expected}",
                params.len()
            )));
        }
        Ok(Model { config, params })
    }

    pub fn backbone_weights(&self) -> ParamStore {
        self.params
            .with_prefix(backbone::PREFIX)
            .map(|(k, v)| (String::from(k), v.clone()))
            .collect()
    }

    pub fn uses_qgpa(&self) -> bool {
        self.config.qgpa.is_some()
    }

    pub fn uses_projection(&self) -> bool {
        self.config.projection.is_some()
    }
}

/// Class names and their semantic embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticContext {
    pub table: SemanticEmbeddingTable,
    pub classes: ClassTable,
}

impl SemanticContext {
    pub fn new(table: SemanticEmbeddingTable, classes: ClassTable) -> Result<Self> {
        table.validate_for(&classes)?;
        Ok(SemanticContext { table, classes })
    }

    /// Names of the episode classes in episode order.
    pub fn episode_names(&self, class_map: &[usize]) -> Result<Vec<&str>> {
        class_map
            .iter()
            .map(|&c| {
                self.classes
                    .name(c)
                    .ok_or(Error::LabelOutOfRange { label: c, max: self.classes.len() - 1 })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModuleFlags {
    pub qgpa: bool,
    pub sr: bool,
    pub align: bool,
    pub projection: bool,
    pub augment: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        ModuleFlags {
            qgpa: true,
            sr: true,
            align: false,
            projection: false,
            augment: true,
        }
    }
}

impl ModuleFlags {
    /// Plain prototype network: every optional part switched off.
    pub fn baseline() -> Self {
        ModuleFlags {
            qgpa: false,
            sr: false,
            align: false,
            projection: false,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub lr_new: f64,
    pub lr_backbone: f64,
    pub lr_projection: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub flags: ModuleFlags,
    pub augmentation: AugmentationConfig,
    pub mmd: MmdConfig,
    /// Let the projection loss reach the segmentation parameters. Off keeps
    /// the two optimizers fully independent.
    pub projection_to_backbone: bool,
    /// Redraw the point order of every block each time it is used.
    pub shuffle_points: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_new: 0.001,
            lr_backbone: 0.0001,
            lr_projection: 0.0002,
            decay_factor: 0.5,
            decay_every: 5000,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            seed: 0,
            flags: ModuleFlags::default(),
            augmentation: AugmentationConfig::default(),
            mmd: MmdConfig::default(),
            projection_to_backbone: false,
            shuffle_points: true,
        }
    }
}

impl TrainConfig {
    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lr_new", self.lr_new),
            ("lr_backbone", self.lr_backbone),
            ("lr_projection", self.lr_projection),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(alloc::format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            out.push(alloc::format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            out.push("decay_every must be at least 1".into());
        }
        if let Err(e) = self.augmentation.validate() {
            out.push(alloc::format!("{e}"));
        }
        if let Err(e) = self.mmd.validate() {
            out.push(alloc::format!("{e}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            Some(p) => Err(Error::Config(p)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LearningRates {
    pub new: f64,
    pub backbone: f64,
    pub projection: f64,
}

/// Step decay of the segmentation rates; the projection rate stays constant.
pub fn lr_schedule(iteration: usize, cfg: &TrainConfig) -> LearningRates {
    let factor = libm::pow(cfg.decay_factor, (iteration / cfg.decay_every.max(1)) as f64);
    LearningRates {
        new: cfg.lr_new * factor,
        backbone: cfg.lr_backbone * factor,
        projection: cfg.lr_projection,
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub iteration: usize,
    pub loss_seg: f64,
    pub loss_sr: Option<f64>,
    pub loss_align: Option<f64>,
    pub loss_total: f64,
    pub loss_mmd: Option<f64>,
    pub lr: LearningRates,
    pub classes: Vec<usize>,
}

/// Blocks of one episode with their features on a tape.
struct EpisodeVars {
    support: Vec<Vec<Var>>,
    masks: Vec<Vec<Vec<bool>>>,
    queries: Vec<Var>,
    labels: Vec<Vec<usize>>,
}

fn check_block_size(model: &Model, block: &PointCloudBlock) -> Result<()> {
    if let Some(q) = &model.config.qgpa {
        if block.len() != q.points {
            return Err(Error::config(alloc::format!(
                "qgpa is built for {} points per block, got {}",
                q.points,
                block.len()
            )));
        }
    }
    Ok(())
}

fn episode_vars(
    tape: &mut Tape,
    model: &Model,
    params: &TapeParams,
    episode: &Episode,
    mut aug: Option<(&AugmentationConfig, &mut Rng)>,
) -> Result<EpisodeVars> {
    let mut features = |tape: &mut Tape, block: &PointCloudBlock| -> Result<Var> {
        check_block_size(model, block)?;
        match aug.as_mut() {
            Some((cfg, rng)) => {
                let b = augment(block, cfg, *rng)?;
                backbone::block_features(tape, &model.config.backbone, params, &b)
            }
            None => backbone::block_features(tape, &model.config.backbone, params, block),
        }
    };
    let mut support = Vec::with_capacity(episode.ways());
    let mut masks = Vec::with_capacity(episode.ways());
    for shots in &episode.support {
        let mut fs = Vec::with_capacity(shots.len());
        for s in shots {
            fs.push(features(tape, &s.block)?);
        }
        support.push(fs);
        masks.push(shots.iter().map(|s| s.mask.clone()).collect());
    }
    let mut queries = Vec::with_capacity(episode.queries.len());
    for q in &episode.queries {
        queries.push(features(tape, &q.block)?);
    }
    Ok(EpisodeVars {
        support,
        masks,
        queries,
        labels: episode.queries.iter().map(|q| q.mask.clone()).collect(),
    })
}

fn prototypes_for_query(
    tape: &mut Tape,
    protos: ProtoVars,
    ev: &EpisodeVars,
    query: Var,
    qvars: Option<&QgpaVars>,
) -> Result<ProtoVars> {
    match qvars {
        Some(w) => qgpa::adapt_all_on(tape, protos, &ev.support, query, w),
        None => Ok(protos),
    }
}

fn mean_var(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.concat_rows(terms)?;
    tape.mean(stacked)
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub semantic: Option<SemanticContext>,
    pub iteration: usize,
    seg_opt: Adam,
    proj_opt: Adam,
    aug_rng: Rng,
    proj_rng: Rng,
    shuffle_rng: Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, semantic: Option<SemanticContext>) -> Result<Self> {
        config.validate()?;
        if config.flags.qgpa != model.uses_qgpa() {
            return Err(Error::config("qgpa flag disagrees with the model"));
        }
        if config.flags.projection {
            if !model.uses_projection() {
                return Err(Error::config("projection enabled but the model has no projection network"));
            }
            let sem = semantic
                .as_ref()
                .ok_or_else(|| Error::config("projection training needs semantic embeddings"))?;
            let p = model.config.projection.as_ref().expect("checked above");
            if sem.table.dim() != p.embed_dim {
                return Err(Error::shape("trainer", &[sem.table.dim()], &[p.embed_dim]));
            }
        }
        Ok(Trainer {
            aug_rng: derive_rng(config.seed, AUGMENT_STREAM),
            proj_rng: derive_rng(config.seed, PROJECTION_STREAM),
            shuffle_rng: derive_rng(config.seed, SHUFFLE_STREAM),
            model,
            config,
            semantic,
            iteration: 0,
            seg_opt: Adam::new(AdamConfig::default()),
            proj_opt: Adam::new(AdamConfig::default()),
        })
    }

    pub fn segmentation_optimizer(&self) -> &Adam {
        &self.seg_opt
    }

    pub fn projection_optimizer(&self) -> &Adam {
        &self.proj_opt
    }

    /// One optimization step on `episode`.
    pub fn step(&mut self, episode: &Episode) -> Result<StepRecord> {
        let flags = self.config.flags;
        let alpha = self.model.config.alpha;
        let lr = lr_schedule(self.iteration, &self.config);
        let joint = flags.projection && self.config.projection_to_backbone;

        let mut tape = Tape::new();
        let mut trainable = alloc::vec![backbone::PREFIX];
        if flags.qgpa {
            trainable.push(qgpa::PREFIX);
        }
        if joint {
            trainable.push(projection::PREFIX);
        }
        let params = TapeParams::register(&mut tape, &self.model.params, &trainable);
        let qvars = if flags.qgpa {
            Some(QgpaVars::from_params(&params)?)
        } else {
            None
        };
        let aug = flags
            .augment
            .then_some((&self.config.augmentation, &mut self.aug_rng));
        let shuffled;
        let episode = if self.config.shuffle_points {
            shuffled = shuffle_episode(episode, &mut self.shuffle_rng);
            &shuffled
        } else {
            episode
        };
        let ev = episode_vars(&mut tape, &self.model, &params, episode, aug)?;
        let protos = masked_average_pool_on(&mut tape, &ev.support, &ev.masks)?;

        let mut seg_terms = Vec::with_capacity(ev.queries.len());
        let mut align_terms = Vec::new();
        let mut targets = Vec::with_capacity(ev.queries.len());
        for (&q, labels) in ev.queries.iter().zip(&ev.labels) {
            let p = prototypes_for_query(&mut tape, protos, &ev, q, qvars.as_ref())?;
            targets.push(p.var);
            seg_terms.push(segmentation_loss_on(&mut tape, q, p.var, labels, alpha)?);
            if flags.align {
                let logits = logits_on(&mut tape, q, p.var, alpha)?;
                let pred = row_argmax(tape.value(logits));
                align_terms.push(align_loss_on(&mut tape, q, &pred, &ev.support, &ev.masks, alpha)?);
            }
        }
        let seg = mean_var(&mut tape, &seg_terms)?;
        let sr = if flags.sr {
            Some(self_reconstruct_on(&mut tape, &ev.support, &ev.masks, protos, alpha)?)
        } else {
            None
        };
        let align = if flags.align {
            Some(mean_var(&mut tape, &align_terms)?)
        } else {
            None
        };
        let mut total = total_loss_on(&mut tape, seg, sr, align)?;

        let mut loss_mmd = None;
        if joint {
            let m = self.projection_loss_on(&mut tape, &params, episode, &targets)?;
            loss_mmd = Some(tape.value(m).to_scalar());
            total = tape.add(total, m)?;
        }
        let detached: Vec<Tensor> = targets.iter().map(|&t| tape.value(t).clone()).collect();
        let record_seg = tape.value(seg).to_scalar();
        let record_sr = sr.map(|v| tape.value(v).to_scalar());
        let record_align = align.map(|v| tape.value(v).to_scalar());
        let record_total = tape.value(total).to_scalar();

        tape.backward(total)?;
        let mut grads = params.grads(&tape, backbone::PREFIX);
        if flags.qgpa {
            grads.extend(params.grads(&tape, qgpa::PREFIX));
        }
        let proj_grads = if joint {
            params.grads(&tape, projection::PREFIX)
        } else {
            BTreeMap::new()
        };
        drop(tape);

        self.seg_opt.step(&mut self.model.params, &grads, |name| {
            if name.starts_with(backbone::PREFIX) {
                lr.backbone
            } else {
                lr.new
            }
        })?;
        if joint {
            self.proj_opt.step(&mut self.model.params, &proj_grads, |_| lr.projection)?;
        } else if flags.projection {
            loss_mmd = Some(self.projection_step(episode, &detached, lr.projection)?);
        }
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration - 1,
            loss_seg: record_seg,
            loss_sr: record_sr,
            loss_align: record_align,
            loss_total: record_total,
            loss_mmd,
            lr,
            classes: episode.class_map.clone(),
        })
    }

    fn projection_loss_on(
        &mut self,
        tape: &mut Tape,
        params: &TapeParams,
        episode: &Episode,
        targets: &[Var],
    ) -> Result<Var> {
        let sem = self.semantic.as_ref().expect("validated in new");
        let cfg = self.model.config.projection.as_ref().expect("validated in new");
        let names = sem.episode_names(&episode.class_map)?;
        let embeds = tape.constant(sem.table.episode_matrix(&names)?);
        let projected = projection::project_on(tape, embeds, params, cfg, Some(&mut self.proj_rng))?;
        let mut terms = Vec::with_capacity(targets.len());
        for &t in targets {
            terms.push(projection::mmd_on(tape, t, projected, &self.config.mmd)?);
        }
        mean_var(tape, &terms)
    }

    /// Updates only the projection network against constant targets.
    fn projection_step(&mut self, episode: &Episode, targets: &[Tensor], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, &self.model.params, &[projection::PREFIX]);
        let vars: Vec<Var> = targets.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = self.projection_loss_on(&mut tape, &params, episode, &vars)?;
        let value = tape.value(loss).to_scalar();
        tape.backward(loss)?;
        let grads = params.grads(&tape, projection::PREFIX);
        self.proj_opt.step(&mut self.model.params, &grads, |_| lr)?;
        Ok(value)
    }
}

fn permute<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| items[i].clone()).collect()
}

/// Copy of `episode` with the points of every block in a fresh random
/// order; masks follow their points.
pub fn shuffle_episode(episode: &Episode, rng: &mut Rng) -> Episode {
    use rand::seq::SliceRandom;
    let mut out = episode.clone();
    let mut reorder = |block: &mut PointCloudBlock| -> Vec<usize> {
        let mut perm: Vec<usize> = (0..block.len()).collect();
        perm.shuffle(rng);
        block.points = permute(&block.points, &perm);
        block.labels = permute(&block.labels, &perm);
        perm
    };
    for shot in out.support.iter_mut().flatten() {
        let perm = reorder(&mut shot.block);
        shot.mask = permute(&shot.mask, &perm);
    }
    for q in &mut out.queries {
        let perm = reorder(&mut q.block);
        q.mask = permute(&q.mask, &perm);
    }
    out
}

fn row_argmax(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| argmax(t.row_slice(i).iter().copied()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EvalMode {
    /// Prototypes from the support set (adapted to each query when enabled).
    Visual,
    /// Prototypes projected from class-name embeddings; supports are ignored.
    ZeroShot,
}

/// Episode-label predictions for every query of `episode`.
pub fn predict_episode(
    model: &Model,
    episode: &Episode,
    mode: EvalMode,
    semantic: Option<&SemanticContext>,
) -> Result<Vec<Vec<usize>>> {
    let alpha = model.config.alpha;
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, &model.params, &[]);
    match mode {
        EvalMode::Visual => {
            let ev = episode_vars(&mut tape, model, &params, episode, None)?;
            let protos = masked_average_pool_on(&mut tape, &ev.support, &ev.masks)?;
            let qvars = if model.uses_qgpa() {
                Some(QgpaVars::from_params(&params)?)
            } else {
                None
            };
            let mut out = Vec::with_capacity(ev.queries.len());
            for &q in &ev.queries {
                let p = prototypes_for_query(&mut tape, protos, &ev, q, qvars.as_ref())?;
                let logits = logits_on(&mut tape, q, p.var, alpha)?;
                out.push(row_argmax(tape.value(logits)));
            }
            Ok(out)
        }
        EvalMode::ZeroShot => {
            let sem = semantic.ok_or_else(|| Error::config("zero-shot evaluation needs semantic embeddings"))?;
            let cfg = model
                .config
                .projection
                .as_ref()
                .ok_or_else(|| Error::config("zero-shot evaluation needs a projection network"))?;
            let names = sem.episode_names(&episode.class_map)?;
            let protos = projection::zero_shot_prototypes(&names, &sem.table, &model.params, cfg)?;
            let pv = tape.constant(protos.vectors);
            let mut out = Vec::with_capacity(episode.queries.len());
            for q in &episode.queries {
                check_block_size(model, &q.block)?;
                let f = backbone::block_features(&mut tape, &model.config.backbone, &params, &q.block)?;
                let logits = logits_on(&mut tape, f, pv, alpha)?;
                out.push(row_argmax(tape.value(logits)));
            }
            Ok(out)
        }
    }
}

/// True positive, false positive and false negative point counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

/// Per global class counts accumulated over episodes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub counts: BTreeMap<usize, Counts>,
}

impl Confusion {
    /// Adds one query. `pred` and `gt` hold episode labels; label `c ≥ 1`
    /// stands for global class `class_map[c - 1]`, 0 for background.
    pub fn accumulate(&mut self, class_map: &[usize], pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
        }
        let ways = class_map.len();
        if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l > ways) {
            return Err(Error::LabelOutOfRange { label: bad, max: ways });
        }
        for (c, &global) in class_map.iter().enumerate() {
            let label = c + 1;
            let e = self.counts.entry(global).or_default();
            for (&p, &g) in pred.iter().zip(gt) {
                match (p == label, g == label) {
                    (true, true) => e.tp += 1,
                    (true, false) => e.fp += 1,
                    (false, true) => e.fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (&k, v) in &other.counts {
            let e = self.counts.entry(k).or_default();
            e.tp += v.tp;
            e.fp += v.fp;
            e.fn_ += v.fn_;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassIou {
    pub class: usize,
    pub name: Option<String>,
    pub counts: Counts,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub mode: EvalMode,
    pub per_class: Vec<ClassIou>,
    pub mean_iou: f64,
    pub episodes: usize,
    /// Requested classes that never occurred in any episode.
    pub absent: Vec<usize>,
}

impl EvalReport {
    /// Builds the report over `classes`. Absent classes are listed and left
    /// out of the mean.
    pub fn from_confusion(
        confusion: &Confusion,
        classes: &[usize],
        names: Option<&ClassTable>,
        mode: EvalMode,
        episodes: usize,
    ) -> Result<Self> {
        let mut per_class = Vec::new();
        let mut absent = Vec::new();
        for &c in classes {
            match confusion.counts.get(&c).and_then(|k| k.iou().map(|iou| (*k, iou))) {
                Some((counts, iou)) => per_class.push(ClassIou {
                    class: c,
                    name: names.and_then(|t| t.name(c)).map(String::from),
                    counts,
                    iou,
                }),
                None => absent.push(c),
            }
        }
        if per_class.is_empty() {
            return Err(Error::Degenerate("no evaluated class occurred in any episode".into()));
        }
        let mean_iou = per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64;
        Ok(EvalReport {
            mode,
            per_class,
            mean_iou,
            episodes,
            absent,
        })
    }
}

/// Confusion counts for one episode.
pub fn episode_confusion(
    model: &Model,
    episode: &Episode,
    mode: EvalMode,
    semantic: Option<&SemanticContext>,
) -> Result<Confusion> {
    let preds = predict_episode(model, episode, mode, semantic)?;
    let mut conf = Confusion::default();
    for (pred, q) in preds.iter().zip(&episode.queries) {
        conf.accumulate(&episode.class_map, pred, &q.mask)?;
    }
    Ok(conf)
}

/// Accumulated IoU over all `episodes`, averaged over `classes`.
pub fn evaluate(
    model: &Model,
    episodes: &[Episode],
    classes: &[usize],
    mode: EvalMode,
    semantic: Option<&SemanticContext>,
) -> Result<EvalReport> {
    let mut total = Confusion::default();
    for ep in episodes {
        total.merge(&episode_confusion(model, ep, mode, semantic)?);
    }
    EvalReport::from_confusion(&total, classes, semantic.map(|s| &s.classes), mode, episodes.len())
}

/// Default model layout for a given backbone.
pub fn model_config(backbone: BackboneConfig, qgpa_hidden: Option<(usize, usize)>) -> ModelConfig {
    let dim = backbone.output_dim;
    ModelConfig {
        qgpa: qgpa_hidden.map(|(points, hidden)| QgpaConfig { points, hidden, dim }),
        backbone,
        projection: None,
        alpha: DEFAULT_ALPHA,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_backbone;
    use crate::data::FEATURE_DIM;
    use crate::episode::{sample_episode_for, EpisodeConfig};
    use crate::params::uniform;
    use alloc::vec;
    use rand::Rng as _;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            knn_k: 4,
            stage_dims: vec![8, 8],
            output_dim: 8,
            use_multiscale: true,
            slope: 0.2,
        }
    }

    /// Blocks where each class is a spatial cluster with its own color.
    fn pool(n_blocks: usize, points: usize, seed: u64) -> Vec<PointCloudBlock> {
        let mut rng = derive_rng(seed, 0);
        (0..n_blocks)
            .map(|b| {
                let mut pts = Vec::with_capacity(points);
                let mut labels = Vec::with_capacity(points);
                for i in 0..points {
                    let label = [0, 1 + b % 3, 1 + (b + 1) % 3][i % 3];
                    let center = label as f64 * 0.3;
                    let mut p = [0.0; FEATURE_DIM];
                    for (j, v) in p.iter_mut().enumerate().take(3) {
                        *v = center + 0.05 * rng.random_range(-1.0..1.0) + 0.01 * j as f64;
                    }
                    p[3 + label % 3] = 1.0;
                    p[6] = p[0];
                    p[7] = p[1];
                    p[8] = p[2];
                    pts.push(p);
                    labels.push(label);
                }
                PointCloudBlock::new(pts, labels).unwrap()
            })
            .collect()
    }

    fn episode(pool: &[PointCloudBlock], classes: &[usize], seed: u64) -> Episode {
        let cfg = EpisodeConfig { ways: classes.len(), shots: 1, queries: 1, min_class_points: 3 };
        sample_episode_for(pool, classes, &cfg, &mut derive_rng(seed, 4)).unwrap()
    }

    fn model(flags: ModuleFlags, points: usize, seed: u64) -> Model {
        let bb = tiny_backbone();
        let weights = init_backbone(&bb, &mut derive_rng(seed, 1)).unwrap();
        let mut cfg = model_config(bb, flags.qgpa.then_some((points, 6)));
        if flags.projection {
            cfg.projection = Some(ProjectionConfig { dropout: 0.0, ..ProjectionConfig::new(4, 8) });
        }
        Model::new(cfg, weights, &mut derive_rng(seed, 2)).unwrap()
    }

    fn semantic(seed: u64) -> SemanticContext {
        let classes = ClassTable::new(["a", "b", "c"]);
        let mut table = SemanticEmbeddingTable::new("test");
        let mut rng = derive_rng(seed, 8);
        for name in ["background", "a", "b", "c"] {
            table.insert(name, uniform(&[4], 1.0, &mut rng).into_data()).unwrap();
        }
        SemanticContext::new(table, classes).unwrap()
    }

    fn cfg(flags: ModuleFlags) -> TrainConfig {
        TrainConfig {
            flags,
            lr_new: 0.01,
            lr_backbone: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), LearningRates { new: 0.001, backbone: 0.0001, projection: 0.0002 });
        let half = lr_schedule(5000, &c);
        assert_eq!(half.new, 0.0005);
        assert_eq!(half.backbone, 0.00005);
        assert_eq!(half.projection, 0.0002);
        let quarter = lr_schedule(12_500, &c);
        assert_eq!(quarter.new, 0.001 * 0.25);
        assert_eq!(lr_schedule(4999, &c).new, 0.001);
    }

    #[test]
    fn config_problems_are_exhaustive() {
        let c = TrainConfig {
            lr_new: 0.0,
            lr_backbone: -1.0,
            decay_every: 0,
            ..TrainConfig::default()
        };
        assert_eq!(c.problems().len(), 3);
        assert!(TrainConfig::default().problems().is_empty());
    }

    #[test]
    fn iou_from_counts() {
        let c = Counts { tp: 3, fp: 0, fn_: 1 };
        assert_eq!(c.iou(), Some(0.75));
        assert_eq!(Counts::default().iou(), None);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let mut conf = Confusion::default();
        let gt = [0, 1, 2, 2, 1, 0];
        conf.accumulate(&[4, 7], &gt, &gt).unwrap();
        let r = EvalReport::from_confusion(&conf, &[4, 7], None, EvalMode::Visual, 1).unwrap();
        assert!(r.per_class.iter().all(|c| c.iou == 1.0));
        assert_eq!(r.mean_iou, 1.0);
    }

    #[test]
    fn confusion_matches_brute_force() {
        let mut rng = derive_rng(3, 3);
        let mut conf = Confusion::default();
        let mut oracle: BTreeMap<usize, [u64; 3]> = BTreeMap::new();
        let mut episodes = Vec::new();
        for _ in 0..30 {
            let mut classes: Vec<usize> = (1..7).collect();
            rand::seq::SliceRandom::shuffle(classes.as_mut_slice(), &mut rng);
            classes.truncate(2);
            let pred: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
            let gt: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
            conf.accumulate(&classes, &pred, &gt).unwrap();
            // full confusion matrix over global labels
            let to_global = |l: usize| if l == 0 { 0 } else { classes[l - 1] };
            let mut matrix = [[0u64; 7]; 7];
            for (&p, &g) in pred.iter().zip(&gt) {
                matrix[to_global(g)][to_global(p)] += 1;
            }
            for &c in &classes {
                let e = oracle.entry(c).or_default();
                e[0] += matrix[c][c];
                e[1] += (0..7).filter(|&g| g != c).map(|g| matrix[g][c]).sum::<u64>();
                e[2] += (0..7).filter(|&p| p != c).map(|p| matrix[c][p]).sum::<u64>();
            }
            episodes.push((classes, pred, gt));
        }
        for (c, [tp, fp, fn_]) in &oracle {
            assert_eq!(conf.counts[c], Counts { tp: *tp, fp: *fp, fn_: *fn_ });
        }
        // order independence
        let mut reversed = Confusion::default();
        for (classes, pred, gt) in episodes.iter().rev() {
            reversed.accumulate(classes, pred, gt).unwrap();
        }
        assert_eq!(reversed, conf);
        let all: Vec<usize> = (1..7).collect();
        let a = EvalReport::from_confusion(&conf, &all, None, EvalMode::Visual, 30).unwrap();
        let b = EvalReport::from_confusion(&reversed, &all, None, EvalMode::Visual, 30).unwrap();
        assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_reported() {
        let mut conf = Confusion::default();
        conf.accumulate(&[2], &[1, 0], &[1, 1]).unwrap();
        let r = EvalReport::from_confusion(&conf, &[2, 5], None, EvalMode::Visual, 1).unwrap();
        assert_eq!(r.absent, vec![5]);
        assert_eq!(r.mean_iou, 0.5);
    }

    #[test]
    fn loss_decreases_on_repeated_episode() {
        let pool = pool(6, 24, 1);
        let ep = episode(&pool, &[1, 2], 0);
        let mut t = Trainer::new(model(ModuleFlags::default(), 24, 1), cfg(ModuleFlags { augment: false, ..ModuleFlags::default() }), None).unwrap();
        let first = t.step(&ep).unwrap();
        let mut last = first.clone();
        for _ in 0..49 {
            last = t.step(&ep).unwrap();
        }
        assert!(last.loss_total < first.loss_total, "{} -> {}", first.loss_total, last.loss_total);
        assert!(first.loss_sr.is_some());
        assert_eq!(last.iteration, 49);
    }

    #[test]
    fn baseline_step_has_no_extra_terms() {
        let pool = pool(6, 24, 2);
        let ep = episode(&pool, &[1, 3], 1);
        let mut t = Trainer::new(model(ModuleFlags::baseline(), 24, 2), cfg(ModuleFlags::baseline()), None).unwrap();
        let r = t.step(&ep).unwrap();
        assert_eq!(r.loss_total, r.loss_seg);
        assert!(r.loss_sr.is_none() && r.loss_align.is_none() && r.loss_mmd.is_none());
        assert!(t.model.params.with_prefix(qgpa::PREFIX).next().is_none());
    }

    #[test]
    fn align_term_is_recorded() {
        let pool = pool(6, 24, 3);
        let ep = episode(&pool, &[2, 3], 2);
        let flags = ModuleFlags { align: true, ..ModuleFlags::baseline() };
        let mut t = Trainer::new(model(flags, 24, 3), cfg(flags), None).unwrap();
        let r = t.step(&ep).unwrap();
        let a = r.loss_align.unwrap();
        assert!((r.loss_total - (r.loss_seg + a)).abs() < 1e-12);
    }

    #[test]
    fn projection_flag_leaves_segmentation_untouched() {
        let pool = pool(6, 24, 4);
        let ep = episode(&pool, &[1, 2], 3);
        let with = ModuleFlags { projection: true, ..ModuleFlags::default() };
        let mut a = Trainer::new(model(with, 24, 4), cfg(with), Some(semantic(1))).unwrap();
        let mut b = Trainer::new(model(with, 24, 4), cfg(ModuleFlags { projection: false, ..with }), None).unwrap();
        let before = a.model.params.clone();
        for _ in 0..3 {
            let ra = a.step(&ep).unwrap();
            let rb = b.step(&ep).unwrap();
            assert!(ra.loss_mmd.is_some());
            assert_eq!(ra.loss_total, rb.loss_total);
        }
        for (name, t) in a.model.params.iter() {
            if name.starts_with(projection::PREFIX) {
                assert_ne!(t, before.get(name).unwrap());
                assert_eq!(b.model.params.get(name).unwrap(), before.get(name).unwrap());
            } else {
                assert_eq!(t, b.model.params.get(name).unwrap(), "{name}");
            }
        }
        assert!(a.projection_optimizer().state_names().iter().all(|n| n.starts_with(projection::PREFIX)));
        assert!(a.segmentation_optimizer().state_names().iter().all(|n| !n.starts_with(projection::PREFIX)));
    }

    #[test]
    fn self_reconstruction_adds_no_parameters() {
        let with = model(ModuleFlags::default(), 24, 5);
        let without = model(ModuleFlags { sr: false, ..ModuleFlags::default() }, 24, 5);
        let names = |m: &Model| m.params.names().map(String::from).collect::<Vec<_>>();
        assert_eq!(names(&with), names(&without));
    }

    #[test]
    fn sr_loss_ignores_qgpa_weights() {
        let pool = pool(6, 24, 6);
        let ep = episode(&pool, &[1, 2], 5);
        let flags = ModuleFlags { augment: false, ..ModuleFlags::default() };
        let m1 = model(flags, 24, 6);
        let mut m2 = m1.clone();
        let mut rng = derive_rng(99, 0);
        for name in [qgpa::W_Q, qgpa::W_K, qgpa::W_V, qgpa::W_P] {
            let shape = m2.params.get(name).unwrap().shape().to_vec();
            m2.params.insert(name, uniform(&shape, 1.0, &mut rng));
        }
        let r1 = Trainer::new(m1, cfg(flags), None).unwrap().step(&ep).unwrap();
        let r2 = Trainer::new(m2, cfg(flags), None).unwrap().step(&ep).unwrap();
        assert_eq!(r1.loss_sr, r2.loss_sr);
        assert_ne!(r1.loss_seg, r2.loss_seg);
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let pool = pool(9, 24, 7);
        let eps: Vec<Episode> = (0..4).map(|i| episode(&pool, &[1 + i % 3, 1 + (i + 1) % 3], i as u64)).collect();
        let m = model(ModuleFlags::default(), 24, 7);
        let a = evaluate(&m, &eps, &[1, 2, 3], EvalMode::Visual, None).unwrap();
        let b = evaluate(&m, &eps, &[1, 2, 3], EvalMode::Visual, None).unwrap();
        assert_eq!(a, b);
        assert!(a.per_class.iter().all(|c| (0.0..=1.0).contains(&c.iou)));
        assert_eq!(a.episodes, 4);
    }

    #[test]
    fn zero_shot_needs_embeddings() {
        let pool = pool(6, 24, 8);
        let ep = episode(&pool, &[1, 2], 1);
        let m = model(ModuleFlags { projection: true, ..ModuleFlags::default() }, 24, 8);
        assert!(matches!(
            predict_episode(&m, &ep, EvalMode::ZeroShot, None),
            Err(Error::Config(_))
        ));
        let sem = semantic(2);
        let preds = predict_episode(&m, &ep, EvalMode::ZeroShot, Some(&sem)).unwrap();
        assert_eq!(preds[0].len(), 24);
    }

    #[test]
    fn qgpa_point_count_is_enforced() {
        let pool = pool(6, 24, 9);
        let ep = episode(&pool, &[1, 2], 1);
        let m = model(ModuleFlags::default(), 30, 9);
        assert!(matches!(predict_episode(&m, &ep, EvalMode::Visual, None), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip_checks_layout() {
        let m = model(ModuleFlags::default(), 24, 10);
        let again = Model::from_parts(m.config.clone(), m.params.clone()).unwrap();
        assert_eq!(again, m);
        let mut extra = m.params.clone();
        extra.insert("stray", Tensor::scalar(1.0));
        assert!(Model::from_parts(m.config.clone(), extra).is_err());
    }
}
