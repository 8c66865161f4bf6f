//! Pretraining, episodic training and evaluation on a loaded dataset.

use std::num::NonZeroUsize;

use protoseg_core::backbone::{init_backbone, pretrain_backbone, PretrainOutcome, PretrainSchedule};
use protoseg_core::episode::{build_test_episodes, sample_training_episode, Episode};
use protoseg_core::params::ParamStore;
use protoseg_core::projection::ProjectionConfig;
use protoseg_core::train::{
    episode_confusion, model_config, Confusion, EvalMode, EvalReport, Model, ModuleFlags, SemanticContext, StepRecord,
    Trainer,
};
use protoseg_core::derive_rng;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{CliError, Result};

const INIT_STREAM: u64 = 0x100;
const MODEL_STREAM: u64 = 0x200;
const TRAIN_EPISODE_STREAM: u64 = 0x300;
const TEST_EPISODE_STREAM: u64 = 0x400;

pub fn pretrain(data: &Dataset, cfg: &RunConfig) -> Result<PretrainOutcome> {
    let split = data.split(cfg.fold)?;
    let init = init_backbone(&cfg.backbone, &mut derive_rng(cfg.seed, INIT_STREAM))?;
    let schedule = PretrainSchedule { seed: cfg.seed, ..cfg.pretrain.clone() };
    Ok(pretrain_backbone(&data.train, &split.seen, &cfg.backbone, &schedule, init)?)
}

/// Points per block, which the adaption module is sized for.
pub fn block_points(data: &Dataset) -> Result<usize> {
    let n = data.train[0].len();
    if let Some(b) = data.train.iter().chain(&data.test).find(|b| b.len() != n) {
        return Err(CliError::invalid(format!("blocks hold {n} and {} points; resample to one size", b.len())));
    }
    Ok(n)
}

/// A fresh model around pretrained backbone weights. `embed_dim` is needed
/// when the projection is enabled.
pub fn build_model(
    data: &Dataset,
    cfg: &RunConfig,
    flags: ModuleFlags,
    backbone: ParamStore,
    embed_dim: Option<usize>,
) -> Result<Model> {
    let n = block_points(data)?;
    let mut mc = model_config(cfg.backbone.clone(), flags.qgpa.then_some((n, cfg.qgpa_hidden.min(n))));
    mc.alpha = cfg.alpha;
    if flags.projection {
        let e = embed_dim.ok_or_else(|| CliError::invalid("the projection needs class embeddings (--embeddings)"))?;
        mc.projection = Some(ProjectionConfig::new(e, cfg.backbone.output_dim));
    }
    Ok(Model::new(mc, backbone, &mut derive_rng(cfg.seed, MODEL_STREAM))?)
}

/// Runs `cfg.train.max_iterations` episodic steps and hands each record to
/// `on_step`.
pub fn train(
    data: &Dataset,
    cfg: &RunConfig,
    model: Model,
    semantic: Option<SemanticContext>,
    mut on_step: impl FnMut(&StepRecord, &Episode) -> Result<()>,
) -> Result<Model> {
    let split = data.split(cfg.fold)?;
    let train_cfg = protoseg_core::train::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let mut trainer = Trainer::new(model, train_cfg, semantic)?;
    let mut rng = derive_rng(cfg.seed, TRAIN_EPISODE_STREAM);
    for _ in 0..cfg.train.max_iterations {
        let episode = sample_training_episode(&data.train, &split, &cfg.episode, &mut rng)?;
        let record = trainer.step(&episode)?;
        on_step(&record, &episode)?;
    }
    Ok(trainer.model)
}

/// The fixed test episodes of a run: unseen-class combinations in
/// lexicographic order, cycled until `cfg.eval_episodes` are built.
pub fn test_episodes(data: &Dataset, cfg: &RunConfig) -> Result<Vec<Episode>> {
    let split = data.split(cfg.fold)?;
    Ok(build_test_episodes(
        &data.test,
        &split,
        &cfg.episode,
        cfg.eval_episodes,
        &mut derive_rng(cfg.seed, TEST_EPISODE_STREAM),
    )?)
}

/// Per-episode confusion counts, computed on up to `threads` threads. The
/// output order and values do not depend on the thread count.
pub fn episode_confusions(
    model: &Model,
    episodes: &[Episode],
    mode: EvalMode,
    semantic: Option<&SemanticContext>,
    threads: NonZeroUsize,
) -> Result<Vec<Confusion>> {
    let threads = threads.get().min(episodes.len().max(1));
    if threads == 1 {
        return episodes.iter().map(|e| Ok(episode_confusion(model, e, mode, semantic)?)).collect();
    }
    let chunk = episodes.len().div_ceil(threads);
    let parts: Vec<protoseg_core::Result<Vec<Confusion>>> = std::thread::scope(|s| {
        let handles: Vec<_> = episodes
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || part.iter().map(|e| episode_confusion(model, e, mode, semantic)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(episodes.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn report(
    data: &Dataset,
    confusions: &[Confusion],
    classes: &[usize],
    mode: EvalMode,
) -> Result<EvalReport> {
    let mut total = Confusion::default();
    for c in confusions {
        total.merge(c);
    }
    Ok(EvalReport::from_confusion(&total, classes, Some(&data.table), mode, confusions.len())?)
}

/// Evaluates on the unseen classes of the run's fold.
pub fn evaluate(
    data: &Dataset,
    cfg: &RunConfig,
    model: &Model,
    episodes: &[Episode],
    mode: EvalMode,
    semantic: Option<&SemanticContext>,
    threads: NonZeroUsize,
) -> Result<(EvalReport, Vec<Confusion>)> {
    let split = data.split(cfg.fold)?;
    let conf = episode_confusions(model, episodes, mode, semantic, threads)?;
    Ok((report(data, &conf, &split.unseen, mode)?, conf))
}
