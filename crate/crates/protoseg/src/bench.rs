//! Ablation benchmark on synthetic rooms: baseline, QGPA only, and QGPA with
//! self-reconstruction (trained alongside the projection, which does not
//! touch the segmentation weights), plus zero-shot evaluation of the latter.

use std::num::NonZeroUsize;
use std::path::Path;
use std::time::Instant;

use protoseg_core::train::{EvalMode, ModuleFlags, SemanticContext};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{self, DataSpec, Dataset};
use crate::error::Result;
use crate::pipeline;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    pub run: RunConfig,
    pub threads: usize,
}

impl Default for BenchConfig {
    /// 12 classes split 6/6, 40 rooms (30 train, 10 test), 100 test episodes
    /// and 1000 training episodes per variant. The projection rate is raised
    /// to suit the short schedule.
    fn default() -> Self {
        let mut run = RunConfig::default();
        run.train.max_iterations = 1000;
        run.train.lr_projection = 2e-3;
        run.train.flags = ModuleFlags::baseline();
        BenchConfig { seeds: vec![1, 2, 3], data: DataSpec::default(), run, threads: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: f64,
    pub qgpa: f64,
    pub full: f64,
    pub zero_shot: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub seeds: Vec<SeedResult>,
    pub baseline: f64,
    pub qgpa: f64,
    pub full: f64,
    pub zero_shot: f64,
}

impl BenchSummary {
    pub fn from_seeds(seeds: Vec<SeedResult>) -> Self {
        let n = seeds.len().max(1) as f64;
        let mean = |f: fn(&SeedResult) -> f64| seeds.iter().map(f).sum::<f64>() / n;
        BenchSummary {
            baseline: mean(|s| s.baseline),
            qgpa: mean(|s| s.qgpa),
            full: mean(|s| s.full),
            zero_shot: mean(|s| s.zero_shot),
            seeds,
        }
    }
}

pub fn run_seed(cfg: &BenchConfig, seed: u64, mut progress: impl FnMut(&str)) -> Result<SeedResult> {
    let start = Instant::now();
    let spec = DataSpec { seed, ..cfg.data.clone() };
    let generated = dataset::generate(&spec)?;
    let data = Dataset::from_generated(Path::new("."), &generated)?;
    let run = RunConfig { seed, ..cfg.run.clone() };
    run.validate()?;
    let threads = NonZeroUsize::new(cfg.threads).unwrap_or(NonZeroUsize::MIN);

    let pre = pipeline::pretrain(&data, &run)?;
    progress(&format!("seed {seed}: pretrained in {:.0?}", start.elapsed()));
    let episodes = pipeline::test_episodes(&data, &run)?;
    let semantic = SemanticContext::new(generated.embeddings.clone(), data.table.clone())?;
    let embed_dim = Some(generated.embeddings.dim());

    let base = run.train.flags;
    let variants = [
        ("baseline", ModuleFlags { qgpa: false, sr: false, projection: false, ..base }),
        ("qgpa", ModuleFlags { qgpa: true, sr: false, projection: false, ..base }),
        ("full", ModuleFlags { qgpa: true, sr: true, projection: true, ..base }),
    ];
    let mut scores = [0.0; 3];
    let mut zero_shot = 0.0;
    for (i, (name, flags)) in variants.into_iter().enumerate() {
        let mut rc = run.clone();
        rc.train.flags = flags;
        let model = pipeline::build_model(&data, &rc, flags, pre.backbone.clone(), embed_dim)?;
        let sem = flags.projection.then(|| semantic.clone());
        let model = pipeline::train(&data, &rc, model, sem, |_, _| Ok(()))?;
        let (visual, _) = pipeline::evaluate(&data, &rc, &model, &episodes, EvalMode::Visual, None, threads)?;
        scores[i] = visual.mean_iou;
        if flags.projection {
            let (zs, _) =
                pipeline::evaluate(&data, &rc, &model, &episodes, EvalMode::ZeroShot, Some(&semantic), threads)?;
            zero_shot = zs.mean_iou;
        }
        progress(&format!("seed {seed}: {name} {:.4} at {:.0?}", visual.mean_iou, start.elapsed()));
    }
    Ok(SeedResult {
        seed,
        baseline: scores[0],
        qgpa: scores[1],
        full: scores[2],
        zero_shot,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run(cfg: &BenchConfig, mut progress: impl FnMut(&str)) -> Result<BenchSummary> {
    let seeds = cfg.seeds.iter().map(|&s| run_seed(cfg, s, &mut progress)).collect::<Result<Vec<_>>>()?;
    Ok(BenchSummary::from_seeds(seeds))
}
