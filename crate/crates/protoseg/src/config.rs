//! Run configuration shared by the pretrain, train and eval commands.

use protoseg_core::backbone::{BackboneConfig, PretrainSchedule};
use protoseg_core::episode::EpisodeConfig;
use protoseg_core::prototype::DEFAULT_ALPHA;
use protoseg_core::qgpa::DEFAULT_HIDDEN;
use protoseg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{CliError, Result};
use crate::io;

/// Desk-scale defaults: 256-point blocks, a three-stage backbone of width 32
/// and 2000 episodes of training. The reference schedule (2048-point blocks,
/// width 192, 100 pretraining epochs, 40k iterations with the rates halved
/// every 5k) fits the same fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; pretraining, initialization, sampling and training derive
    /// their streams from it.
    pub seed: u64,
    pub fold: usize,
    pub alpha: f64,
    /// Reduced point count N′ inside the adaption module.
    pub qgpa_hidden: usize,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainSchedule,
    pub train: TrainConfig,
    /// Episode shape for both training and evaluation.
    pub episode: EpisodeConfig,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            fold: 0,
            alpha: DEFAULT_ALPHA,
            qgpa_hidden: DEFAULT_HIDDEN,
            backbone: BackboneConfig {
                knn_k: 10,
                stage_dims: vec![16, 32, 32],
                output_dim: 32,
                use_multiscale: true,
                slope: 0.2,
            },
            pretrain: PretrainSchedule { epochs: 10, lr: 0.001, batch_size: 16, seed: 0 },
            train: TrainConfig::default(),
            episode: EpisodeConfig { ways: 2, shots: 1, queries: 1, min_class_points: 22 },
            eval_episodes: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_toml(path)
    }

    /// Every problem found across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.fold > 1 {
            out.push(format!("fold must be 0 or 1, got {}", self.fold));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.qgpa_hidden == 0 {
            out.push("qgpa_hidden must be at least 1".into());
        }
        if let Err(e) = self.backbone.validate() {
            out.push(format!("backbone: {e}"));
        }
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 {
            out.push("pretrain.epochs and pretrain.batch_size must be at least 1".into());
        }
        if !(p.lr > 0.0 && p.lr.is_finite()) {
            out.push(format!("pretrain.lr must be positive, got {}", p.lr));
        }
        out.extend(self.train.problems().into_iter().map(|m| format!("train: {m}")));
        if self.train.max_iterations == 0 {
            out.push("train.max_iterations must be at least 1".into());
        }
        if let Err(e) = self.episode.validate() {
            out.push(format!("episode: {e}"));
        }
        if self.eval_episodes == 0 {
            out.push("eval_episodes must be at least 1".into());
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        assert!(cfg.problems().is_empty());
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 4\n[train]\nmax_iterations = 7\n[train.flags]\nqgpa = false\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.max_iterations, 7);
        assert!(!cfg.train.flags.qgpa && cfg.train.flags.sr);
        assert_eq!(cfg.backbone, RunConfig::default().backbone);
        assert!(toml::from_str::<RunConfig>("sede = 4\n").is_err());
    }

    #[test]
    fn every_problem_is_listed() {
        let mut cfg = RunConfig { fold: 3, alpha: -1.0, ..RunConfig::default() };
        cfg.train.lr_new = 0.0;
        cfg.train.decay_every = 0;
        cfg.eval_episodes = 0;
        let problems = cfg.problems();
        assert_eq!(problems.len(), 5, "{problems:?}");
        assert!(problems.iter().any(|p| p.contains("lr_new")));
        assert!(problems.iter().any(|p| p.contains("decay_every")));
    }
}
