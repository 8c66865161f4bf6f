//! JSON-lines metrics log, one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use protoseg_core::train::{ModuleFlags, StepRecord};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// First line of every log.
    Run { command: String, seed: u64, fold: usize, flags: ModuleFlags },
    /// Epoch 0 holds the loss before the first update.
    PretrainEpoch { epoch: usize, loss: f64, seed: u64 },
    Step {
        iteration: usize,
        loss_seg: f64,
        loss_sr: Option<f64>,
        loss_align: Option<f64>,
        loss_total: f64,
        loss_mmd: Option<f64>,
        lr_new: f64,
        lr_backbone: f64,
        lr_projection: f64,
        classes: Vec<usize>,
        seed: u64,
    },
    Episode { index: usize, mode: String, classes: Vec<usize>, counts: Vec<ClassCounts>, seed: u64 },
    Eval { mode: String, mean_iou: f64, episodes: usize, per_class: Vec<(usize, f64)>, seed: u64 },
}

impl Record {
    pub fn step(r: &StepRecord, seed: u64) -> Self {
        Record::Step {
            iteration: r.iteration,
            loss_seg: r.loss_seg,
            loss_sr: r.loss_sr,
            loss_align: r.loss_align,
            loss_total: r.loss_total,
            loss_mmd: r.loss_mmd,
            lr_new: r.lr.new,
            lr_backbone: r.lr.backbone,
            lr_projection: r.lr.projection,
            classes: r.classes.clone(),
            seed,
        }
    }
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| CliError::format(&self.path, e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Parses every line; the first malformed one fails with its line number.
pub fn read_log(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
