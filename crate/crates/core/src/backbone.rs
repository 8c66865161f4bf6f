//! Shared-weight EdgeConv feature extractor.
//!
//! Each stage applies one affine map to the edge feature
//! `concat(x_i, x_j - x_i)`, a leaky ReLU, and a max over the k nearest
//! neighbors of every point. The neighbor graph is computed once from the
//! block's XYZ coordinates and shared by all stages.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{PointCloudBlock, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, Adam, AdamConfig, ParamStore, TapeParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct BackboneConfig {
    pub knn_k: usize,
    pub stage_dims: Vec<usize>,
    pub output_dim: usize,
    pub use_multiscale: bool,
    pub slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            knn_k: 20,
            stage_dims: alloc::vec![32, 64, 128],
            output_dim: 128,
            use_multiscale: true,
            slope: 0.2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(Error::config("knn_k must be at least 1"));
        }
        if self.stage_dims.is_empty() || self.stage_dims.contains(&0) || self.output_dim == 0 {
            return Err(Error::config("backbone widths must be positive and nonempty"));
        }
        if !self.use_multiscale && self.stage_dims.last() != Some(&self.output_dim) {
            return Err(Error::config(format!(
                "without multi-scale fusion the last stage width ({:?}) must equal output_dim ({})",
                self.stage_dims.last(),
                self.output_dim
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::config("leaky slope must lie in (0,1)"));
        }
        Ok(())
    }

    fn stage_inputs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        core::iter::once(FEATURE_DIM)
            .chain(self.stage_dims.iter().copied())
            .zip(self.stage_dims.iter().copied())
    }
}

/// Per-point deep features of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub block_id: Option<usize>,
}

fn stage_weight(i: usize) -> String {
    format!("{PREFIX}stage{i}.weight")
}

fn stage_bias(i: usize) -> String {
    format!("{PREFIX}stage{i}.bias")
}

const FUSE_WEIGHT: &str = "backbone.fuse.weight";
const FUSE_BIAS: &str = "backbone.fuse.bias";

pub fn init_backbone<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (i, (c_in, c_out)) in cfg.stage_inputs().enumerate() {
        store.insert(stage_weight(i), kaiming_uniform(2 * c_in, c_out, rng));
        store.insert(stage_bias(i), Tensor::zeros(&[1, c_out]));
    }
    if cfg.use_multiscale {
        let total: usize = cfg.stage_dims.iter().sum();
        store.insert(FUSE_WEIGHT, kaiming_uniform(total, cfg.output_dim, rng));
        store.insert(FUSE_BIAS, Tensor::zeros(&[1, cfg.output_dim]));
    }
    Ok(store)
}

/// Checks that `store` holds exactly the backbone tensors `cfg` describes.
pub fn check_weights(cfg: &BackboneConfig, store: &ParamStore) -> Result<()> {
    cfg.validate()?;
    let expect = |name: &str, shape: &[usize]| -> Result<()> {
        let t = store.get(name)?;
        if t.shape() != shape {
            return Err(Error::config(format!(
                "parameter `{name}` has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
        Ok(())
    };
    let mut expected = 0;
    for (i, (c_in, c_out)) in cfg.stage_inputs().enumerate() {
        expect(&stage_weight(i), &[2 * c_in, c_out])?;
        expect(&stage_bias(i), &[1, c_out])?;
        expected += 2;
    }
    if cfg.use_multiscale {
        expect(FUSE_WEIGHT, &[cfg.stage_dims.iter().sum(), cfg.output_dim])?;
        expect(FUSE_BIAS, &[1, cfg.output_dim])?;
        expected += 2;
    }
    let present = store.with_prefix(PREFIX).count();
    if present != expected {
        return Err(Error::config(format!(
            "checkpoint has {present} backbone tensors, config expects {expected}"
        )));
    }
    Ok(())
}

/// `k` nearest neighbors of every point (self excluded), ordered by
/// distance with ties broken by lower index. Row-major N×k.
pub fn knn_graph(points: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || n <= k {
        return Err(Error::config(format!("knn needs N > k, got N={n}, k={k}")));
    }
    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, p) in points.iter().enumerate() {
        cand.clear();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let d = (p[0] - q[0]) * (p[0] - q[0])
                    + (p[1] - q[1]) * (p[1] - q[1])
                    + (p[2] - q[2]) * (p[2] - q[2]);
                cand.push((d, j));
            }
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        cand[..k].sort_unstable_by(cmp);
        out.extend(cand[..k].iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// One EdgeConv stage on the tape. `weight` is `2·c_in × c_out`, `bias` is
/// `1 × c_out`.
///
/// With `weight = [top; bottom]`, the edge response
/// `x_i·top + (x_j − x_i)·bottom + b` splits into a center term
/// `x_i·(top − bottom) + b` and a neighbor term `x_j·bottom`. The leaky ReLU
/// is monotone, so max-aggregation commutes with it and with the center term.
pub fn edgeconv_stage_on(
    tape: &mut Tape,
    x: Var,
    neighbors: &[usize],
    k: usize,
    weight: Var,
    bias: Var,
    slope: f64,
) -> Result<Var> {
    let c_in = tape.shape(x).get(1).copied().unwrap_or(0);
    let w_shape = tape.shape(weight).to_vec();
    if w_shape.len() != 2 || w_shape[0] != 2 * c_in || tape.shape(bias) != [1, w_shape[1]] {
        return Err(Error::shape("edgeconv_stage", tape.shape(x), &w_shape));
    }
    let n = tape.shape(x)[0];
    if neighbors.len() != n * k {
        return Err(Error::shape("edgeconv_stage", &[n, k], &[neighbors.len()]));
    }
    let top_idx: Vec<usize> = (0..c_in).collect();
    let bottom_idx: Vec<usize> = (c_in..2 * c_in).collect();
    let top = tape.gather_rows(weight, &top_idx)?;
    let bottom = tape.gather_rows(weight, &bottom_idx)?;
    let center_w = tape.sub(top, bottom)?;
    let center = tape.matmul(x, center_w)?;
    let nb = tape.matmul(x, bottom)?;
    let nb_max = tape.neighbor_max(nb, neighbors, k)?;
    let z = tape.add(center, nb_max)?;
    let z = tape.add_row(z, bias)?;
    tape.leaky_relu(z, slope)
}

/// Value-level EdgeConv stage.
pub fn edgeconv_stage(
    features: &Tensor,
    neighbors: &[usize],
    k: usize,
    weight: &Tensor,
    bias: &Tensor,
    slope: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let out = edgeconv_stage_on(&mut tape, x, neighbors, k, w, b, slope)?;
    Ok(tape.value(out).clone())
}

/// Runs the backbone on the tape. `input` is the N×9 feature matrix and
/// `neighbors` its kNN table.
pub fn forward(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &TapeParams,
    input: Var,
    neighbors: &[usize],
) -> Result<Var> {
    let mut x = input;
    let mut outputs = Vec::with_capacity(cfg.stage_dims.len());
    for i in 0..cfg.stage_dims.len() {
        let w = params.var(&stage_weight(i))?;
        let b = params.var(&stage_bias(i))?;
        x = edgeconv_stage_on(tape, x, neighbors, cfg.knn_k, w, b, cfg.slope)?;
        outputs.push(x);
    }
    if !cfg.use_multiscale {
        return Ok(x);
    }
    let cat = tape.concat_cols(&outputs)?;
    let fused = tape.matmul(cat, params.var(FUSE_WEIGHT)?)?;
    tape.add_row(fused, params.var(FUSE_BIAS)?)
}

/// Puts a block on the tape and returns its feature variable.
pub fn block_features(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &TapeParams,
    block: &PointCloudBlock,
) -> Result<Var> {
    let neighbors = knn_graph(&block.xyz(), cfg.knn_k)?;
    let input = tape.constant(block.features());
    forward(tape, cfg, params, input, &neighbors)
}

pub fn extract_features(
    block: &PointCloudBlock,
    cfg: &BackboneConfig,
    weights: &ParamStore,
) -> Result<FeatureMap> {
    check_weights(cfg, weights)?;
    let mut tape = Tape::new();
    let params = TapeParams::register(&mut tape, weights, &[]);
    let out = block_features(&mut tape, cfg, &params, block)?;
    Ok(FeatureMap {
        values: tape.value(out).clone(),
        block_id: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PretrainSchedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            epochs: 100,
            lr: 0.001,
            batch_size: 32,
            seed: 0,
        }
    }
}

pub const CLASSIFIER_WEIGHT: &str = "pretrain.classifier.weight";
pub const CLASSIFIER_BIAS: &str = "pretrain.classifier.bias";

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: ParamStore,
    /// The temporary per-point classifier; not part of the few-shot model.
    pub classifier: ParamStore,
    /// Mean loss of each epoch, plus the loss at step 0 first.
    pub losses: Vec<f64>,
}

/// Pretraining target: seen class `seen[i]` → `i + 1`, everything else → 0.
pub fn pretrain_labels(block: &PointCloudBlock, seen: &[usize]) -> Vec<usize> {
    block
        .labels
        .iter()
        .map(|l| seen.iter().position(|s| s == l).map_or(0, |p| p + 1))
        .collect()
}

fn classifier_loss(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &TapeParams,
    block: &PointCloudBlock,
    seen: &[usize],
) -> Result<Var> {
    let feats = block_features(tape, cfg, params, block)?;
    let logits = tape.matmul(feats, params.var(CLASSIFIER_WEIGHT)?)?;
    let logits = tape.add_row(logits, params.var(CLASSIFIER_BIAS)?)?;
    let logp = tape.log_softmax_rows(logits)?;
    let targets = pretrain_labels(block, seen);
    let onehot = one_hot(&targets, seen.len() + 1)?;
    let onehot = tape.constant(onehot);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / targets.len() as f64)
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                max: classes - 1,
            });
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// Trains the backbone with a temporary linear per-point classifier over
/// the seen classes (plus "other") using cross-entropy and Adam.
pub fn pretrain_backbone(
    blocks: &[PointCloudBlock],
    seen: &[usize],
    cfg: &BackboneConfig,
    schedule: &PretrainSchedule,
    init: ParamStore,
) -> Result<PretrainOutcome> {
    if blocks.is_empty() {
        return Err(Error::Empty("pretraining set"));
    }
    if schedule.batch_size == 0 || !(schedule.lr > 0.0) {
        return Err(Error::config("pretraining needs batch_size >= 1 and lr > 0"));
    }
    check_weights(cfg, &init)?;
    let mut rng = crate::derive_rng(schedule.seed, 0x5052_4554);
    let mut store = init;
    store.insert(CLASSIFIER_WEIGHT, kaiming_uniform(cfg.output_dim, seen.len() + 1, &mut rng));
    store.insert(CLASSIFIER_BIAS, Tensor::zeros(&[1, seen.len() + 1]));

    let mut adam = Adam::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(schedule.epochs + 1);
    losses.push(mean_classifier_loss(blocks, seen, cfg, &store)?);
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    for _ in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let mut tape = Tape::new();
            let params = TapeParams::register(&mut tape, &store, &[PREFIX, "pretrain."]);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                terms.push(classifier_loss(&mut tape, cfg, &params, &blocks[i], seen)?);
            }
            let stacked = tape.concat_rows(&terms)?;
            let loss = tape.mean(stacked)?;
            epoch_loss += tape.value(loss).to_scalar() * batch.len() as f64;
            tape.backward(loss)?;
            let grads = params.grads(&tape, "");
            adam.step(&mut store, &grads, |_| schedule.lr)?;
        }
        losses.push(epoch_loss / blocks.len() as f64);
    }
    let classifier: ParamStore = store
        .with_prefix("pretrain.")
        .map(|(k, v)| (String::from(k), v.clone()))
        .collect();
    store.remove(CLASSIFIER_WEIGHT);
    store.remove(CLASSIFIER_BIAS);
    Ok(PretrainOutcome {
        backbone: store,
        classifier,
        losses,
    })
}

fn mean_classifier_loss(
    blocks: &[PointCloudBlock],
    seen: &[usize],
    cfg: &BackboneConfig,
    store: &ParamStore,
) -> Result<f64> {
    let mut total = 0.0;
    for b in blocks {
        let mut tape = Tape::new();
        let params = TapeParams::register(&mut tape, store, &[]);
        let l = classifier_loss(&mut tape, cfg, &params, b, seen)?;
        total += tape.value(l).to_scalar();
    }
    Ok(total / blocks.len() as f64)
}

/// Fraction of points whose pretraining target is predicted correctly.
pub fn point_accuracy(
    blocks: &[PointCloudBlock],
    seen: &[usize],
    cfg: &BackboneConfig,
    backbone: &ParamStore,
    classifier: &ParamStore,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let w = classifier.get(CLASSIFIER_WEIGHT)?;
    let b = classifier.get(CLASSIFIER_BIAS)?;
    for block in blocks {
        let feats = extract_features(block, cfg, backbone)?;
        let logits = feats.values.matmul(w)?;
        let targets = pretrain_labels(block, seen);
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row_slice(i);
            let pred = argmax(row.iter().zip(b.data()).map(|(x, y)| x + y));
            correct += usize::from(pred == t);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
