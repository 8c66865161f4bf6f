//! Point-cloud blocks: tiling scenes, point sampling and training-time augmentation.
//!
//! Every point carries nine features in a fixed order: block-local XYZ,
//! RGB in `[0,1]`, and XYZ normalized to the scene bounding box.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 9;
/// Points per block at full scale.
pub const DEFAULT_BLOCK_POINTS: usize = 2048;
pub const DEFAULT_MIN_BLOCK_POINTS: usize = 100;
pub const DEFAULT_BLOCK_SIZE: f64 = 1.0;
pub const DEFAULT_BLOCK_STRIDE: f64 = 1.0;

pub type Point = [f64; FEATURE_DIM];

/// Class names indexed by label. Label 0 is the background.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub const BACKGROUND: &'static str = "background";

    /// Builds a table with `background` at index 0 followed by `foreground`.
    pub fn new<S: Into<String>>(foreground: impl IntoIterator<Item = S>) -> Self {
        let mut names = vec![String::from(Self::BACKGROUND)];
        names.extend(foreground.into_iter().map(Into::into));
        ClassTable { names }
    }

    /// Table whose entries are taken verbatim, background included.
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.first().map(String::as_str) != Some(Self::BACKGROUND) {
            return Err(Error::config("class table must start with `background`"));
        }
        Ok(ClassTable { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.get(label).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Foreground labels, `1..len`.
    pub fn foreground(&self) -> core::ops::Range<usize> {
        1..self.names.len()
    }

    pub fn contains(&self, label: usize) -> bool {
        label < self.names.len()
    }
}

/// A fixed-size tile of a scene, the unit input sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudBlock {
    pub points: Vec<Point>,
    pub labels: Vec<usize>,
}

impl PointCloudBlock {
    pub fn new(points: Vec<Point>, labels: Vec<usize>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::shape("block", &[points.len()], &[labels.len()]));
        }
        Ok(PointCloudBlock { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// N×9 feature matrix.
    pub fn features(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::matrix(self.points.len(), FEATURE_DIM, data).expect("nonempty block")
    }

    pub fn xyz(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p[0], p[1], p[2]]).collect()
    }

    pub fn count_label(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Checks the value ranges of colors and normalized coordinates and that
    /// every label is declared in `table`.
    pub fn validate(&self, table: &ClassTable) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate(alloc::format!("point {i} is not finite")));
            }
            if p[3..].iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Degenerate(alloc::format!(
                    "point {i} has color or normalized coordinate outside [0,1]"
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| !table.contains(l)) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                max: table.len().saturating_sub(1),
            });
        }
        Ok(())
    }
}

/// Raw scene point: world XYZ followed by RGB.
pub type ScenePoint = [f64; 6];

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u32,
    pub points: Vec<ScenePoint>,
    pub labels: Vec<usize>,
    pub classes: ClassTable,
}

impl Scene {
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

fn tile_count(range: f64, size: f64, stride: f64) -> usize {
    if range <= size {
        1
    } else {
        libm::ceil((range - size) / stride) as usize + 1
    }
}

/// Tiles a scene along X and Y. A point belongs to tile `[s, s + size)`;
/// the last tile on each axis also keeps points on its far edge. With
/// `stride == block_size` the blocks partition the retained points.
/// Tiles with fewer than `min_points` points are dropped.
pub fn split_scene(
    scene: &Scene,
    block_size: f64,
    stride: f64,
    min_points: usize,
) -> Result<Vec<PointCloudBlock>> {
    if scene.points.is_empty() {
        return Err(Error::Empty("scene"));
    }
    if !(block_size > 0.0) || !(stride > 0.0) {
        return Err(Error::config("block size and stride must be positive"));
    }
    let (lo, hi) = scene.bounds();
    let range = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let nx = tile_count(range[0], block_size, stride);
    let ny = tile_count(range[1], block_size, stride);

    // The last tile's far edge lies at or beyond the scene maximum.
    let inside = |v: f64, start: f64, last: bool| v >= start && (last || v < start + block_size);

    let mut blocks = Vec::new();
    for ix in 0..nx {
        let sx = lo[0] + ix as f64 * stride;
        for iy in 0..ny {
            let sy = lo[1] + iy as f64 * stride;
            let mut points = Vec::new();
            let mut labels = Vec::new();
            for (p, &l) in scene.points.iter().zip(&scene.labels) {
                if !inside(p[0], sx, ix + 1 == nx) || !inside(p[1], sy, iy + 1 == ny) {
                    continue;
                }
                let norm = |a: usize| {
                    if range[a] > 0.0 {
                        ((p[a] - lo[a]) / range[a]).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                };
                points.push([
                    p[0] - sx,
                    p[1] - sy,
                    p[2] - lo[2],
                    p[3],
                    p[4],
                    p[5],
                    norm(0),
                    norm(1),
                    norm(2),
                ]);
                labels.push(l);
            }
            if !points.is_empty() && points.len() >= min_points {
                blocks.push(PointCloudBlock { points, labels });
            }
        }
    }
    Ok(blocks)
}

/// Draws exactly `n` points. Without replacement when the block is large
/// enough; otherwise every original point is kept once and the remainder is
/// drawn with replacement. The result is shuffled.
pub fn sample_block<R: Rng + ?Sized>(
    block: &PointCloudBlock,
    n: usize,
    rng: &mut R,
) -> Result<PointCloudBlock> {
    if n == 0 {
        return Err(Error::config("sample size must be positive"));
    }
    if block.is_empty() {
        return Err(Error::Empty("block"));
    }
    let len = block.len();
    let indices: Vec<usize> = if len >= n {
        index::sample(rng, len, n).into_vec()
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((0..n - len).map(|_| rng.random_range(0..len)));
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        idx
    };
    Ok(PointCloudBlock {
        points: indices.iter().map(|&i| block.points[i]).collect(),
        labels: indices.iter().map(|&i| block.labels[i]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AugmentationConfig {
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    /// Maximum absolute XY translation.
    pub shift_range: f64,
    /// Uniform scale bounds; `None` disables scaling.
    pub scale_range: Option<(f64, f64)>,
    pub rotate_z: bool,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            shift_range: 0.1,
            scale_range: Some((0.8, 1.2)),
            rotate_z: true,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No transformation at all.
    pub fn identity() -> Self {
        AugmentationConfig {
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            shift_range: 0.0,
            scale_range: None,
            rotate_z: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.jitter_sigma, self.jitter_clip, self.shift_range];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("jitter and shift magnitudes must be finite and >= 0"));
        }
        if let Some((lo, hi)) = self.scale_range {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::config(alloc::format!(
                    "scale range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Applies, in order: clipped Gaussian XYZ jitter, XY shift, uniform scale
/// and rotation about the z axis. Only block-local XYZ changes; colors,
/// normalized coordinates and labels are carried over.
pub fn augment<R: Rng + ?Sized>(
    block: &PointCloudBlock,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<PointCloudBlock> {
    cfg.validate()?;
    let mut out = block.clone();
    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::config(alloc::format!("{e}")))?;
        for p in &mut out.points {
            for v in p.iter_mut().take(3) {
                *v += normal.sample(rng).clamp(-cfg.jitter_clip, cfg.jitter_clip);
            }
        }
    }
    if cfg.shift_range > 0.0 {
        let dx = rng.random_range(-cfg.shift_range..=cfg.shift_range);
        let dy = rng.random_range(-cfg.shift_range..=cfg.shift_range);
        for p in &mut out.points {
            p[0] += dx;
            p[1] += dy;
        }
    }
    if let Some((lo, hi)) = cfg.scale_range {
        let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        scale_xyz(&mut out, s);
    }
    if cfg.rotate_z {
        let angle = rng.random_range(0.0..2.0 * PI);
        rotate_z(&mut out, angle);
    }
    Ok(out)
}

pub fn scale_xyz(block: &mut PointCloudBlock, factor: f64) {
    for p in &mut block.points {
        for v in p.iter_mut().take(3) {
            *v *= factor;
        }
    }
}

pub fn rotate_z(block: &mut PointCloudBlock, angle: f64) {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    for p in &mut block.points {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
}
