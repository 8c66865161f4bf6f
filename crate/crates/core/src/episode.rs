//! C-way K-shot episode construction over a pool of blocks.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{ClassTable, PointCloudBlock};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_CLASS_POINTS: usize = 100;
pub const DEFAULT_TEST_EPISODES: usize = 100;

/// Partition of the foreground classes into training and testing halves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Alternating assignment by class index: the foreground classes at even
/// positions form one half, odd positions the other. `fold` selects which
/// half is unseen.
pub fn make_fold_split(classes: &ClassTable, fold: usize) -> Result<FoldSplit> {
    let fg: Vec<usize> = classes.foreground().collect();
    if fg.len() < 2 {
        return Err(Error::config(alloc::format!(
            "fold split needs at least 2 foreground classes, got {}",
            fg.len()
        )));
    }
    if fold > 1 {
        return Err(Error::config(alloc::format!("fold index must be 0 or 1, got {fold}")));
    }
    let (even, odd): (Vec<_>, Vec<_>) = fg.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let even: Vec<usize> = even.into_iter().map(|(_, c)| *c).collect();
    let odd: Vec<usize> = odd.into_iter().map(|(_, c)| *c).collect();
    Ok(if fold == 0 {
        FoldSplit { seen: odd, unseen: even }
    } else {
        FoldSplit { seen: even, unseen: odd }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Points of its class a block needs to serve as support or query.
    pub min_class_points: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            ways: 2,
            shots: 1,
            queries: 1,
            min_class_points: DEFAULT_MIN_CLASS_POINTS,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.shots == 0 || self.queries == 0 {
            return Err(Error::config("ways, shots and queries must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportShot {
    pub block: PointCloudBlock,
    /// Index of the block in the pool it was drawn from.
    pub source: usize,
    /// Points of the shot's class.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryItem {
    pub block: PointCloudBlock,
    pub source: usize,
    /// Per-point episode label: 0 for background, `c` for `class_map[c - 1]`.
    pub mask: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `support[c][k]` is shot `k` of episode class `c + 1`.
    pub support: Vec<Vec<SupportShot>>,
    pub queries: Vec<QueryItem>,
    /// Global class id of episode class `c + 1`.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// Global class of an episode label; 0 maps to the background.
    pub fn global_class(&self, label: usize) -> usize {
        if label == 0 {
            0
        } else {
            self.class_map[label - 1]
        }
    }

    /// Pool indices of every block used, supports first.
    pub fn sources(&self) -> Vec<usize> {
        self.support
            .iter()
            .flatten()
            .map(|s| s.source)
            .chain(self.queries.iter().map(|q| q.source))
            .collect()
    }
}

/// Binary mask of one global class.
pub fn class_mask(block: &PointCloudBlock, class: usize) -> Vec<bool> {
    block.labels.iter().map(|&l| l == class).collect()
}

/// Episode labels for a query: `c` where the global label is `class_map[c-1]`, else 0.
pub fn query_labels(block: &PointCloudBlock, class_map: &[usize]) -> Vec<usize> {
    block
        .labels
        .iter()
        .map(|l| class_map.iter().position(|c| c == l).map_or(0, |p| p + 1))
        .collect()
}

/// Pool indices that hold at least `min_points` points of each class.
fn eligible(pool: &[PointCloudBlock], class: usize, min_points: usize) -> Vec<usize> {
    pool.iter()
        .enumerate()
        .filter(|(_, b)| b.count_label(class) >= min_points.max(1))
        .map(|(i, _)| i)
        .collect()
}

fn draw<R: Rng + ?Sized>(
    candidates: &[usize],
    used: &BTreeSet<usize>,
    n: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    let mut free: Vec<usize> = candidates.iter().copied().filter(|i| !used.contains(i)).collect();
    if free.len() < n {
        return None;
    }
    free.shuffle(rng);
    free.truncate(n);
    Some(free)
}

fn exhausted(class: usize, reason: &str) -> Error {
    Error::SamplingExhausted {
        class,
        reason: String::from(reason),
    }
}

/// Samples blocks for a fixed class tuple. Supports are drawn class by
/// class, then queries from blocks eligible for any chosen class; no block
/// is used twice.
pub fn sample_episode_for<R: Rng + ?Sized>(
    pool: &[PointCloudBlock],
    classes: &[usize],
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    cfg.validate()?;
    const ATTEMPTS: usize = 16;
    let per_class: Vec<Vec<usize>> =
        classes.iter().map(|&c| eligible(pool, c, cfg.min_class_points)).collect();
    let mut last_err = None;
    for _ in 0..ATTEMPTS {
        let mut used = BTreeSet::new();
        let mut support = Vec::with_capacity(classes.len());
        let mut failed = false;
        for (&class, cand) in classes.iter().zip(&per_class) {
            let Some(ids) = draw(cand, &used, cfg.shots, rng) else {
                last_err = Some(exhausted(class, "not enough eligible support blocks"));
                failed = true;
                break;
            };
            used.extend(ids.iter().copied());
            support.push(
                ids.into_iter()
                    .map(|i| SupportShot {
                        block: pool[i].clone(),
                        source: i,
                        mask: class_mask(&pool[i], class),
                    })
                    .collect(),
            );
        }
        if failed {
            continue;
        }
        let union: BTreeSet<usize> = per_class.iter().flatten().copied().collect();
        let union: Vec<usize> = union.into_iter().collect();
        let Some(qids) = draw(&union, &used, cfg.queries, rng) else {
            last_err = Some(exhausted(classes[0], "no eligible query block left"));
            continue;
        };
        let queries = qids
            .into_iter()
            .map(|i| QueryItem {
                block: pool[i].clone(),
                source: i,
                mask: query_labels(&pool[i], classes),
            })
            .collect();
        return Ok(Episode {
            support,
            queries,
            class_map: classes.to_vec(),
        });
    }
    Err(last_err.unwrap_or_else(|| exhausted(classes[0], "sampling failed")))
}

/// Rebuilds an episode from pool indices, as recorded by
/// [`Episode::sources`]. Masks are recomputed from the block labels.
pub fn episode_from_sources(
    pool: &[PointCloudBlock],
    classes: &[usize],
    support: &[Vec<usize>],
    queries: &[usize],
) -> Result<Episode> {
    if classes.is_empty() || support.len() != classes.len() || queries.is_empty() {
        return Err(Error::config("episode needs one support list per class and at least one query"));
    }
    let fetch = |i: usize| {
        pool.get(i)
            .ok_or_else(|| Error::config(alloc::format!("block index {i} outside a pool of {}", pool.len())))
    };
    let mut shots = Vec::with_capacity(classes.len());
    for (&class, ids) in classes.iter().zip(support) {
        if ids.is_empty() {
            return Err(Error::config("every class needs at least one support block"));
        }
        let mut row = Vec::with_capacity(ids.len());
        for &i in ids {
            let block = fetch(i)?;
            row.push(SupportShot { block: block.clone(), source: i, mask: class_mask(block, class) });
        }
        shots.push(row);
    }
    let mut items = Vec::with_capacity(queries.len());
    for &i in queries {
        let block = fetch(i)?;
        items.push(QueryItem { block: block.clone(), source: i, mask: query_labels(block, classes) });
    }
    Ok(Episode { support: shots, queries: items, class_map: classes.to_vec() })
}

/// Draws `ways` distinct seen classes among those with enough eligible
/// blocks, then samples supports and queries for them.
pub fn sample_training_episode<R: Rng + ?Sized>(
    pool: &[PointCloudBlock],
    split: &FoldSplit,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    cfg.validate()?;
    if cfg.ways >= split.seen.len() {
        return Err(Error::config(alloc::format!(
            "training needs ways < number of seen classes ({} >= {})",
            cfg.ways,
            split.seen.len()
        )));
    }
    let mut available: Vec<usize> = split
        .seen
        .iter()
        .copied()
        .filter(|&c| eligible(pool, c, cfg.min_class_points).len() >= cfg.shots)
        .collect();
    if available.len() < cfg.ways {
        let missing = split
            .seen
            .iter()
            .copied()
            .find(|c| !available.contains(c))
            .unwrap_or(split.seen[0]);
        return Err(exhausted(missing, "too few seen classes have eligible blocks"));
    }
    available.shuffle(rng);
    available.truncate(cfg.ways);
    sample_episode_for(pool, &available, cfg, rng)
}

/// All `k`-subsets of `items` in lexicographic order of positions.
pub fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Builds `count` test episodes by cycling through the lexicographically
/// ordered `ways`-combinations of the unseen classes.
pub fn build_test_episodes<R: Rng + ?Sized>(
    pool: &[PointCloudBlock],
    split: &FoldSplit,
    cfg: &EpisodeConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::config("test episode count must be at least 1"));
    }
    let mut unseen = split.unseen.clone();
    unseen.sort_unstable();
    let combos = combinations(&unseen, cfg.ways);
    if combos.is_empty() {
        return Err(Error::config(alloc::format!(
            "cannot choose {} classes out of {} unseen",
            cfg.ways,
            unseen.len()
        )));
    }
    (0..count)
        .map(|j| sample_episode_for(pool, &combos[j % combos.len()], cfg, rng))
        .collect()
}
