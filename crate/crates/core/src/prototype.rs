//! Masked-average-pooling prototypes, cosine scoring, mask prediction and
//! the segmentation and alignment losses.

use alloc::vec::Vec;

use crate::backbone::argmax;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 20.0;

/// Sign applied to `alpha · cos` inside the score softmax. Positive means the
/// most similar prototype receives the highest probability.
pub const SIMILARITY_SIGN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Pooled from support features.
    Original,
    /// Rewritten by query-guided adaption.
    Adapted,
    /// Produced by the semantic projection network.
    Projected,
}

/// Row 0 is the background prototype, rows `1..=C` the episode classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Tensor,
    pub provenance: Provenance,
}

impl PrototypeSet {
    pub fn new(vectors: Tensor, provenance: Provenance) -> Result<Self> {
        if vectors.rank() != 2 || vectors.rows() < 2 {
            return Err(Error::shape("prototype_set", vectors.shape(), &[2, 0]));
        }
        if !vectors.is_finite() {
            return Err(Error::Degenerate("prototype set is not finite".into()));
        }
        Ok(PrototypeSet { vectors, provenance })
    }

    /// Number of foreground classes.
    pub fn ways(&self) -> usize {
        self.vectors.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Prototype variables on a tape, tagged with where they came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtoVars {
    pub var: Var,
    pub provenance: Provenance,
}

/// Per-point class probabilities, N × (C+1).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub probs: Tensor,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config(alloc::format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Row vector `weights / count` selecting the masked points, or `None` when
/// the mask is empty.
fn mean_selector(mask: impl Iterator<Item = bool> + Clone, n: usize) -> Option<Tensor> {
    let count = mask.clone().filter(|&m| m).count();
    if count == 0 {
        return None;
    }
    let w = 1.0 / count as f64;
    let data = mask.map(|m| if m { w } else { 0.0 }).collect();
    Some(Tensor::matrix(1, n, data).expect("n > 0"))
}

/// Prototypes from support features on the tape. `features[c][k]` is the
/// N×d map of shot `k` of class `c + 1`; `masks[c][k]` marks its points of
/// that class.
///
/// Foreground prototype `c` is the mean over shots of each shot's masked
/// mean. The background prototype is the mean, over all shots, of each
/// shot's mean over unmasked points; shots without unmasked points are
/// skipped.
pub fn masked_average_pool_on(
    tape: &mut Tape,
    features: &[Vec<Var>],
    masks: &[Vec<Vec<bool>>],
) -> Result<ProtoVars> {
    if features.is_empty() || features.len() != masks.len() {
        return Err(Error::shape(
            "masked_average_pool",
            &[features.len()],
            &[masks.len()],
        ));
    }
    let mut rows = Vec::with_capacity(features.len() + 1);
    let mut background = Vec::new();
    for (c, (shots, shot_masks)) in features.iter().zip(masks).enumerate() {
        if shots.is_empty() || shots.len() != shot_masks.len() {
            return Err(Error::shape("masked_average_pool", &[shots.len()], &[shot_masks.len()]));
        }
        let mut per_shot = Vec::with_capacity(shots.len());
        for (k, (&f, mask)) in shots.iter().zip(shot_masks).enumerate() {
            let n = tape.shape(f)[0];
            if mask.len() != n {
                return Err(Error::shape("masked_average_pool", tape.shape(f), &[mask.len()]));
            }
            let fg = mean_selector(mask.iter().copied(), n)
                .ok_or(Error::DegenerateSupport { class: c + 1, shot: k })?;
            let fg = tape.constant(fg);
            per_shot.push(tape.matmul(fg, f)?);
            if let Some(bg) = mean_selector(mask.iter().map(|m| !m), n) {
                let bg = tape.constant(bg);
                background.push(tape.matmul(bg, f)?);
            }
        }
        rows.push(mean_of_rows(tape, &per_shot)?);
    }
    if background.is_empty() {
        return Err(Error::DegenerateBackground);
    }
    let bg = mean_of_rows(tape, &background)?;
    rows.insert(0, bg);
    Ok(ProtoVars {
        var: tape.concat_rows(&rows)?,
        provenance: Provenance::Original,
    })
}

/// Mean of several 1×d rows.
pub(crate) fn mean_of_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let mut acc = *rows.first().ok_or(Error::Empty("rows"))?;
    for &r in &rows[1..] {
        acc = tape.add(acc, r)?;
    }
    if rows.len() == 1 {
        Ok(acc)
    } else {
        tape.scale(acc, 1.0 / rows.len() as f64)
    }
}

/// Score logits `SIMILARITY_SIGN · alpha · cos(F_x, p_i)`, N × (C+1).
pub fn logits_on(tape: &mut Tape, features: Var, protos: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let cos = tape.cosine_matrix(features, protos)?;
    tape.scale(cos, SIMILARITY_SIGN * alpha)
}

/// Mean negative log-probability of `labels` under row-wise log-probabilities.
pub fn nll_on(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("nll", &shape, &[labels.len()]));
    }
    let onehot = crate::backbone::one_hot(labels, shape[1])?;
    let onehot = tape.constant(onehot);
    let picked = tape.mul(log_probs, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / labels.len() as f64)
}

/// Cross-entropy of the cosine-softmax scores against `labels`.
pub fn segmentation_loss_on(
    tape: &mut Tape,
    features: Var,
    protos: Var,
    labels: &[usize],
    alpha: f64,
) -> Result<Var> {
    let logits = logits_on(tape, features, protos, alpha)?;
    let logp = tape.log_softmax_rows(logits)?;
    nll_on(tape, logp, labels)
}

/// Alignment regularizer on the tape.
///
/// Prototypes are pooled from the query features under the (constant)
/// predicted labels, then every support shot is segmented against the
/// background and its own class prototype and scored with cross-entropy
/// against its true mask. Shots whose class or the background received no
/// predicted point are skipped; the loss is the mean over remaining shots,
/// or 0 when none remain.
pub fn align_loss_on(
    tape: &mut Tape,
    query: Var,
    predicted: &[usize],
    support: &[Vec<Var>],
    masks: &[Vec<Vec<bool>>],
    alpha: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    let n = tape.shape(query)[0];
    if predicted.len() != n {
        return Err(Error::shape("align_loss", tape.shape(query), &[predicted.len()]));
    }
    let ways = support.len();
    if let Some(&bad) = predicted.iter().find(|&&l| l > ways) {
        return Err(Error::LabelOutOfRange { label: bad, max: ways });
    }
    let mut query_protos = Vec::with_capacity(ways + 1);
    for class in 0..=ways {
        let proto = match mean_selector(predicted.iter().map(|&l| l == class), n) {
            Some(sel) => {
                let sel = tape.constant(sel);
                Some(tape.matmul(sel, query)?)
            }
            None => None,
        };
        query_protos.push(proto);
    }
    let mut terms = Vec::new();
    if let Some(bg) = query_protos[0] {
        for (c, (shots, shot_masks)) in support.iter().zip(masks).enumerate() {
            let Some(fg) = query_protos[c + 1] else { continue };
            let pair = tape.concat_rows(&[bg, fg])?;
            for (&f, mask) in shots.iter().zip(shot_masks) {
                let labels: Vec<usize> = mask.iter().map(|&m| usize::from(m)).collect();
                terms.push(segmentation_loss_on(tape, f, pair, &labels, alpha)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let stacked = tape.concat_rows(&terms)?;
    tape.mean(stacked)
}

fn features_on(tape: &mut Tape, features: &[Vec<Tensor>]) -> Vec<Vec<Var>> {
    features
        .iter()
        .map(|shots| shots.iter().map(|f| tape.constant(f.clone())).collect())
        .collect()
}

pub fn masked_average_pool(features: &[Vec<Tensor>], masks: &[Vec<Vec<bool>>]) -> Result<PrototypeSet> {
    let mut tape = Tape::new();
    let vars = features_on(&mut tape, features);
    let protos = masked_average_pool_on(&mut tape, &vars, masks)?;
    PrototypeSet::new(tape.value(protos.var).clone(), Provenance::Original)
}

pub fn score_map(query: &Tensor, protos: &PrototypeSet, alpha: f64) -> Result<ScoreMap> {
    check_alpha(alpha)?;
    let logits = query.cosine_matrix(&protos.vectors)?;
    let probs = logits.map(|c| SIMILARITY_SIGN * alpha * c).softmax_rows()?;
    Ok(ScoreMap { probs })
}

/// Per-point argmax; ties resolve to the lowest class index.
pub fn predict_mask(scores: &ScoreMap) -> Vec<usize> {
    let (n, _) = scores.probs.dims2();
    (0..n)
        .map(|i| argmax(scores.probs.row_slice(i).iter().copied()))
        .collect()
}

/// `-(1/N) Σ_x log probs[x, gt[x]]`.
pub fn segmentation_loss(scores: &ScoreMap, gt: &[usize]) -> Result<f64> {
    let (n, classes) = scores.probs.dims2();
    if gt.len() != n {
        return Err(Error::shape("segmentation_loss", scores.probs.shape(), &[gt.len()]));
    }
    let mut total = 0.0;
    for (i, &g) in gt.iter().enumerate() {
        if g >= classes {
            return Err(Error::LabelOutOfRange { label: g, max: classes - 1 });
        }
        total -= libm::log(scores.probs.get(i, g));
    }
    Ok(total / n as f64)
}

pub fn align_loss(
    query: &Tensor,
    predicted: &[usize],
    support: &[Vec<Tensor>],
    masks: &[Vec<Vec<bool>>],
    alpha: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let vars = features_on(&mut tape, support);
    let loss = align_loss_on(&mut tape, q, predicted, &vars, masks, alpha)?;
    Ok(tape.value(loss).to_scalar())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn constant_features_give_constant_prototype() {
        let f = Tensor::matrix(4, 2, [0.7, -1.5].repeat(4)).unwrap();
        let p = masked_average_pool(&[vec![f]], &[vec![vec![true, false, true, false]]]).unwrap();
        assert_eq!(p.vectors.row_slice(1), &[0.7, -1.5]);
        assert_eq!(p.vectors.row_slice(0), &[0.7, -1.5]);
        assert_eq!(p.provenance, Provenance::Original);
    }

    #[test]
    fn foreground_mean_example() {
        let f = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let p = masked_average_pool(&[vec![f]], &[vec![vec![true, true, false, false]]]).unwrap();
        assert_eq!(p.vectors.row_slice(1), &[2.0, 3.0]);
        assert_eq!(p.vectors.row_slice(0), &[6.0, 7.0]);
    }

    #[test]
    fn prototype_is_mean_of_shot_means() {
        // shot 1 has one masked point, shot 2 has three
        let a = Tensor::from_rows(&[&[4.0, 0.0], &[9.0, 9.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0, 2.0], &[0.0, 2.0], &[0.0, 2.0], &[9.0, 9.0]]).unwrap();
        let p = masked_average_pool(
            &[vec![a, b]],
            &[vec![vec![true, false], vec![true, true, true, false]]],
        )
        .unwrap();
        // per-shot means m1 = [4,0], m2 = [0,2]; pooled mean would be [1,1.5]
        assert_eq!(p.vectors.row_slice(1), &[2.0, 1.0]);
    }

    #[test]
    fn degenerate_masks_raise() {
        let f = Tensor::ones(&[2, 2]);
        assert_eq!(
            masked_average_pool(&[vec![f.clone()]], &[vec![vec![false, false]]]),
            Err(Error::DegenerateSupport { class: 1, shot: 0 })
        );
        assert_eq!(
            masked_average_pool(&[vec![f]], &[vec![vec![true, true]]]),
            Err(Error::DegenerateBackground)
        );
    }

    fn protos(rows: &[&[f64]]) -> PrototypeSet {
        PrototypeSet::new(Tensor::from_rows(rows).unwrap(), Provenance::Original).unwrap()
    }

    #[test]
    fn score_examples() {
        let p = protos(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let q = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let s = score_map(&q, &p, 50.0).unwrap();
        assert_eq!(predict_mask(&s), vec![1]);

        let same = protos(&[&[1.0, 2.0], &[1.0, 2.0], &[-1.0, 0.5]]);
        let q = Tensor::from_rows(&[&[0.3, 0.9]]).unwrap();
        let s = score_map(&q, &same, 20.0).unwrap();
        assert_eq!(s.probs.get(0, 0), s.probs.get(0, 1));

        let p = protos(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let s = score_map(&q, &p, 1.0).unwrap();
        // softmax([1, 0]) = [e/(e+1), 1/(e+1)]
        let e = libm::exp(1.0);
        assert!((s.probs.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.probs.get(0, 0) - 0.731).abs() < 5e-4);
        assert!((s.probs.get(0, 1) - 0.269).abs() < 5e-4);

        assert!(matches!(score_map(&q, &p, 0.0), Err(Error::Config(_))));
        let zero = protos(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(score_map(&q, &zero, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identical_vector_scores_highest() {
        let p = protos(&[&[0.2, -0.4, 1.0], &[1.0, 1.0, 0.0], &[-0.3, 0.8, 0.1]]);
        for i in 0..3 {
            let q = Tensor::from_rows(&[p.vectors.row_slice(i)]).unwrap();
            let s = score_map(&q, &p, 5.0).unwrap();
            assert_eq!(predict_mask(&s), vec![i]);
        }
    }

    #[test]
    fn predict_mask_rules() {
        let s = ScoreMap {
            probs: Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]).unwrap(),
        };
        assert_eq!(predict_mask(&s), vec![1, 2, 0]);
        let uniform = ScoreMap {
            probs: Tensor::filled(&[2, 3], 1.0 / 3.0),
        };
        assert_eq!(predict_mask(&uniform), vec![0, 0]);
    }

    #[test]
    fn segmentation_loss_examples() {
        let perfect = ScoreMap {
            probs: Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
        };
        assert_eq!(segmentation_loss(&perfect, &[0, 1]).unwrap(), 0.0);
        let uniform = ScoreMap {
            probs: Tensor::filled(&[3, 2], 0.5),
        };
        assert!((segmentation_loss(&uniform, &[0, 1, 1]).unwrap() - libm::log(2.0)).abs() < 1e-15);
        assert!(matches!(
            segmentation_loss(&uniform, &[0, 2, 1]),
            Err(Error::LabelOutOfRange { label: 2, max: 1 })
        ));
    }

    #[test]
    fn align_loss_skips_missing_classes() {
        let q = Tensor::from_rows(&[&[1.0, 0.1], &[0.9, 0.2], &[0.1, 1.0]]).unwrap();
        let s = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let loss = align_loss(&q, &[0, 0, 0], &[vec![s]], &[vec![vec![false, true]]], 20.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn align_loss_fixed_point() {
        // query == support, prediction == ground truth, well separated features
        let f = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.01], &[0.0, 1.0], &[0.01, 1.0]]).unwrap();
        let mask = vec![false, false, true, true];
        let predicted = [0, 0, 1, 1];
        let loss = align_loss(&f, &predicted, &[vec![f.clone()]], &[vec![mask.clone()]], 20.0).unwrap();
        let p = masked_average_pool(&[vec![f.clone()]], &[vec![mask]]).unwrap();
        let seg = segmentation_loss(&score_map(&f, &p, 20.0).unwrap(), &predicted).unwrap();
        assert!((loss - seg).abs() < 1e-12);
        assert!(loss < 1e-6, "{loss}");
    }
}
