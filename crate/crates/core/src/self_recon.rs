//! Self-reconstruction: each support mask is re-segmented from its own
//! original prototype pair `{p^0, p^c}`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::prototype::{logits_on, nll_on, PrototypeSet, ProtoVars, Provenance};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SelfReconReport {
    /// Reconstructed foreground mask per `(class, shot)`.
    pub masks: Vec<Vec<Vec<bool>>>,
    /// IoU of each reconstructed mask against its ground truth.
    pub iou: Vec<Vec<f64>>,
    pub loss: f64,
}

impl SelfReconReport {
    pub fn mean_iou(&self) -> f64 {
        let all: Vec<f64> = self.iou.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    }
}

fn require_original(provenance: Provenance) -> Result<()> {
    if provenance != Provenance::Original {
        return Err(Error::Contract(alloc::format!(
            "self-reconstruction needs original prototypes, got {provenance:?}"
        )));
    }
    Ok(())
}

/// Per-shot log-probabilities over `{background, class}`, N × 2.
fn pair_log_probs(tape: &mut Tape, f: Var, protos: Var, class: usize, alpha: f64) -> Result<Var> {
    let pair = tape.gather_rows(protos, &[0, class])?;
    let logits = logits_on(tape, f, pair, alpha)?;
    tape.log_softmax_rows(logits)
}

fn check_layout(support: &[Vec<Var>], masks: &[Vec<Vec<bool>>], rows: usize) -> Result<()> {
    if support.len() != masks.len() || rows != support.len() + 1 {
        return Err(Error::shape("self_reconstruct", &[support.len(), rows], &[masks.len()]));
    }
    for (s, m) in support.iter().zip(masks) {
        if s.is_empty() || s.len() != m.len() {
            return Err(Error::shape("self_reconstruct", &[s.len()], &[m.len()]));
        }
    }
    Ok(())
}

/// Reconstruction loss on the tape: cross-entropy of every support point
/// against its mask, averaged over all shots and points.
pub fn self_reconstruct_on(
    tape: &mut Tape,
    support: &[Vec<Var>],
    masks: &[Vec<Vec<bool>>],
    protos: ProtoVars,
    alpha: f64,
) -> Result<Var> {
    require_original(protos.provenance)?;
    check_layout(support, masks, tape.shape(protos.var)[0])?;
    let mut terms = Vec::new();
    for (c, (shots, shot_masks)) in support.iter().zip(masks).enumerate() {
        for (&f, mask) in shots.iter().zip(shot_masks) {
            let logp = pair_log_probs(tape, f, protos.var, c + 1, alpha)?;
            let labels: Vec<usize> = mask.iter().map(|&m| usize::from(m)).collect();
            terms.push(nll_on(tape, logp, &labels)?);
        }
    }
    let stacked = tape.concat_rows(&terms)?;
    tape.mean(stacked)
}

/// Foreground IoU with an empty union counted as a perfect match.
pub fn mask_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut tp, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        tp += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    }
}

pub fn self_reconstruct(
    support: &[Vec<Tensor>],
    masks: &[Vec<Vec<bool>>],
    protos: &PrototypeSet,
    alpha: f64,
) -> Result<SelfReconReport> {
    require_original(protos.provenance)?;
    let mut tape = Tape::new();
    let pv = ProtoVars {
        var: tape.constant(protos.vectors.clone()),
        provenance: protos.provenance,
    };
    let vars: Vec<Vec<Var>> = support
        .iter()
        .map(|s| s.iter().map(|f| tape.constant(f.clone())).collect())
        .collect();
    let loss = self_reconstruct_on(&mut tape, &vars, masks, pv, alpha)?;
    let mut rec_masks = Vec::with_capacity(support.len());
    let mut iou = Vec::with_capacity(support.len());
    for (c, (shots, shot_masks)) in vars.iter().zip(masks).enumerate() {
        let mut cm = Vec::with_capacity(shots.len());
        let mut ci = Vec::with_capacity(shots.len());
        for (&f, gt) in shots.iter().zip(shot_masks) {
            let logp = pair_log_probs(&mut tape, f, pv.var, c + 1, alpha)?;
            let lp = tape.value(logp);
            // ties go to background
            let pred: Vec<bool> = (0..lp.rows()).map(|i| lp.get(i, 1) > lp.get(i, 0)).collect();
            ci.push(mask_iou(&pred, gt));
            cm.push(pred);
        }
        rec_masks.push(cm);
        iou.push(ci);
    }
    Ok(SelfReconReport {
        masks: rec_masks,
        iou,
        loss: tape.value(loss).to_scalar(),
    })
}

/// Unweighted sum of the enabled loss terms.
pub fn total_loss(seg: f64, sr: Option<f64>, align: Option<f64>) -> f64 {
    seg + sr.unwrap_or(0.0) + align.unwrap_or(0.0)
}

pub fn total_loss_on(tape: &mut Tape, seg: Var, sr: Option<Var>, align: Option<Var>) -> Result<Var> {
    let mut total = seg;
    for term in [sr, align].into_iter().flatten() {
        total = tape.add(total, term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;
    use crate::params::uniform;
    use crate::prototype::masked_average_pool;
    use alloc::vec;

    fn originals(rows: &[&[f64]]) -> PrototypeSet {
        PrototypeSet::new(Tensor::from_rows(rows).unwrap(), Provenance::Original).unwrap()
    }

    #[test]
    fn separable_constant_regions() {
        let f = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let mask = vec![false, false, true, true];
        let protos = masked_average_pool(&[vec![f.clone()]], &[vec![mask.clone()]]).unwrap();
        let r = self_reconstruct(&[vec![f]], &[vec![mask.clone()]], &protos, 20.0).unwrap();
        assert_eq!(r.iou, vec![vec![1.0]]);
        assert_eq!(r.masks[0][0], mask);
        assert!(r.loss < 1e-8, "{}", r.loss);
    }

    #[test]
    fn four_point_loop_oracle() {
        let f = Tensor::from_rows(&[&[0.3, 0.9], &[-0.5, 0.2], &[0.8, -0.1], &[0.1, 0.1]]).unwrap();
        let mask = [true, false, true, false];
        let p = originals(&[&[0.2, 0.7], &[0.9, -0.3]]);
        let alpha = 7.0;
        let mut oracle = 0.0;
        for (i, &fg) in mask.iter().enumerate() {
            let x = f.row_slice(i);
            let cos = |q: &[f64]| {
                let dot: f64 = x.iter().zip(q).map(|(a, b)| a * b).sum();
                let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nq: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
                dot / (nx * nq)
            };
            let e0 = (alpha * cos(p.vectors.row_slice(0))).exp();
            let e1 = (alpha * cos(p.vectors.row_slice(1))).exp();
            let prob = if fg { e1 } else { e0 } / (e0 + e1);
            oracle -= prob.ln();
        }
        oracle /= 4.0;
        let r = self_reconstruct(&[vec![f]], &[vec![mask.to_vec()]], &p, alpha).unwrap();
        assert!((r.loss - oracle).abs() < 1e-12, "{} vs {oracle}", r.loss);
    }

    #[test]
    fn loss_is_nonnegative_and_iou_bounded() {
        for seed in 0..20 {
            let mut rng = derive_rng(seed, 5);
            let support = vec![
                vec![uniform(&[6, 3], 1.0, &mut rng), uniform(&[6, 3], 1.0, &mut rng)],
                vec![uniform(&[6, 3], 1.0, &mut rng), uniform(&[6, 3], 1.0, &mut rng)],
            ];
            let masks: Vec<Vec<Vec<bool>>> = (0..2)
                .map(|c| (0..2).map(|k| (0..6).map(|i| (i + c + k) % 3 == 0).collect()).collect())
                .collect();
            let p = PrototypeSet::new(uniform(&[3, 3], 1.0, &mut rng), Provenance::Original).unwrap();
            let r = self_reconstruct(&support, &masks, &p, 10.0).unwrap();
            assert!(r.loss >= 0.0);
            assert!(r.iou.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn duplicated_points_keep_the_loss() {
        let mut rng = derive_rng(3, 1);
        let half = uniform(&[4, 3], 1.0, &mut rng);
        let mut doubled_data = half.data().to_vec();
        doubled_data.extend_from_slice(half.data());
        let doubled = Tensor::matrix(8, 3, doubled_data).unwrap();
        let mask = vec![true, false, false, true];
        let mask2: Vec<bool> = mask.iter().chain(&mask).copied().collect();
        let p = PrototypeSet::new(uniform(&[2, 3], 1.0, &mut rng), Provenance::Original).unwrap();
        let a = self_reconstruct(&[vec![half]], &[vec![mask]], &p, 15.0).unwrap();
        let b = self_reconstruct(&[vec![doubled]], &[vec![mask2]], &p, 15.0).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn pairs_use_only_their_own_class() {
        // Changing the prototype of class 2 must not affect the shots of class 1.
        let mut rng = derive_rng(8, 2);
        let s1 = uniform(&[5, 2], 1.0, &mut rng);
        let s2 = uniform(&[5, 2], 1.0, &mut rng);
        let masks = vec![vec![vec![true, true, false, false, true]], vec![vec![false, true, true, false, false]]];
        let p = originals(&[&[0.1, 0.9], &[0.8, 0.2], &[-0.4, 0.6]]);
        let q = originals(&[&[0.1, 0.9], &[0.8, 0.2], &[0.9, 0.9]]);
        let only_first = |p: &PrototypeSet| {
            let two = PrototypeSet::new(Tensor::from_rows(&[p.vectors.row_slice(0), p.vectors.row_slice(1)]).unwrap(), Provenance::Original).unwrap();
            self_reconstruct(&[vec![s1.clone()]], &masks[..1], &two, 10.0).unwrap()
        };
        assert_eq!(only_first(&p), only_first(&q));
        let full_p = self_reconstruct(&[vec![s1.clone()], vec![s2.clone()]], &masks, &p, 10.0).unwrap();
        let full_q = self_reconstruct(&[vec![s1], vec![s2]], &masks, &q, 10.0).unwrap();
        assert_eq!(full_p.masks[0], full_q.masks[0]);
        assert_eq!(full_p.iou[0], full_q.iou[0]);
    }

    #[test]
    fn non_original_prototypes_are_rejected() {
        let f = Tensor::ones(&[2, 2]);
        for prov in [Provenance::Adapted, Provenance::Projected] {
            let p = PrototypeSet::new(Tensor::ones(&[2, 2]), prov).unwrap();
            assert!(matches!(
                self_reconstruct(&[vec![f.clone()]], &[vec![vec![true, false]]], &p, 1.0),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn total_loss_sums_terms() {
        assert_eq!(total_loss(0.5, Some(0.25), None), 0.75);
        assert_eq!(total_loss(0.5, None, None), 0.5);
        assert_eq!(total_loss(0.5, Some(0.25), Some(0.125)), 0.875);
    }

    #[test]
    fn mask_iou_examples() {
        assert_eq!(mask_iou(&[true, true, false], &[true, false, false]), 0.5);
        assert_eq!(mask_iou(&[false, false], &[false, false]), 1.0);
    }
}
