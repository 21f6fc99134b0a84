//! Expert disagreement, perturbed-node flagging, shrunken soft labels and the
//! router fine-tuning objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{func, Matrix, Tape, Target, Var};

/// Sum over experts of `KL(y_n || mean_n y_n)` for one node.
pub fn disagreement_row(preds: &[&[f64]]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::contract("disagreement needs at least two experts"));
    }
    let c = preds[0].len();
    for p in preds {
        if p.len() != c {
            return Err(Error::dim("disagreement", "class count differs between experts"));
        }
        func::check_distribution(p)?;
    }
    let mean = mean_rows(preds);
    Ok(preds.iter().map(|p| func::kl_div_unchecked(p, &mean)).sum())
}

fn mean_rows(preds: &[&[f64]]) -> Vec<f64> {
    let mut mean = vec![0.0; preds[0].len()];
    for p in preds {
        for (m, x) in mean.iter_mut().zip(p.iter()) {
            *m += x;
        }
    }
    let n = preds.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Disagreement score of every node, given each expert's `n x C` prediction.
pub fn disagreement(per_expert: &[Matrix]) -> Result<Vec<f64>> {
    if per_expert.len() < 2 {
        return Err(Error::contract("disagreement needs at least two experts"));
    }
    let shape = per_expert[0].shape();
    if per_expert.iter().any(|m| m.shape() != shape) {
        return Err(Error::dim("disagreement", "expert prediction shapes differ"));
    }
    (0..shape.0)
        .map(|v| {
            let rows: Vec<&[f64]> = per_expert.iter().map(|m| m.row(v)).collect();
            disagreement_row(&rows)
        })
        .collect()
}

/// Scores over a node set with the one-sigma outlier rule applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    pub nodes: Vec<usize>,
    pub scores: Vec<f64>,
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub threshold: f64,
    /// Nodes with score strictly above `mu + sigma`, ascending.
    pub flagged: Vec<usize>,
}

impl DisagreementReport {
    pub fn is_flagged(&self, v: usize) -> bool {
        self.flagged.binary_search(&v).is_ok()
    }
}

/// Flags `nodes[i]` when `scores[i] > mean + population std`.
pub fn identify_perturbed(nodes: &[usize], scores: &[f64]) -> Result<DisagreementReport> {
    if nodes.is_empty() {
        return Err(Error::contract("no scores to threshold"));
    }
    if nodes.len() != scores.len() {
        return Err(Error::dim("identify_perturbed", "node and score counts differ"));
    }
    let n = scores.len() as f64;
    let rough = scores.iter().sum::<f64>() / n;
    // One refinement pass removes the rounding residue of the naive mean.
    let mu = rough + scores.iter().map(|s| s - rough).sum::<f64>() / n;
    let sigma = (scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mu + sigma;
    let mut flagged: Vec<usize> = nodes
        .iter()
        .zip(scores)
        .filter(|&(_, &s)| s > threshold)
        .map(|(&v, _)| v)
        .collect();
    flagged.sort_unstable();
    Ok(DisagreementReport {
        nodes: nodes.to_vec(),
        scores: scores.to_vec(),
        mu,
        sigma,
        threshold,
        flagged,
    })
}

/// Expert-mean prediction, optionally shrunk on its own argmax class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub node: usize,
    pub probs: Vec<f64>,
    pub shrunk: bool,
}

/// `y(c) <- rho_c y(c) / Σ_j rho_j y(j)`.
pub fn shrink(probs: &[f64], factors: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != factors.len() {
        return Err(Error::dim("shrink", "factor count"));
    }
    if factors.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::contract("shrinkage factors must lie in (0, 1]"));
    }
    let scaled: Vec<f64> = probs.iter().zip(factors).map(|(p, r)| p * r).collect();
    let z: f64 = scaled.iter().sum();
    if z <= 0.0 {
        return Err(Error::contract("shrinkage of an all-zero distribution"));
    }
    Ok(scaled.into_iter().map(|x| x / z).collect())
}

/// Soft label of `node` from its per-expert predictions, shrinking the
/// argmax class of the mean by `rho` (no shrinkage when `rho == 1`).
pub fn soft_label(node: usize, preds: &[&[f64]], rho: f64) -> Result<SoftLabel> {
    if preds.is_empty() {
        return Err(Error::contract("soft label needs at least one expert"));
    }
    let mean = mean_rows(preds);
    let mut factors = vec![1.0; mean.len()];
    factors[crate::tensor::argmax(&mean)] = rho;
    Ok(SoftLabel {
        node,
        probs: shrink(&mean, &factors)?,
        shrunk: rho < 1.0,
    })
}

/// Soft labels for `nodes`, in the same order.
pub fn soft_labels(per_expert: &[Matrix], nodes: &[usize], rho: f64) -> Result<Vec<SoftLabel>> {
    nodes
        .iter()
        .map(|&v| {
            let rows: Vec<&[f64]> = per_expert.iter().map(|m| m.row(v)).collect();
            soft_label(v, &rows, rho)
        })
        .collect()
}

/// `mean CE(ŷ, ỹ) over flagged + gamma · mean CE(ŷ, y) over clean`.
pub fn router_loss(
    tape: &mut Tape,
    logits: Var,
    soft: &[SoftLabel],
    clean: &[usize],
    labels: &[usize],
    gamma: f64,
) -> Result<Var> {
    if soft.is_empty() && clean.is_empty() {
        return Err(Error::contract("router loss needs flagged or clean nodes"));
    }
    if clean.len() != labels.len() {
        return Err(Error::dim("router_loss", "clean label count"));
    }
    let mut flagged: Vec<usize> = soft.iter().map(|s| s.node).collect();
    flagged.sort_unstable();
    if clean.iter().any(|v| flagged.binary_search(v).is_ok()) {
        return Err(Error::contract("flagged and clean sets overlap"));
    }
    let c = tape.value(logits).cols();
    let mut target = Matrix::zeros(soft.len(), c);
    for (i, s) in soft.iter().enumerate() {
        if s.probs.len() != c {
            return Err(Error::dim("router_loss", "soft label width"));
        }
        target.row_mut(i).copy_from_slice(&s.probs);
    }
    let rows = Arc::new(soft.iter().map(|s| s.node).collect());
    let soft_term = tape.cross_entropy(logits, rows, Target::Soft(target))?;
    let hard = tape.cross_entropy(logits, Arc::new(clean.to_vec()), Target::Hard(labels.to_vec()))?;
    let hard = tape.scale(hard, gamma);
    tape.add(soft_term, hard)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::gradcheck;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn identical_experts_zero_disagreement() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(disagreement_row(&[&p, &p, &p]).unwrap(), 0.0);
    }

    #[test]
    fn opposite_one_hot_experts() {
        let s = disagreement_row(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((s - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn single_expert_rejected() {
        assert!(disagreement_row(&[&[1.0, 0.0]]).is_err());
        assert!(disagreement(&[Matrix::filled(2, 2, 0.5)]).is_err());
        assert!(disagreement_row(&[&[0.7, 0.7], &[0.5, 0.5]]).is_err());
    }

    #[test]
    fn threshold_arithmetic() {
        let r = identify_perturbed(&[10, 11, 12, 13], &[0.0, 0.0, 0.0, 10.0]).unwrap();
        assert!((r.mu - 2.5).abs() < 1e-12);
        assert!((r.sigma - 18.75f64.sqrt()).abs() < 1e-12);
        assert!((r.threshold - (2.5 + 18.75f64.sqrt())).abs() < 1e-12);
        assert_eq!(r.flagged, vec![13]);
    }

    #[test]
    fn equal_scores_flag_nothing() {
        let r = identify_perturbed(&[0, 1, 2], &[0.4; 3]).unwrap();
        assert_eq!(r.sigma, 0.0);
        assert!(r.flagged.is_empty());
        assert!(identify_perturbed(&[], &[]).is_err());
    }

    #[test]
    fn shrinkage_cases() {
        let s = soft_label(0, &[&[0.5, 0.5]], 0.5).unwrap();
        assert!((s.probs[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.probs[1] - 2.0 / 3.0).abs() < 1e-12);
        let id = soft_label(0, &[&[0.2, 0.8], &[0.4, 0.6]], 1.0).unwrap();
        assert!((id.probs[0] - 0.3).abs() < 1e-12 && (id.probs[1] - 0.7).abs() < 1e-12);
        assert!(!id.shrunk);
        assert!(shrink(&[0.5, 0.5], &[0.0, 1.0]).is_err());
        assert!(shrink(&[0.5, 0.5], &[1.5, 1.0]).is_err());
    }

    #[test]
    fn router_loss_cases() {
        let logits = Matrix::from_rows(&[vec![1.0, -0.5], vec![0.2, 0.3], vec![-1.0, 2.0]]);
        let soft = vec![SoftLabel {
            node: 0,
            probs: func::softmax(logits.row(0)),
            shrunk: false,
        }];
        let mut t = Tape::new();
        let l = t.constant(logits.clone());

        // Empty flagged set: only the scaled clean term.
        let only_clean = router_loss(&mut t, l, &[], &[1, 2], &[0, 1], 0.25).unwrap();
        let ce =
            (func::cross_entropy(logits.row(1), 0).unwrap() + func::cross_entropy(logits.row(2), 1).unwrap()) / 2.0;
        assert!((t.scalar(only_clean) - 0.25 * ce).abs() < 1e-12);

        // gamma = 0 with matching soft label: the entropy floor.
        let only_soft = router_loss(&mut t, l, &soft, &[1], &[0], 0.0).unwrap();
        assert!((t.scalar(only_soft) - func::entropy(&soft[0].probs)).abs() < 1e-12);

        assert!(router_loss(&mut t, l, &[], &[], &[], 0.25).is_err());
        assert!(router_loss(&mut t, l, &soft, &[0], &[1], 0.25).is_err());
    }

    #[test]
    fn router_loss_gradient() {
        let logits = Matrix::from_rows(&[
            vec![0.3, -0.5, 0.9],
            vec![0.2, 0.1, -0.4],
            vec![-1.0, 0.7, 0.2],
            vec![0.5, 0.5, -0.2],
        ]);
        let soft = soft_labels(
            &[
                Matrix::from_rows(&vec![vec![0.2, 0.3, 0.5]; 4]),
                Matrix::from_rows(&vec![vec![0.6, 0.2, 0.2]; 4]),
            ],
            &[0, 2],
            0.5,
        )
        .unwrap();
        let gc = gradcheck::check(&[logits], 1e-5, |t, v| {
            router_loss(t, v[0], &soft, &[1, 3], &[2, 0], 0.25)
        })
        .unwrap();
        assert!(gc.nontrivial());
        assert!(gc.relative_error() < 1e-4);
    }

    fn dist(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn disagreement_nonnegative_and_symmetric(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 2..6),
        ) {
            let ps: Vec<Vec<f64>> = raw.iter().map(|r| dist(r)).collect();
            let rows: Vec<&[f64]> = ps.iter().map(|p| p.as_slice()).collect();
            let s = disagreement_row(&rows).unwrap();
            prop_assert!(s >= 0.0);
            let rev: Vec<&[f64]> = rows.iter().rev().copied().collect();
            prop_assert!((disagreement_row(&rev).unwrap() - s).abs() < 1e-12);
        }

        #[test]
        fn flagged_set_translation_invariant(
            scores in prop::collection::vec(0.0f64..5.0, 1..40),
            shift in -3.0f64..3.0,
        ) {
            let nodes: Vec<usize> = (0..scores.len()).collect();
            let a = identify_perturbed(&nodes, &scores).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let b = identify_perturbed(&nodes, &shifted).unwrap();
            // Exact ties at the threshold may move under rounding; compare away from it.
            let clear = scores.iter().all(|s| (s - a.threshold).abs() > 1e-9);
            if clear {
                prop_assert_eq!(a.flagged, b.flagged);
            }
        }

        #[test]
        fn soft_labels_are_distributions(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..5),
            rho in 0.05f64..1.0,
        ) {
            let ps: Vec<Vec<f64>> = raw.iter().map(|r| dist(r)).collect();
            let rows: Vec<&[f64]> = ps.iter().map(|p| p.as_slice()).collect();
            let s = soft_label(0, &rows, rho).unwrap();
            prop_assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.probs.iter().all(|&p| p >= 0.0));
        }
    }
}
