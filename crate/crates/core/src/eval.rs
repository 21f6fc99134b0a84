//! Attack success rate, clean accuracy, per-expert robustness, routing rates
//! and the JSON evaluation report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attack::attach_test_triggers;
use crate::error::{Error, Result};
use crate::graph::{AttackKind, Graph, PoisonLedger, Split};
use crate::model::{GateAssignment, MoeModel};
use crate::router::DisagreementReport;
use crate::tensor::Matrix;
use crate::train::detect_inductive;

/// An expert is robust to a backdoor below this standalone ASR.
pub const ROBUST_ASR: f64 = 0.20;
/// Accuracy-drop thresholds for edge manipulation and node injection.
pub const ROBUST_EDGE_DROP: f64 = 0.14;
pub const ROBUST_INJECT_DROP: f64 = 0.05;

/// Argmax accuracy of `scores` (probabilities or logits) over `nodes`.
pub fn accuracy_of(scores: &Matrix, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::contract("accuracy over an empty node set"));
    }
    let hits = nodes.iter().filter(|&&v| scores.argmax_row(v) == labels[v]).count();
    Ok(hits as f64 / nodes.len() as f64)
}

/// Share of `nodes` whose true class differs from `target` that are
/// predicted as `target`.
pub fn asr_of(scores: &Matrix, labels: &[usize], nodes: &[usize], target: usize) -> Result<f64> {
    let eligible: Vec<usize> = nodes.iter().copied().filter(|&v| labels[v] != target).collect();
    if eligible.is_empty() {
        return Err(Error::contract("no ASR-test node outside the target class"));
    }
    let hits = eligible.iter().filter(|&&v| scores.argmax_row(v) == target).count();
    Ok(hits as f64 / eligible.len() as f64)
}

pub fn asr(model: &MoeModel, triggered: &Graph, nodes: &[usize], target: usize) -> Result<f64> {
    asr_of(&model.predict(triggered)?, triggered.labels(), nodes, target)
}

pub fn clean_accuracy(model: &MoeModel, g: &Graph, nodes: &[usize]) -> Result<f64> {
    accuracy_of(&model.predict(g)?, g.labels(), nodes)
}

/// Standalone robustness of one final-layer expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRobustness {
    pub id: usize,
    /// Backdoor only.
    pub asr: Option<f64>,
    pub acc_drop: f64,
}

impl ExpertRobustness {
    pub fn is_robust(&self, kind: AttackKind) -> bool {
        match kind {
            AttackKind::Backdoor => self.asr.is_some_and(|a| a < ROBUST_ASR),
            AttackKind::Edge => self.acc_drop < ROBUST_EDGE_DROP,
            AttackKind::Inject => self.acc_drop < ROBUST_INJECT_DROP,
        }
    }
}

/// Evaluates every expert on its own. `nodes` index both graphs (attacks
/// only append nodes). Backdoor: ASR on `attacked` plus the accuracy lost to
/// the trigger; otherwise accuracy on `reference` minus on `attacked`.
pub fn per_expert_robustness(
    model: &MoeModel,
    reference: &Graph,
    attacked: &Graph,
    nodes: &[usize],
    backdoor_target: Option<usize>,
) -> Result<Vec<ExpertRobustness>> {
    let before = model.per_expert_predictions(reference)?;
    let after = model.per_expert_predictions(attacked)?;
    before
        .iter()
        .zip(&after)
        .enumerate()
        .map(|(id, (b, a))| {
            let acc_drop = accuracy_of(b, reference.labels(), nodes)? - accuracy_of(a, attacked.labels(), nodes)?;
            let asr = backdoor_target
                .map(|t| asr_of(a, attacked.labels(), nodes, t))
                .transpose()?;
            Ok(ExpertRobustness { id, asr, acc_drop })
        })
        .collect()
}

pub fn robust_experts(per_expert: &[ExpertRobustness], kind: AttackKind) -> Vec<usize> {
    per_expert.iter().filter(|e| e.is_robust(kind)).map(|e| e.id).collect()
}

/// Counts of `values` in `bins` equal-width bins over `[0, 1]`; values
/// outside are clamped to the end bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    if bins == 0 {
        return out;
    }
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        out[b] += 1;
    }
    out
}

/// Mean gate mass that `nodes` place on `robust` experts. An empty robust
/// set gives 0.
pub fn routing_rate_to_robust(asg: &GateAssignment, nodes: &[usize], robust: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::contract("routing rate over an empty node set"));
    }
    if robust.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = nodes
        .iter()
        .map(|&v| robust.iter().map(|&k| asg.weight(v, k)).sum::<f64>())
        .sum();
    Ok((total / nodes.len() as f64).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisagreementSummary {
    pub mu: f64,
    pub sigma: f64,
    pub threshold: f64,
    pub flagged: usize,
    /// Against the ledger's poisoned nodes among the scored ones; `None`
    /// without a ledger or when undefined.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Flagged-set precision and recall against `truth`.
pub fn detection_quality(report: &DisagreementReport, truth: &[usize]) -> (Option<f64>, Option<f64>) {
    let scored: Vec<usize> = truth
        .iter()
        .copied()
        .filter(|v| report.nodes.binary_search(v).is_ok())
        .collect();
    let hits = report
        .flagged
        .iter()
        .filter(|v| scored.binary_search(v).is_ok())
        .count() as f64;
    let precision = (!report.flagged.is_empty()).then(|| hits / report.flagged.len() as f64);
    let recall = (!scored.is_empty()).then(|| hits / scored.len() as f64);
    (precision, recall)
}

impl DisagreementSummary {
    pub fn new(report: &DisagreementReport, ledger: Option<&PoisonLedger>) -> Self {
        let (precision, recall) = ledger.map_or((None, None), |l| detection_quality(report, &l.poisoned));
        Self {
            mu: report.mu,
            sigma: report.sigma,
            threshold: report.threshold,
            flagged: report.flagged.len(),
            precision,
            recall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub asr: Option<f64>,
    pub clean_acc: f64,
    pub per_expert: Vec<ExpertRobustness>,
    pub routing_robust_rate: f64,
    pub disagreement: DisagreementSummary,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn per_expert_csv(&self) -> String {
        let mut s = String::from("id,asr,acc_drop\n");
        for e in &self.per_expert {
            let asr = e.asr.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", e.id, asr, e.acc_drop);
        }
        s
    }
}

/// Full evaluation of a trained model on a (possibly poisoned) bundle.
///
/// Backdoor: triggers go on the ASR-test nodes, ASR is measured there and
/// clean accuracy on the clean-test nodes. Edge and injection: accuracy on
/// all test nodes of the attacked graph, per-expert drops against the
/// ledger-reverted clean graph. Without a ledger: clean-test accuracy only.
pub fn evaluate(
    model: &MoeModel,
    g: &Graph,
    split: &Split,
    ledger: Option<&PoisonLedger>,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let detection = detect_inductive(model, g, split)?;
    let disagreement = DisagreementSummary::new(&detection, ledger);
    let Some(ledger) = ledger else {
        let per_expert = per_expert_robustness(model, g, g, &split.clean_test, None)?;
        return Ok(EvalReport {
            asr: None,
            clean_acc: clean_accuracy(model, g, &split.clean_test)?,
            per_expert,
            routing_robust_rate: 0.0,
            disagreement,
            config,
        });
    };
    let (asr_value, clean_acc, per_expert, perturbed, attacked) = match ledger.kind {
        AttackKind::Backdoor => {
            let target = ledger
                .trigger
                .as_ref()
                .ok_or_else(|| Error::contract("backdoor ledger without trigger"))?
                .target_class;
            let triggered = attach_test_triggers(g, split, ledger)?;
            let probs = model.predict(&triggered)?;
            let asr_value = asr_of(&probs, triggered.labels(), &split.asr_test, target)?;
            let clean_acc = accuracy_of(&probs, triggered.labels(), &split.clean_test)?;
            let per_expert = per_expert_robustness(model, g, &triggered, &split.asr_test, Some(target))?;
            (
                Some(asr_value),
                clean_acc,
                per_expert,
                split.asr_test.clone(),
                triggered,
            )
        }
        AttackKind::Edge | AttackKind::Inject => {
            let (clean, _) = ledger.revert(g, split)?;
            let test = split.test_nodes();
            let clean_acc = clean_accuracy(model, g, &test)?;
            let per_expert = per_expert_robustness(model, &clean, g, &test, None)?;
            let perturbed: Vec<usize> = ledger
                .perturbations
                .iter()
                .filter(|(v, _)| *v < ledger.base_num_nodes)
                .map(|(v, _)| *v)
                .collect();
            (None, clean_acc, per_expert, perturbed, g.clone())
        }
    };
    let robust = robust_experts(&per_expert, ledger.kind);
    let routing_robust_rate = if perturbed.is_empty() {
        0.0
    } else {
        routing_rate_to_robust(&model.gate_assignment(&attacked)?, &perturbed, &robust)?
    };
    Ok(EvalReport {
        asr: asr_value,
        clean_acc,
        per_expert,
        routing_robust_rate,
        disagreement,
        config,
    })
}

#[cfg(test)]
mod tests;
