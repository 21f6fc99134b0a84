use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Backdoor,
    Edge,
    Inject,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Backdoor => "backdoor",
            AttackKind::Edge => "edge",
            AttackKind::Inject => "inject",
        })
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backdoor" => Ok(AttackKind::Backdoor),
            "edge" => Ok(AttackKind::Edge),
            "inject" => Ok(AttackKind::Inject),
            other => Err(Error::contract(format!("unknown attack kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Existing node carrying a trigger and a flipped label.
    Host,
    /// Node belonging to an injected trigger subgraph.
    Trigger,
    /// Endpoint of a flipped edge.
    FlippedEndpoint,
    /// Injected fake node.
    Injected,
    /// Existing node wired to an injected node.
    InjectionTarget,
}

/// Fixed trigger subgraph reused for every host.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerPattern {
    pub size: usize,
    pub target_class: usize,
    pub features: Vec<f64>,
}

/// Ground-truth record of a poisoning transformation.
///
/// Only evaluation and reporting read it; training sees the poisoned graph
/// and split alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonLedger {
    pub kind: AttackKind,
    /// Node count of the clean graph; injected nodes occupy ids from here on.
    pub base_num_nodes: usize,
    /// Ground-truth poisoned set `V_P` among the original nodes and injected nodes.
    pub poisoned: Vec<usize>,
    pub perturbations: Vec<(usize, Perturbation)>,
    pub injected: Vec<usize>,
    pub flipped_edges: Vec<(usize, usize)>,
    /// `(node, original label)` for every relabeled node.
    pub relabeled: Vec<(usize, usize)>,
    /// Unlabeled nodes the attack moved into the labeled set.
    pub promoted: Vec<usize>,
    pub trigger: Option<TriggerPattern>,
}

impl PoisonLedger {
    pub fn new(kind: AttackKind, base_num_nodes: usize) -> Self {
        Self {
            kind,
            base_num_nodes,
            poisoned: Vec::new(),
            perturbations: Vec::new(),
            injected: Vec::new(),
            flipped_edges: Vec::new(),
            relabeled: Vec::new(),
            promoted: Vec::new(),
            trigger: None,
        }
    }

    /// Undoes the attack: the result equals the clean `(graph, split)` bit for bit.
    pub fn revert(&self, g: &Graph, split: &Split) -> Result<(Graph, Split)> {
        if self.injected.iter().any(|&v| v < self.base_num_nodes)
            || g.num_nodes() != self.base_num_nodes + self.injected.len()
        {
            return Err(Error::contract("ledger does not match graph node count"));
        }
        let flipped = g.with_flipped(&self.flipped_edges)?;
        let truncated = flipped.truncated(self.base_num_nodes)?;
        let mut labels = truncated.labels().to_vec();
        for &(v, orig) in &self.relabeled {
            labels[v] = orig;
        }
        let clean = truncated.with_labels(labels)?;

        let base = self.base_num_nodes;
        let keep = |ids: &[usize]| ids.iter().copied().filter(|&v| v < base).collect::<Vec<_>>();
        let mut restored = Split {
            train: keep(&split.train)
                .into_iter()
                .filter(|v| self.promoted.binary_search(v).is_err())
                .collect(),
            val: keep(&split.val),
            clean_test: keep(&split.clean_test),
            asr_test: keep(&split.asr_test),
            unlabeled: keep(&split.unlabeled),
        };
        restored.unlabeled.extend(&self.promoted);
        restored.unlabeled.sort_unstable();
        Ok((clean, restored))
    }

    pub fn is_poisoned(&self, v: usize) -> bool {
        self.poisoned.binary_search(&v).is_ok()
    }
}
