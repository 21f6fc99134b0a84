//! End-to-end helpers shared by the CLI and the experiment suites.

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackRecipe, Poisoned};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::graph::{generate_synthetic, split_inductive, Graph, Split};
use crate::train::{train_full, TrainConfig, Trained};

/// A seeded synthetic graph plus its inductive split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub nodes: usize,
    pub classes: usize,
    pub dim: usize,
    pub homophily: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Scenario {
    /// 1000 nodes, 4 classes, 32 features, homophily 0.9, 20% labeled, 10% validation.
    pub fn reference(seed: u64) -> Self {
        Self {
            nodes: 1000,
            classes: 4,
            dim: 32,
            homophily: 0.9,
            train_frac: 0.2,
            val_frac: 0.1,
            seed,
        }
    }

    pub fn build(&self) -> Result<(Graph, Split)> {
        let g = generate_synthetic(self.nodes, self.classes, self.dim, self.homophily, self.seed)?;
        let split = split_inductive(&g, self.seed, self.train_frac, self.val_frac)?;
        Ok((g, split))
    }

    pub fn poisoned(&self, recipe: &AttackRecipe) -> Result<Poisoned> {
        let (g, split) = self.build()?;
        run_attack(&g, &split, recipe)
    }
}

/// Trains on a poisoned bundle and evaluates against its ledger. The config
/// is echoed into the report.
pub fn train_and_evaluate(p: &Poisoned, cfg: &TrainConfig) -> Result<(Trained, EvalReport)> {
    let trained = train_full(&p.graph, &p.split, cfg)?;
    let report = evaluate(
        &trained.model,
        &p.graph,
        &p.split,
        Some(&p.ledger),
        serde_json::to_value(cfg)?,
    )?;
    Ok((trained, report))
}
