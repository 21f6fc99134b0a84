//! Two-phase training: experts, gate and discriminator jointly, then the
//! gate alone against disagreement-derived soft labels.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::logic::{self, ExpertReps, LogicConfig, MiDiscriminator};
use crate::model::{Checkpoint, GraphView, ModelConfig, MoeModel, Trainable};
use crate::router::{self, DisagreementReport};
use crate::tensor::{AdamConfig, AdamState, Matrix, Tape, Target, Var};

/// Losses above this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Which diversity regularizer joins the phase-1 objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diversity {
    /// MI-based decision-logic diversity.
    Logic,
    /// Contrastive representation diversity, as an ablation baseline.
    Representation,
    None,
}

impl std::str::FromStr for Diversity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logic" => Ok(Self::Logic),
            "representation" => Ok(Self::Representation),
            "none" => Ok(Self::None),
            other => Err(Error::contract(format!("unknown diversity mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub n_layers: usize,
    /// Weight of the diversity loss.
    pub lambda: f64,
    /// Weight of the clean-node term in the router objective.
    pub gamma: f64,
    pub margin: f64,
    /// Shrinkage on the predicted class of soft labels.
    pub rho: f64,
    pub epochs: usize,
    pub router_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight shared by the importance and load balancing losses.
    pub aux_weight: f64,
    pub diversity: Diversity,
    pub router_finetune: bool,
    pub joint_mi_grad: bool,
    /// Diversify all experts at every node rather than the selected ones.
    pub logic_all_experts: bool,
    /// Hop radius of the representation-diversity positives.
    pub ed_hops: usize,
    /// Standard deviation of Gaussian exploration noise on the phase-1 gate
    /// logits; 0 disables it.
    #[serde(default)]
    pub gate_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_experts: 12,
            top_k: 2,
            hidden: 32,
            n_layers: 1,
            lambda: 0.05,
            gamma: 0.25,
            margin: 0.3,
            rho: 0.5,
            epochs: 200,
            router_epochs: 100,
            lr: 0.01,
            weight_decay: 5e-4,
            seed: 0,
            aux_weight: 0.01,
            diversity: Diversity::Logic,
            router_finetune: true,
            joint_mi_grad: false,
            logic_all_experts: false,
            ed_hops: 2,
            gate_noise: 0.0,
        }
    }
}

impl TrainConfig {
    /// Plain sparse MoE: no diversity term, no router fine-tuning.
    pub fn vanilla() -> Self {
        Self {
            lambda: 0.0,
            diversity: Diversity::None,
            router_finetune: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(m.to_string()));
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad("top_k must lie in 1..=n_experts");
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.aux_weight >= 0.0) {
            return bad("lambda, gamma and aux_weight must be non-negative");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("rho must lie in (0, 1]");
        }
        if self.epochs == 0 || (self.router_finetune && self.router_epochs == 0) {
            return bad("epoch counts must be positive");
        }
        if !(self.gate_noise >= 0.0) || !self.gate_noise.is_finite() {
            return bad("gate_noise must be a finite non-negative value");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if self.hidden == 0 || self.n_layers == 0 {
            return bad("hidden width and layer count must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn logic(&self) -> LogicConfig {
        LogicConfig {
            margin: self.margin,
            joint_grad: self.joint_mi_grad,
        }
    }

    fn uses_disc(&self) -> bool {
        self.diversity == Diversity::Logic && self.lambda > 0.0
    }
}

/// One row of a training trace. Terms not active in a phase are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub moe: f64,
    pub mi: f64,
    pub diversity: f64,
    pub importance: f64,
    pub load: f64,
    pub router: f64,
    pub total: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,epoch,moe,mi,diversity,importance,load,router,total,val_acc\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.phase, r.epoch, r.moe, r.mi, r.diversity, r.importance, r.load, r.router, r.total, r.val_acc
            );
        }
        s
    }
}

fn check_finite(epoch: usize, named: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in named {
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                epoch,
                detail: format!("{name} = {v}"),
            });
        }
    }
    Ok(())
}

fn accuracy(logits: &Matrix, nodes: &[usize], labels: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes.iter().filter(|&&v| logits.argmax_row(v) == labels[v]).count();
    hits as f64 / nodes.len() as f64
}

fn grads_for<'a>(g: &'a crate::tensor::Gradients, vars: &[Var]) -> Vec<Option<&'a Matrix>> {
    vars.iter().map(|&v| g.get(v)).collect()
}

/// Squared coefficient of variation of per-expert importance `I_k`.
pub fn importance_loss(importance: &[f64]) -> Result<f64> {
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    if importance.is_empty() || mean == 0.0 {
        return Err(Error::contract("importance must have a non-zero mean"));
    }
    let var = importance.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(var / (mean * mean))
}

/// `N Σ I_k L_k / (Σ I)(Σ L)` for importance `I` and hard loads `L`.
pub fn load_loss(importance: &[f64], load: &[f64]) -> Result<f64> {
    if importance.len() != load.len() {
        return Err(Error::dim("load_loss", "expert count"));
    }
    let (si, sl) = (importance.iter().sum::<f64>(), load.iter().sum::<f64>());
    if si == 0.0 || sl == 0.0 {
        return Err(Error::contract("load loss with zero total"));
    }
    let dot: f64 = importance.iter().zip(load).map(|(a, b)| a * b).sum();
    Ok(importance.len() as f64 * dot / (si * sl))
}

/// Importance and load balancing losses summed over layers.
fn balance_losses(tape: &mut Tape, pass: &crate::model::ForwardPass) -> Result<(Var, Var)> {
    let mut imp: Option<Var> = None;
    let mut load: Option<Var> = None;
    for lp in &pass.layers {
        let importance = tape.sum_cols(lp.weights);
        let i = tape.cv_squared(importance)?;
        let l = tape.load_balance(importance, Arc::new(lp.assignment.load()))?;
        imp = Some(match imp {
            Some(a) => tape.add(a, i)?,
            None => i,
        });
        load = Some(match load {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok((imp.expect("at least one layer"), load.expect("at least one layer")))
}

/// Phase 1: classification + balancing + diversity, updating experts, gate
/// and discriminator with separate Adam states.
pub fn phase1_train(
    model: &mut MoeModel,
    disc: &mut MiDiscriminator,
    g: &Graph,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    split.validate(g.num_nodes())?;
    if split.train.is_empty() {
        return Err(Error::contract("phase 1 needs labeled training nodes"));
    }
    let view = GraphView::new(g);
    let train = Arc::new(split.train.clone());
    let train_labels: Vec<usize> = split.train.iter().map(|&v| g.labels()[v]).collect();
    let mut theta = AdamState::new(cfg.adam(), model.expert_params());
    let mut phi = AdamState::new(cfg.adam(), model.gate_params());
    let mut omega = AdamState::new(cfg.adam(), disc.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let logic_cfg = cfg.logic();
    let mut trace = TrainTrace::default();

    for epoch in 0..cfg.epochs {
        let rotation = rng.next_u64();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, Trainable::ALL);
        let x = tape.constant(g.features().clone());
        let noise: Vec<Matrix> = if cfg.gate_noise > 0.0 {
            (0..cfg.n_layers)
                .map(|_| {
                    let data = (0..g.num_nodes() * cfg.n_experts)
                        .map(|_| cfg.gate_noise * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Matrix::from_vec(g.num_nodes(), cfg.n_experts, data)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let pass = model.forward_noisy(&mut tape, &vars, &view, x, &noise)?;

        let ce = tape.cross_entropy(pass.logits, Arc::clone(&train), Target::Hard(train_labels.clone()))?;
        let (imp, load) = balance_losses(&mut tape, &pass)?;
        let aux = tape.add(imp, load)?;
        let aux = tape.scale(aux, cfg.aux_weight);
        let mut total = tape.add(ce, aux)?;
        let moe = tape.scalar(total);

        let mut mi_val = 0.0;
        let mut div_val = 0.0;
        let mut disc_vars = None;
        if cfg.lambda > 0.0 && cfg.diversity != Diversity::None {
            let reps: Vec<ExpertReps> = if cfg.logic_all_experts {
                logic::all_expert_reps(&mut tape, &vars, &view, pass.last().input)?
            } else {
                pass.last().experts.iter().map(ExpertReps::from).collect()
            };
            match cfg.diversity {
                Diversity::Logic => {
                    let k = if cfg.logic_all_experts {
                        cfg.n_experts
                    } else {
                        cfg.top_k
                    };
                    let terms = logic::diversity_terms(
                        &mut tape,
                        disc,
                        &reps,
                        &view.nbrs,
                        g.num_nodes(),
                        k,
                        &logic_cfg,
                        rotation,
                    )?;
                    mi_val = tape.scalar(terms.mi);
                    total = tape.add(total, terms.mi)?;
                    if let Some(l) = terms.logic {
                        div_val = tape.scalar(l);
                        let weighted = tape.scale(l, cfg.lambda);
                        total = tape.add(total, weighted)?;
                    }
                    disc_vars = Some(terms.disc);
                }
                Diversity::Representation => {
                    let l = logic::representation_diversity(&mut tape, &reps, &view.nbrs, g.num_nodes(), cfg.ed_hops)?;
                    div_val = tape.scalar(l);
                    let weighted = tape.scale(l, cfg.lambda);
                    total = tape.add(total, weighted)?;
                }
                Diversity::None => unreachable!(),
            }
        }

        let record = EpochRecord {
            phase: 1,
            epoch,
            moe,
            mi: mi_val,
            diversity: div_val,
            importance: tape.scalar(imp),
            load: tape.scalar(load),
            router: 0.0,
            total: tape.scalar(total),
            val_acc: accuracy(tape.value(pass.logits), &split.val, g.labels()),
        };
        check_finite(
            epoch,
            &[
                ("moe", record.moe),
                ("mi", record.mi),
                ("diversity", record.diversity),
                ("importance", record.importance),
                ("load", record.load),
                ("total", record.total),
            ],
        )?;
        trace.records.push(record);

        let grads = tape.backward(total)?;
        theta.step(&mut model.expert_params_mut(), &grads_for(&grads, &vars.expert_vars()))?;
        phi.step(&mut model.gate_params_mut(), &grads_for(&grads, &vars.gate_vars()))?;
        if let Some(dv) = disc_vars {
            omega.step(&mut disc.params_mut(), &grads_for(&grads, &dv.all()))?;
        }
    }
    Ok(trace)
}

/// Scores `V_L ∪ V_U` by expert disagreement and applies the one-sigma rule.
pub fn detect_perturbed(model: &MoeModel, g: &Graph, split: &Split) -> Result<DisagreementReport> {
    let per_expert = model.per_expert_predictions(g)?;
    let nodes = split.labeled_and_unlabeled();
    let all = router::disagreement(&per_expert)?;
    let scores: Vec<f64> = nodes.iter().map(|&v| all[v]).collect();
    router::identify_perturbed(&nodes, &scores)
}

/// Phase 2: flag perturbed nodes once, build soft labels once, then descend
/// the router objective with respect to the gate only.
pub fn phase2_finetune_router(
    model: &mut MoeModel,
    g: &Graph,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<(TrainTrace, DisagreementReport)> {
    cfg.validate()?;
    if model.n_experts() < 2 {
        return Err(Error::contract("router fine-tuning needs at least two experts"));
    }
    let report = detect_perturbed(model, g, split)?;
    let per_expert = model.per_expert_predictions(g)?;
    let soft = router::soft_labels(&per_expert, &report.flagged, cfg.rho)?;
    let clean: Vec<usize> = split.train.iter().copied().filter(|&v| !report.is_flagged(v)).collect();
    let clean_labels: Vec<usize> = clean.iter().map(|&v| g.labels()[v]).collect();
    if soft.is_empty() && clean.is_empty() {
        return Err(Error::contract("no flagged and no clean nodes for the router"));
    }

    let view = GraphView::new(g);
    let mut phi = AdamState::new(cfg.adam(), model.gate_params());
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.router_epochs {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, Trainable::GATE_ONLY);
        let x = tape.constant(g.features().clone());
        let pass = model.forward(&mut tape, &vars, &view, x)?;
        let loss = router::router_loss(&mut tape, pass.logits, &soft, &clean, &clean_labels, cfg.gamma)?;
        let value = tape.scalar(loss);
        check_finite(epoch, &[("router", value)])?;
        trace.records.push(EpochRecord {
            phase: 2,
            epoch,
            moe: 0.0,
            mi: 0.0,
            diversity: 0.0,
            importance: 0.0,
            load: 0.0,
            router: value,
            total: value,
            val_acc: accuracy(tape.value(pass.logits), &split.val, g.labels()),
        });
        let grads = tape.backward(loss)?;
        phi.step(&mut model.gate_params_mut(), &grads_for(&grads, &vars.gate_vars()))?;
    }
    Ok((trace, report))
}

/// Outcome of [`train_full`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub config: TrainConfig,
    pub model: MoeModel,
    pub disc: MiDiscriminator,
    pub phase1: TrainTrace,
    pub phase2: TrainTrace,
    /// Flagged set from phase 2, in the ids of the input graph.
    pub detection: Option<DisagreementReport>,
}

/// Graph seen by training: every node except the held-out test nodes, with
/// the split remapped to the new ids. Returns the kept original ids too.
pub fn training_view(g: &Graph, split: &Split) -> Result<(Graph, Split, Vec<usize>)> {
    split.validate(g.num_nodes())?;
    let test = split.test_nodes();
    let keep: Vec<usize> = (0..g.num_nodes()).filter(|v| test.binary_search(v).is_err()).collect();
    let (tg, map) = g.induced_subgraph(&keep)?;
    Ok((tg, split.remap(&map), keep))
}

fn to_original_ids(mut report: DisagreementReport, keep: &[usize]) -> DisagreementReport {
    report.nodes.iter_mut().for_each(|v| *v = keep[*v]);
    report.flagged.iter_mut().for_each(|v| *v = keep[*v]);
    report
}

/// Disagreement detection as training sees it (test nodes removed), reported
/// in the ids of `g`. Router fine-tuning leaves experts untouched, so this
/// reproduces the phase-2 flagged set from a finished model.
pub fn detect_inductive(model: &MoeModel, g: &Graph, split: &Split) -> Result<DisagreementReport> {
    let (tg, tsplit, keep) = training_view(g, split)?;
    Ok(to_original_ids(detect_perturbed(model, &tg, &tsplit)?, &keep))
}

/// Inductive end-to-end training: both phases on the graph with test nodes removed.
pub fn train_full(g: &Graph, split: &Split, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let (tg, tsplit, keep) = training_view(g, split)?;
    let mut model = MoeModel::new(ModelConfig {
        in_dim: g.feature_dim(),
        hidden: cfg.hidden,
        num_classes: g.num_classes(),
        n_experts: cfg.n_experts,
        top_k: cfg.top_k,
        n_layers: cfg.n_layers,
        seed: cfg.seed,
    })?;
    let mut disc = MiDiscriminator::new(cfg.hidden, cfg.hidden, cfg.seed.wrapping_add(1));
    let phase1 = phase1_train(&mut model, &mut disc, &tg, &tsplit, cfg)?;
    let (phase2, detection) = if cfg.router_finetune {
        let (trace, report) = phase2_finetune_router(&mut model, &tg, &tsplit, cfg)?;
        (trace, Some(to_original_ids(report, &keep)))
    } else {
        (TrainTrace::default(), None)
    };
    Ok(Trained {
        config: cfg.clone(),
        model,
        disc,
        phase1,
        phase2,
        detection,
    })
}

impl Trained {
    /// Checkpoint carrying model and discriminator weights plus the config,
    /// both traces and the detection summary as metadata.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        if self.config.uses_disc() {
            ck.params.extend(self.disc.named_params());
        }
        ck.metadata = serde_json::json!({
            "train_config": self.config,
            "phase1": self.phase1.records,
            "phase2": self.phase2.records,
            "detection": self.detection.as_ref().map(|d| serde_json::json!({
                "mu": d.mu,
                "sigma": d.sigma,
                "threshold": d.threshold,
                "flagged": d.flagged,
            })),
        });
        ck
    }
}

/// Model, discriminator (when stored) and training config from a checkpoint.
pub fn restore(ck: &Checkpoint) -> Result<(MoeModel, Option<MiDiscriminator>, Option<TrainConfig>)> {
    let model = ck.model()?;
    let disc = if ck.params.iter().any(|t| t.name.starts_with("disc.")) {
        Some(MiDiscriminator::from_named(&ck.params)?)
    } else {
        None
    };
    let cfg = ck
        .metadata
        .get("train_config")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()?;
    Ok((model, disc, cfg))
}
