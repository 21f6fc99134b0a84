//! Neighbor mutual-information estimation and the diversity losses built on it.
//!
//! Each expert `k` routed to node `v` yields a *logic vector*: one JSD-style MI
//! estimate per neighbor `u`, scoring the expert's first-layer representation
//! of `u` against its aggregated representation of `v` with a shared
//! discriminator `T`. Experts whose logic vectors point the same way are
//! penalized by a cosine hinge.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Neighbors};
use crate::model::{ExpertPass, GraphView, MoeModel, NamedTensor};
use crate::tensor::{func, Matrix, Segment, Tape, Var};

/// Two-layer scorer `T(h_u, h_v) = relu([h_u, h_v] W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MiDiscriminator {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DiscVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl MiDiscriminator {
    /// Glorot-initialized weights, zero biases.
    pub fn new(rep_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |r: usize, c: usize| {
            let limit = (6.0 / (r + c) as f64).sqrt();
            let data = (0..r * c).map(|_| rng.random_range(-limit..limit)).collect();
            Matrix::from_vec(r, c, data).expect("glorot shape")
        };
        Self {
            w1: glorot(2 * rep_dim, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: glorot(hidden, 1),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn rep_dim(&self) -> usize {
        self.w1.rows() / 2
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn named_params(&self) -> Vec<NamedTensor> {
        ["w1", "b1", "w2", "b2"]
            .iter()
            .zip(self.params())
            .map(|(n, m)| NamedTensor::new(format!("disc.{n}"), m))
            .collect()
    }

    pub fn from_named(params: &[NamedTensor]) -> Result<Self> {
        let get = |n: &str| {
            params
                .iter()
                .find(|t| t.name == format!("disc.{n}"))
                .ok_or_else(|| Error::contract(format!("missing tensor disc.{n}")))?
                .to_matrix()
        };
        Ok(Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        DiscVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    /// Scores each row of a `P x 2h` input, giving a `P x 1` column.
    pub fn score(tape: &mut Tape, vars: &DiscVars, input: Var) -> Result<Var> {
        let z = tape.matmul(input, vars.w1)?;
        let z = tape.add_bias(z, vars.b1)?;
        let z = tape.relu(z);
        let z = tape.matmul(z, vars.w2)?;
        tape.add_bias(z, vars.b2)
    }
}

/// JSD mutual-information estimate from discriminator scores:
/// `mean(-sp(-T_joint)) - mean(sp(T_marginal))`.
pub fn jsd_estimate(joint: &[f64], marginal: &[f64]) -> Result<f64> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(Error::contract("MI estimate needs non-empty joint and marginal pairs"));
    }
    let pos = joint.iter().map(|&t| -func::softplus(-t)).sum::<f64>() / joint.len() as f64;
    let neg = marginal.iter().map(|&t| func::softplus(t)).sum::<f64>() / marginal.len() as f64;
    Ok(pos - neg)
}

/// Per-node hinge over pairwise cosine similarity of logic vectors.
///
/// `per_node[v]` holds the vectors of the experts selected for `v`;
/// `k` is the number of selected experts used in the normalizer.
pub fn logic_diversity_value(per_node: &[Vec<Vec<f64>>], margin: f64, k: usize) -> f64 {
    if k < 2 || per_node.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for vecs in per_node {
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                total += (func::cosine_sim(&vecs[i], &vecs[j]) - margin).max(0.0);
            }
        }
    }
    2.0 * total / (per_node.len() * k * (k - 1)) as f64
}

/// Decision-logic vector of expert `expert` at node `node`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicVector {
    pub node: usize,
    pub expert: usize,
    /// `(neighbor, mi)` in ascending neighbor order.
    pub entries: Vec<(usize, f64)>,
}

impl LogicVector {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.1).collect()
    }
}

/// Representations of one expert restricted to a node subset.
#[derive(Clone, Debug)]
pub struct ExpertReps {
    pub expert: usize,
    /// Center nodes, ascending; index rows of `aggregated`.
    pub rows: Arc<Vec<usize>>,
    /// Nodes indexing rows of `hidden`, ascending; superset of every neighbor of `rows`.
    pub support: Arc<Vec<usize>>,
    pub hidden: Var,
    pub aggregated: Var,
}

impl From<&ExpertPass> for ExpertReps {
    fn from(p: &ExpertPass) -> Self {
        Self {
            expert: p.expert,
            rows: Arc::clone(&p.rows),
            support: Arc::clone(&p.support),
            hidden: p.hidden,
            aggregated: p.aggregated,
        }
    }
}

/// Full-graph representations of every expert in the final layer, for the
/// variant that diversifies all `N` experts instead of the selected `K`.
pub fn all_expert_reps(
    tape: &mut Tape,
    model_vars: &crate::model::ModelVars,
    view: &GraphView,
    final_input: Var,
) -> Result<Vec<ExpertReps>> {
    let all = Arc::new((0..view.num_nodes).collect::<Vec<_>>());
    let ah = tape.spmm(&view.adj, final_input)?;
    let layer = model_vars.layers.last().expect("at least one layer");
    layer
        .experts
        .iter()
        .enumerate()
        .map(|(k, ev)| {
            let pre = tape.matmul(ah, ev.w1)?;
            let hidden = tape.relu(pre);
            let aggregated = tape.spmm(&view.adj, hidden)?;
            Ok(ExpertReps {
                expert: k,
                rows: Arc::clone(&all),
                support: Arc::clone(&all),
                hidden,
                aggregated,
            })
        })
        .collect()
}

/// Joint and rotated-marginal pair indices of one expert.
#[derive(Clone, Debug)]
struct PairSet {
    /// Index into `support` for each pair's neighbor.
    nbr_idx: Arc<Vec<usize>>,
    /// Index into `rows` for each pair's center.
    ctr_idx: Arc<Vec<usize>>,
    /// Center index of the marginal (negative) pair.
    marg_idx: Arc<Vec<usize>>,
    /// Graph node id of each pair's neighbor.
    nbr_node: Vec<usize>,
    /// `(center node, first pair, degree)` for non-isolated centers.
    blocks: Vec<(usize, usize, usize)>,
}

impl PairSet {
    fn len(&self) -> usize {
        self.nbr_idx.len()
    }
}

fn build_pairs(reps: &ExpertReps, nbrs: &Neighbors, rotation: u64) -> Result<PairSet> {
    let mut nbr_idx = Vec::new();
    let mut ctr_idx = Vec::new();
    let mut nbr_node = Vec::new();
    let mut blocks = Vec::new();
    for (ci, &v) in reps.rows.iter().enumerate() {
        let ns = nbrs.of(v);
        if ns.is_empty() {
            continue;
        }
        blocks.push((v, nbr_idx.len(), ns.len()));
        for &u in ns {
            let si = reps
                .support
                .binary_search(&u)
                .map_err(|_| Error::contract(format!("neighbor {u} of {v} missing from support")))?;
            nbr_idx.push(si);
            ctr_idx.push(ci);
            nbr_node.push(u);
        }
    }
    let p = ctr_idx.len();
    let shift = if p > 1 { 1 + (rotation as usize) % (p - 1) } else { 0 };
    let marg_idx = (0..p).map(|i| ctr_idx[(i + shift) % p]).collect();
    Ok(PairSet {
        nbr_idx: Arc::new(nbr_idx),
        ctr_idx: Arc::new(ctr_idx),
        marg_idx: Arc::new(marg_idx),
        nbr_node,
        blocks,
    })
}

/// First-layer pre-activations split by input half: `[h_u, h_v] W1` equals
/// `h_u W1_top + h_v W1_bottom`, so each half is projected once per row and
/// gathered per pair instead of projecting every concatenated pair.
struct Projected {
    nbr: Var,
    ctr: Var,
}

fn project(tape: &mut Tape, disc: &DiscVars, hidden: Var, aggregated: Var) -> Result<Projected> {
    let h = tape.value(hidden).cols();
    let top = tape.gather_rows(disc.w1, Arc::new((0..h).collect()))?;
    let bottom = tape.gather_rows(disc.w1, Arc::new((h..2 * h).collect()))?;
    Ok(Projected {
        nbr: tape.matmul(hidden, top)?,
        ctr: tape.matmul(aggregated, bottom)?,
    })
}

fn pair_scores(
    tape: &mut Tape,
    disc: &DiscVars,
    proj: &Projected,
    nbr: &Arc<Vec<usize>>,
    ctr: &Arc<Vec<usize>>,
) -> Result<Var> {
    tape.pair_mlp(
        proj.nbr,
        proj.ctr,
        Arc::clone(nbr),
        Arc::clone(ctr),
        disc.b1,
        disc.w2,
        disc.b2,
    )
}

/// Per-pair estimates `-sp(-T_joint)` shifted by the batch-mean `sp(T_marginal)`,
/// plus the pieces needed to assemble the MI objective.
struct ExpertEstimates {
    pairs: PairSet,
    /// `P x 1` joint terms `-sp(-T_joint)`.
    pos: Var,
    /// `1 x 1` mean of `sp(T_marginal)`.
    neg_mean: Var,
}

fn estimates(
    tape: &mut Tape,
    disc: &DiscVars,
    hidden: Var,
    aggregated: Var,
    pairs: PairSet,
) -> Result<ExpertEstimates> {
    let proj = project(tape, disc, hidden, aggregated)?;
    let joint = pair_scores(tape, disc, &proj, &pairs.nbr_idx, &pairs.ctr_idx)?;
    let marg = pair_scores(tape, disc, &proj, &pairs.nbr_idx, &pairs.marg_idx)?;
    let neg = tape.scale(joint, -1.0);
    let sp = tape.softplus(neg);
    let pos = tape.scale(sp, -1.0);
    let msp = tape.softplus(marg);
    let neg_mean = tape.mean(msp);
    Ok(ExpertEstimates { pairs, pos, neg_mean })
}

/// Configuration of the diversity objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicConfig {
    pub margin: f64,
    /// Let the MI objective update expert weights and the diversity objective
    /// update the discriminator (one joint gradient) instead of separating them.
    pub joint_grad: bool,
}

impl Default for LogicConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            joint_grad: false,
        }
    }
}

/// Scalars produced by [`diversity_terms`].
#[derive(Clone, Debug)]
pub struct DiversityTerms {
    /// Negated neighbor-averaged MI estimate.
    pub mi: Var,
    /// Cosine hinge over selected expert pairs; `None` when fewer than two
    /// experts are selected per node.
    pub logic: Option<Var>,
    /// Discriminator leaves that receive the MI gradient.
    pub disc: DiscVars,
}

/// Builds the MI and logic-diversity objectives for the given expert
/// representations. `k` is the per-node expert count in the normalizer and
/// `num_nodes` the batch size `|V|`.
#[allow(clippy::too_many_arguments)]
pub fn diversity_terms(
    tape: &mut Tape,
    disc: &MiDiscriminator,
    reps: &[ExpertReps],
    nbrs: &Neighbors,
    num_nodes: usize,
    k: usize,
    cfg: &LogicConfig,
    rotation: u64,
) -> Result<DiversityTerms> {
    let disc_train = disc.bind(tape, true);
    let disc_frozen = if cfg.joint_grad {
        disc_train
    } else {
        disc.bind(tape, false)
    };

    let mut measured = Vec::with_capacity(reps.len());
    let mut live = Vec::with_capacity(reps.len());
    for r in reps {
        let pairs = build_pairs(r, nbrs, rotation)?;
        if pairs.len() == 0 {
            continue;
        }
        if cfg.joint_grad {
            let e = estimates(tape, &disc_train, r.hidden, r.aggregated, pairs)?;
            live.push((r.expert, e.pos, e.neg_mean, e.pairs.clone()));
            measured.push(e);
        } else {
            let hd = tape.detach(r.hidden);
            let ad = tape.detach(r.aggregated);
            measured.push(estimates(tape, &disc_train, hd, ad, pairs.clone())?);
            let e = estimates(tape, &disc_frozen, r.hidden, r.aggregated, pairs)?;
            live.push((r.expert, e.pos, e.neg_mean, e.pairs));
        }
    }

    let mi = mi_objective(tape, &measured, num_nodes)?;
    let logic = if k < 2 {
        None
    } else {
        Some(logic_objective(tape, &live, num_nodes, k, cfg.margin)?)
    };
    Ok(DiversityTerms {
        mi,
        logic,
        disc: disc_train,
    })
}

/// `-(1/|V'|) Σ_v (1/|N(v)|) Σ_u Î(u; v)`, averaged over the experts at `v`.
fn mi_objective(tape: &mut Tape, est: &[ExpertEstimates], num_nodes: usize) -> Result<Var> {
    let mut experts_at = vec![0usize; num_nodes];
    for e in est {
        for &(v, _, _) in &e.pairs.blocks {
            experts_at[v] += 1;
        }
    }
    let active = experts_at.iter().filter(|&&c| c > 0).count();
    if active == 0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let mut total: Option<Var> = None;
    for e in est {
        let mut w = vec![0.0; e.pairs.len()];
        for &(v, start, deg) in &e.pairs.blocks {
            let wv = 1.0 / (active * experts_at[v] * deg) as f64;
            w[start..start + deg].iter_mut().for_each(|x| *x = wv);
        }
        let mass: f64 = w.iter().sum();
        let pos = tape.weighted_sum(e.pos, Arc::new(w))?;
        let neg = tape.scale(e.neg_mean, mass);
        let term = tape.sub(pos, neg)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), -1.0))
}

fn logic_objective(
    tape: &mut Tape,
    live: &[(usize, Var, Var, PairSet)],
    num_nodes: usize,
    k: usize,
    margin: f64,
) -> Result<Var> {
    if live.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    // Logic entries of every expert stacked into one column.
    let mut parts = Vec::with_capacity(live.len());
    let mut base = Vec::with_capacity(live.len());
    let mut offset = 0;
    for (_, pos, neg_mean, pairs) in live {
        let shift = tape.scale(*neg_mean, -1.0);
        parts.push(tape.add_bias(*pos, shift)?);
        base.push(offset);
        offset += pairs.len();
    }
    let stacked = tape.concat_rows(&parts)?;

    // Per node: (expert slot, absolute offset, degree), slots ascending.
    let mut at: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_nodes];
    let mut deg = vec![0usize; num_nodes];
    for (slot, (_, _, _, pairs)) in live.iter().enumerate() {
        for &(v, start, d) in &pairs.blocks {
            at[v].push((slot, base[slot] + start));
            deg[v] = d;
        }
    }
    let mut segs = Vec::new();
    for (v, list) in at.iter().enumerate() {
        for i in 0..list.len() {
            for j in i + 1..list.len() {
                segs.push(Segment {
                    a: list[i].1,
                    b: list[j].1,
                    len: deg[v],
                });
            }
        }
    }
    if segs.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let cos = tape.segment_cosine(stacked, Arc::new(segs))?;
    let shifted = tape.add_scalar(cos, -margin);
    let hinge = tape.relu(shifted);
    let total = tape.sum(hinge);
    Ok(tape.scale(total, 2.0 / (num_nodes * k * (k - 1)) as f64))
}

/// Logic vectors of every (node, selected expert) pair in the final layer,
/// ordered by node then expert. Isolated nodes yield empty vectors.
pub fn logic_vectors(
    disc: &MiDiscriminator,
    model: &MoeModel,
    g: &Graph,
    rotation: u64,
    all_experts: bool,
) -> Result<Vec<LogicVector>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, crate::model::Trainable::NONE);
    let x = tape.constant(g.features().clone());
    let view = GraphView::new(g);
    let pass = model.forward(&mut tape, &vars, &view, x)?;
    let reps: Vec<ExpertReps> = if all_experts {
        all_expert_reps(&mut tape, &vars, &view, pass.last().input)?
    } else {
        pass.last().experts.iter().map(ExpertReps::from).collect()
    };
    let dv = disc.bind(&mut tape, false);
    let mut out = Vec::new();
    for r in &reps {
        let pairs = build_pairs(r, &view.nbrs, rotation)?;
        let empty: Vec<LogicVector> = r
            .rows
            .iter()
            .filter(|&&v| view.nbrs.of(v).is_empty())
            .map(|&v| LogicVector {
                node: v,
                expert: r.expert,
                entries: Vec::new(),
            })
            .collect();
        out.extend(empty);
        if pairs.len() == 0 {
            continue;
        }
        let e = estimates(&mut tape, &dv, r.hidden, r.aggregated, pairs)?;
        let pos = tape.value(e.pos).data().to_vec();
        let nm = tape.value(e.neg_mean).item();
        for &(v, start, d) in &e.pairs.blocks {
            out.push(LogicVector {
                node: v,
                expert: r.expert,
                entries: (start..start + d).map(|p| (e.pairs.nbr_node[p], pos[p] - nm)).collect(),
            });
        }
    }
    out.sort_by_key(|l| (l.node, l.expert));
    Ok(out)
}

/// Logic vector of one (node, expert) pair; errors if the expert is not
/// selected for the node.
pub fn logic_vector(
    disc: &MiDiscriminator,
    model: &MoeModel,
    g: &Graph,
    v: usize,
    k: usize,
    rotation: u64,
) -> Result<LogicVector> {
    logic_vectors(disc, model, g, rotation, false)?
        .into_iter()
        .find(|l| l.node == v && l.expert == k)
        .ok_or_else(|| Error::contract(format!("expert {k} is not selected for node {v}")))
}

/// Nodes within `hops` of `v`, excluding `v`, ascending.
fn khop(nbrs: &Neighbors, v: usize, hops: usize, n: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; n];
    dist[v] = 0;
    let mut q = VecDeque::from([v]);
    while let Some(x) = q.pop_front() {
        if dist[x] == hops {
            continue;
        }
        for &u in nbrs.of(x) {
            if dist[u] == usize::MAX {
                dist[u] = dist[x] + 1;
                q.push_back(u);
            }
        }
    }
    (0..n).filter(|&u| u != v && dist[u] != usize::MAX).collect()
}

/// Contrastive representation-diversity loss over each expert's routed nodes:
/// `-log Σ_{j∈N(v)} e^{sim(z_v,z_j)} / Σ_{k∉N(v)} e^{sim(z_v,z_k)}`, with the
/// neighborhood taken within `hops` and restricted to the expert's batch.
/// Centers lacking either a neighbor or a non-neighbor in the batch are skipped.
pub fn representation_diversity(
    tape: &mut Tape,
    reps: &[ExpertReps],
    nbrs: &Neighbors,
    num_nodes: usize,
    hops: usize,
) -> Result<Var> {
    let mut terms = Vec::new();
    for r in reps {
        let m = r.rows.len();
        let mut pos = Matrix::zeros(m, m);
        let mut neg = Matrix::zeros(m, m);
        let mut keep = Vec::new();
        for (i, &v) in r.rows.iter().enumerate() {
            let near = khop(nbrs, v, hops, num_nodes);
            let (mut np, mut nn) = (0, 0);
            for (j, &u) in r.rows.iter().enumerate() {
                if i == j {
                    continue;
                }
                if near.binary_search(&u).is_ok() {
                    pos.set(i, j, 1.0);
                    np += 1;
                } else {
                    neg.set(i, j, 1.0);
                    nn += 1;
                }
            }
            if np > 0 && nn > 0 {
                keep.push(i);
            }
        }
        if keep.is_empty() {
            continue;
        }
        let keep = Arc::new(keep);
        let z = tape.gather_rows(r.aggregated, Arc::new((0..m).collect()))?;
        let zn = tape.row_normalize(z);
        let zt = tape.transpose(zn);
        let sim = tape.matmul(zn, zt)?;
        let e = tape.exp(sim);
        let pm = tape.constant(pos);
        let nm = tape.constant(neg);
        let ep = tape.mul(e, pm)?;
        let en = tape.mul(e, nm)?;
        let num = tape.sum_rows(ep);
        let den = tape.sum_rows(en);
        let num = tape.gather_rows(num, Arc::clone(&keep))?;
        let den = tape.gather_rows(den, Arc::clone(&keep))?;
        let ln = tape.log(num);
        let ld = tape.log(den);
        terms.push(tape.sub(ld, ln)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let all = tape.concat_rows(&terms)?;
    Ok(tape.mean(all))
}
