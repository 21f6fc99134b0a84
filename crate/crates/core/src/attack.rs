//! Desk-scale poisoning simulators: a subgraph-trigger backdoor, random or
//! greedy edge flipping, and heuristic node injection. Every attack is a pure
//! function of its inputs and returns a ledger that undoes it exactly.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttackKind, Graph, Perturbation, PoisonLedger, Split, TriggerPattern};
use crate::par;
use crate::tensor::{func, AdamConfig, AdamState, Matrix, Tape, Target};

/// Largest supported trigger subgraph.
pub const MAX_TRIGGER_SIZE: usize = 16;
/// Random flips scored per greedy step.
pub const GREEDY_POOL: usize = 200;
/// Quantile of clean `|x|` used as the trigger feature magnitude.
pub const TRIGGER_QUANTILE: f64 = 0.95;
/// Multiple of the class-mean offset subtracted from injected features.
pub const INJECTION_SCALE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    Random,
    Greedy,
}

impl std::str::FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "greedy" => Ok(Self::Greedy),
            other => Err(Error::contract(format!("unknown edge mode {other:?}"))),
        }
    }
}

/// Declarative description of one poisoning transformation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecipe {
    pub kind: AttackKind,
    /// Backdoor: hosts as a fraction of all nodes. Edge: flips as a fraction of `|E|`.
    pub rate: f64,
    pub trigger_size: usize,
    pub target_class: usize,
    pub seed: u64,
    pub mode: EdgeMode,
    pub inject_count: usize,
    pub edges_per_node: usize,
}

impl Default for AttackRecipe {
    fn default() -> Self {
        Self {
            kind: AttackKind::Backdoor,
            rate: 0.05,
            trigger_size: 3,
            target_class: 0,
            seed: 0,
            mode: EdgeMode::Greedy,
            inject_count: 50,
            edges_per_node: 8,
        }
    }
}

impl AttackRecipe {
    pub fn backdoor(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn edge(rate: f64, mode: EdgeMode, seed: u64) -> Self {
        Self {
            kind: AttackKind::Edge,
            rate,
            mode,
            seed,
            ..Self::default()
        }
    }

    pub fn inject(count: usize, edges_per_node: usize, seed: u64) -> Self {
        Self {
            kind: AttackKind::Inject,
            inject_count: count,
            edges_per_node,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, g: &Graph) -> Result<()> {
        let rate_used = matches!(self.kind, AttackKind::Backdoor | AttackKind::Edge);
        if rate_used && !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::contract(format!("rate {} outside (0, 1]", self.rate)));
        }
        if self.kind == AttackKind::Backdoor {
            if self.trigger_size == 0 || self.trigger_size > MAX_TRIGGER_SIZE {
                return Err(Error::contract(format!(
                    "trigger size {} outside 1..={MAX_TRIGGER_SIZE}",
                    self.trigger_size
                )));
            }
            if self.target_class >= g.num_classes() {
                return Err(Error::contract(format!(
                    "target class {} but graph has {} classes",
                    self.target_class,
                    g.num_classes()
                )));
            }
        }
        Ok(())
    }
}

/// Poisoned graph, its split, and the ground truth needed to undo it.
#[derive(Clone, Debug, PartialEq)]
pub struct Poisoned {
    pub graph: Graph,
    pub split: Split,
    pub ledger: PoisonLedger,
}

/// Dispatches on `recipe.kind`.
pub fn run_attack(g: &Graph, split: &Split, recipe: &AttackRecipe) -> Result<Poisoned> {
    match recipe.kind {
        AttackKind::Backdoor => backdoor_attack(g, split, recipe),
        AttackKind::Edge => edge_manipulation(g, split, recipe),
        AttackKind::Inject => node_injection(g, split, recipe),
    }
}

fn quantile_abs(m: &Matrix, q: f64) -> f64 {
    let mut v: Vec<f64> = m.data().iter().map(|x| x.abs()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx]
}

/// Appends one trigger subgraph per host: clique edges among the trigger
/// nodes plus one edge from the host to the first of them.
fn append_triggers(g: &Graph, hosts: &[usize], pattern: &TriggerPattern) -> Result<(Graph, Vec<usize>)> {
    let s = pattern.size;
    let base = g.num_nodes();
    let count = hosts.len() * s;
    let mut data = Vec::with_capacity(count * pattern.features.len());
    for _ in 0..count {
        data.extend_from_slice(&pattern.features);
    }
    let feats = Matrix::from_vec(count, pattern.features.len(), data)?;
    let mut edges = Vec::with_capacity(hosts.len() * (s * (s - 1) / 2 + 1));
    for (i, &h) in hosts.iter().enumerate() {
        let first = base + i * s;
        edges.push((h, first));
        for a in 0..s {
            for b in a + 1..s {
                edges.push((first + a, first + b));
            }
        }
    }
    let labels = vec![pattern.target_class; count];
    Ok((
        g.with_appended(&feats, &labels, &edges)?,
        (base..base + count).collect(),
    ))
}

/// Selects `max(1, ⌊rate·|V|⌋)` hosts from `V_L ∪ V_U`, attaches a trigger
/// subgraph to each, and relabels them to the target class. Unlabeled hosts
/// join the labeled set so the poisoned labels reach training.
pub fn backdoor_attack(g: &Graph, split: &Split, recipe: &AttackRecipe) -> Result<Poisoned> {
    recipe.validate(g)?;
    split.validate(g.num_nodes())?;
    let candidates = split.labeled_and_unlabeled();
    let n_hosts = ((recipe.rate * g.num_nodes() as f64).floor() as usize).max(1);
    if n_hosts > candidates.len() {
        return Err(Error::contract(format!(
            "{n_hosts} hosts requested but only {} labeled or unlabeled nodes",
            candidates.len()
        )));
    }
    let magnitude = quantile_abs(g.features(), TRIGGER_QUANTILE);
    if !(magnitude > 0.0) {
        return Err(Error::contract("all-zero features cannot carry a trigger"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let signs: Vec<f64> = (0..g.feature_dim())
        .map(|_| if rng.random::<bool>() { magnitude } else { -magnitude })
        .collect();
    let pattern = TriggerPattern {
        size: recipe.trigger_size,
        target_class: recipe.target_class,
        features: signs,
    };
    let mut pool = candidates;
    pool.shuffle(&mut rng);
    let mut hosts: Vec<usize> = pool[..n_hosts].to_vec();
    hosts.sort_unstable();

    let (appended, triggers) = append_triggers(g, &hosts, &pattern)?;
    let mut labels = appended.labels().to_vec();
    let mut ledger = PoisonLedger::new(AttackKind::Backdoor, g.num_nodes());
    for &h in &hosts {
        ledger.relabeled.push((h, labels[h]));
        labels[h] = recipe.target_class;
    }
    let graph = appended.with_labels(labels)?;

    let mut out = split.clone();
    let promoted: Vec<usize> = hosts
        .iter()
        .copied()
        .filter(|h| split.unlabeled.binary_search(h).is_ok())
        .collect();
    out.unlabeled.retain(|v| promoted.binary_search(v).is_err());
    out.train.extend(&promoted);
    out.train.sort_unstable();

    ledger.promoted = promoted;
    ledger.injected = triggers.clone();
    ledger.poisoned = hosts.iter().chain(&triggers).copied().collect();
    ledger.perturbations = hosts
        .iter()
        .map(|&h| (h, Perturbation::Host))
        .chain(triggers.iter().map(|&t| (t, Perturbation::Trigger)))
        .collect();
    ledger.trigger = Some(pattern);
    Ok(Poisoned {
        graph,
        split: out,
        ledger,
    })
}

/// Evaluation graph: every ASR-test node receives the ledger's trigger.
/// Labels are untouched.
pub fn attach_test_triggers(g: &Graph, split: &Split, ledger: &PoisonLedger) -> Result<Graph> {
    let pattern = ledger
        .trigger
        .as_ref()
        .ok_or_else(|| Error::contract("ledger carries no backdoor trigger"))?;
    if pattern.features.len() != g.feature_dim() {
        return Err(Error::dim("attach_test_triggers", "trigger width"));
    }
    Ok(append_triggers(g, &split.asr_test, pattern)?.0)
}

/// Linearized two-layer GCN `softmax(Â Â X W)` the attacker trains on the
/// labeled nodes and uses to score perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub weights: Matrix,
}

const SURROGATE_EPOCHS: usize = 200;
const SURROGATE_LR: f64 = 0.05;

impl Surrogate {
    pub fn fit(g: &Graph, train: &[usize], seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::contract("surrogate needs labeled nodes"));
        }
        let adj = g.normalized_adjacency();
        let s = adj.spmm(&adj.spmm(g.features())?)?;
        let mut w = crate::model::glorot(&mut ChaCha8Rng::seed_from_u64(seed), g.feature_dim(), g.num_classes());
        let mut adam = AdamState::new(
            AdamConfig {
                lr: SURROGATE_LR,
                weight_decay: 5e-4,
                ..AdamConfig::default()
            },
            vec![&w],
        );
        let rows = Arc::new(train.to_vec());
        let labels: Vec<usize> = train.iter().map(|&v| g.labels()[v]).collect();
        for _ in 0..SURROGATE_EPOCHS {
            let mut tape = Tape::new();
            let x = tape.constant(s.clone());
            let wv = tape.param(w.clone());
            let z = tape.matmul(x, wv)?;
            let loss = tape.cross_entropy(z, Arc::clone(&rows), Target::Hard(labels.clone()))?;
            let grads = tape.backward(loss)?;
            adam.step(&mut [&mut w], &[grads.get(wv)])?;
        }
        Ok(Self { weights: w })
    }

    pub fn logits(&self, g: &Graph) -> Result<Matrix> {
        let adj = g.normalized_adjacency();
        adj.spmm(&adj.spmm(&g.features().matmul(&self.weights)?)?)
    }

    pub fn accuracy(&self, g: &Graph, nodes: &[usize]) -> Result<f64> {
        let z = self.logits(g)?;
        crate::eval::accuracy_of(&z, g.labels(), nodes)
    }
}

/// Surrogate state that scores a single edge flip by recomputing only the
/// rows it can reach (two hops), never the whole graph.
struct LocalGcn<'a> {
    nbrs: Vec<BTreeSet<usize>>,
    xw: Matrix,
    q: Matrix,
    z: Matrix,
    labels: &'a [usize],
    is_train: Vec<bool>,
}

impl<'a> LocalGcn<'a> {
    fn new(g: &'a Graph, sur: &Surrogate, train: &[usize]) -> Result<Self> {
        let nbrs = (0..g.num_nodes())
            .map(|v| g.neighbors(v).into_iter().collect())
            .collect();
        let mut is_train = vec![false; g.num_nodes()];
        train.iter().for_each(|&v| is_train[v] = true);
        let xw = g.features().matmul(&sur.weights)?;
        let mut s = Self {
            nbrs,
            q: xw.clone(),
            z: xw.clone(),
            xw,
            labels: g.labels(),
            is_train,
        };
        s.refresh();
        Ok(s)
    }

    fn weight(deg_i: usize, deg_j: usize) -> f64 {
        1.0 / (((deg_i + 1) * (deg_j + 1)) as f64).sqrt()
    }

    /// Degree and neighbor membership with the flip `(u, v)` applied virtually.
    fn deg(&self, x: usize, flip: Option<(usize, usize, bool)>) -> usize {
        let d = self.nbrs[x].len();
        match flip {
            Some((u, v, present)) if x == u || x == v => {
                if present {
                    d - 1
                } else {
                    d + 1
                }
            }
            _ => d,
        }
    }

    fn neighbors(&self, x: usize, flip: Option<(usize, usize, bool)>) -> Vec<usize> {
        let mut ns: Vec<usize> = self.nbrs[x].iter().copied().collect();
        if let Some((u, v, present)) = flip {
            let other = if x == u {
                Some(v)
            } else if x == v {
                Some(u)
            } else {
                None
            };
            if let Some(o) = other {
                if present {
                    ns.retain(|&y| y != o);
                } else {
                    let at = ns.partition_point(|&y| y < o);
                    ns.insert(at, o);
                }
            }
        }
        ns
    }

    /// `Σ_{j ∈ N(x) ∪ {x}} w(x, j) src(j)`, ascending `j`.
    fn propagate_row(&self, x: usize, flip: Option<(usize, usize, bool)>, src: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
        let dx = self.deg(x, flip);
        let mut ns = self.neighbors(x, flip);
        let at = ns.partition_point(|&y| y < x);
        ns.insert(at, x);
        let mut out = vec![0.0; self.xw.cols()];
        for j in ns {
            let w = Self::weight(dx, self.deg(j, flip));
            for (o, s) in out.iter_mut().zip(src(j)) {
                *o += w * s;
            }
        }
        out
    }

    fn refresh(&mut self) {
        let n = self.nbrs.len();
        let q: Vec<Vec<f64>> = (0..n)
            .map(|x| self.propagate_row(x, None, |j| self.xw.row(j).to_vec()))
            .collect();
        self.q = Matrix::from_rows(&q);
        let z: Vec<Vec<f64>> = (0..n)
            .map(|x| self.propagate_row(x, None, |j| self.q.row(j).to_vec()))
            .collect();
        self.z = Matrix::from_rows(&z);
    }

    fn ce(&self, logits: &[f64], v: usize) -> f64 {
        func::cross_entropy(logits, self.labels[v]).expect("label in range")
    }

    /// Change in summed training cross-entropy if `(u, v)` were flipped.
    fn delta(&self, u: usize, v: usize) -> f64 {
        let present = self.nbrs[u].contains(&v);
        let flip = Some((u, v, present));
        let mut a1: BTreeSet<usize> = [u, v].into_iter().collect();
        a1.extend(self.nbrs[u].iter().copied());
        a1.extend(self.nbrs[v].iter().copied());
        let q_new: Vec<(usize, Vec<f64>)> = a1
            .iter()
            .map(|&x| (x, self.propagate_row(x, flip, |j| self.xw.row(j).to_vec())))
            .collect();
        let q_at = |j: usize| match q_new.binary_search_by_key(&j, |(x, _)| *x) {
            Ok(i) => q_new[i].1.clone(),
            Err(_) => self.q.row(j).to_vec(),
        };
        let mut a2 = a1.clone();
        for &x in &a1 {
            a2.extend(self.neighbors(x, flip));
        }
        a2.iter()
            .filter(|&&t| self.is_train[t])
            .map(|&t| {
                let z_new = self.propagate_row(t, flip, q_at);
                self.ce(&z_new, t) - self.ce(self.z.row(t), t)
            })
            .sum()
    }

    fn apply(&mut self, u: usize, v: usize) {
        if !self.nbrs[u].remove(&v) {
            self.nbrs[u].insert(v);
            self.nbrs[v].insert(u);
        } else {
            self.nbrs[v].remove(&u);
        }
        self.refresh();
    }
}

fn draw_pair(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    loop {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            return (a.min(b), a.max(b));
        }
    }
}

/// Flips `⌊rate·|E|⌋` node pairs. `Random` draws distinct pairs uniformly;
/// `Greedy` repeatedly takes, from a fresh pool of random candidates, the
/// flip that most increases a surrogate's training loss (ties go to the
/// earliest candidate).
pub fn edge_manipulation(g: &Graph, split: &Split, recipe: &AttackRecipe) -> Result<Poisoned> {
    recipe.validate(g)?;
    split.validate(g.num_nodes())?;
    let n = g.num_nodes();
    let budget = (recipe.rate * g.num_edges() as f64).floor() as usize;
    let available = n * n.saturating_sub(1) / 2;
    if budget > available {
        return Err(Error::contract(format!(
            "{budget} flips requested, {available} pairs exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut chosen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut flips = Vec::with_capacity(budget);
    match recipe.mode {
        EdgeMode::Random => {
            while flips.len() < budget {
                let p = draw_pair(&mut rng, n);
                if chosen.insert(p) {
                    flips.push(p);
                }
            }
        }
        EdgeMode::Greedy => {
            let sur = Surrogate::fit(g, &split.train, recipe.seed)?;
            let mut local = LocalGcn::new(g, &sur, &split.train)?;
            for _ in 0..budget {
                let remaining = available - chosen.len();
                let mut pool = Vec::with_capacity(GREEDY_POOL.min(remaining));
                let mut seen = BTreeSet::new();
                while pool.len() < GREEDY_POOL.min(remaining) {
                    let p = draw_pair(&mut rng, n);
                    if !chosen.contains(&p) && seen.insert(p) {
                        pool.push(p);
                    }
                }
                let gains = par::map_indices(pool.len(), |i| local.delta(pool[i].0, pool[i].1));
                let mut best = 0;
                for (i, &gain) in gains.iter().enumerate() {
                    if gain > gains[best] {
                        best = i;
                    }
                }
                let (u, v) = pool[best];
                local.apply(u, v);
                chosen.insert((u, v));
                flips.push((u, v));
            }
        }
    }
    let graph = g.with_flipped(&flips)?;
    let mut ledger = PoisonLedger::new(AttackKind::Edge, n);
    let endpoints: BTreeSet<usize> = flips.iter().flat_map(|&(u, v)| [u, v]).collect();
    ledger.poisoned = endpoints.iter().copied().collect();
    ledger.perturbations = endpoints.iter().map(|&v| (v, Perturbation::FlippedEndpoint)).collect();
    ledger.flipped_edges = flips;
    Ok(Poisoned {
        graph,
        split: split.clone(),
        ledger,
    })
}

/// Injects labeled fake nodes. Each is wired to `edges_per_node` targets taken
/// in ascending (degree, id) order, carries the feature mean pushed against
/// its targets' predicted class means, and is labeled with the surrogate's
/// second most likely class averaged over its targets.
pub fn node_injection(g: &Graph, split: &Split, recipe: &AttackRecipe) -> Result<Poisoned> {
    recipe.validate(g)?;
    split.validate(g.num_nodes())?;
    let n = g.num_nodes();
    let (m, e) = (recipe.inject_count, recipe.edges_per_node);
    let mut ledger = PoisonLedger::new(AttackKind::Inject, n);
    if m == 0 {
        return Ok(Poisoned {
            graph: g.clone(),
            split: split.clone(),
            ledger,
        });
    }
    if e == 0 || e > n {
        return Err(Error::contract(format!("edges per node {e} outside 1..={n}")));
    }
    if g.num_classes() < 2 {
        return Err(Error::contract("injection labels need at least two classes"));
    }

    let sur = Surrogate::fit(g, &split.train, recipe.seed)?;
    let probs = func::softmax_rows(&sur.logits(g)?);
    let predicted: Vec<usize> = (0..n).map(|v| probs.argmax_row(v)).collect();

    let dim = g.feature_dim();
    let x = g.features();
    let mut mean = vec![0.0; dim];
    for v in 0..n {
        mean.iter_mut().zip(x.row(v)).for_each(|(a, b)| *a += b / n as f64);
    }
    // Class means from the attacker's labeled nodes.
    let c = g.num_classes();
    let mut class_mean = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for &v in &split.train {
        let l = g.labels()[v];
        counts[l] += 1;
        class_mean[l].iter_mut().zip(x.row(v)).for_each(|(a, b)| *a += b);
    }
    for (cm, &k) in class_mean.iter_mut().zip(&counts) {
        if k > 0 {
            cm.iter_mut().for_each(|a| *a /= k as f64);
        } else {
            cm.clone_from(&mean);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| (g.degree(v), v));

    let mut feats = Vec::with_capacity(m * dim);
    let mut labels = Vec::with_capacity(m);
    let mut edges = Vec::with_capacity(m * e);
    let mut targets_all = BTreeSet::new();
    for i in 0..m {
        let id = n + i;
        let targets: Vec<usize> = (0..e).map(|j| order[(i * e + j) % n]).collect();
        let mut dir = vec![0.0; dim];
        let mut avg = vec![0.0; c];
        for &t in &targets {
            for (d, (a, b)) in dir.iter_mut().zip(class_mean[predicted[t]].iter().zip(&mean)) {
                *d += (a - b) / e as f64;
            }
            avg.iter_mut().zip(probs.row(t)).for_each(|(a, p)| *a += p / e as f64);
            edges.push((t, id));
            targets_all.insert(t);
        }
        feats.extend(mean.iter().zip(&dir).map(|(mu, d)| mu - INJECTION_SCALE * d));
        labels.push(second_most_likely(&avg));
    }
    let graph = g.with_appended(&Matrix::from_vec(m, dim, feats)?, &labels, &edges)?;
    let injected: Vec<usize> = (n..n + m).collect();
    let mut out = split.clone();
    out.train.extend(&injected);

    ledger.poisoned = injected.clone();
    ledger.perturbations = targets_all
        .iter()
        .map(|&t| (t, Perturbation::InjectionTarget))
        .chain(injected.iter().map(|&v| (v, Perturbation::Injected)))
        .collect();
    ledger.injected = injected;
    Ok(Poisoned {
        graph,
        split: out,
        ledger,
    })
}

/// Index of the second largest entry; ties go to the lower index.
fn second_most_likely(p: &[f64]) -> usize {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx[1]
}

#[cfg(test)]
mod tests;
