use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Neighbors};
use crate::model::gate::{self, GateAssignment};
use crate::par;
use crate::tensor::{func, Matrix, SparseMatrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Number of stacked GraphMoE layers; experts inside are 2-layer GCNs.
    pub n_layers: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(in_dim: usize, num_classes: usize) -> Self {
        Self {
            in_dim,
            hidden: 32,
            num_classes,
            n_experts: 12,
            top_k: 2,
            n_layers: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::contract(format!(
                "top_k {} must be in 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if self.n_layers == 0 || self.hidden == 0 || self.in_dim == 0 || self.num_classes == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        Ok(())
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        let input = if l == 0 { self.in_dim } else { self.hidden };
        let output = if l + 1 == self.n_layers {
            self.num_classes
        } else {
            self.hidden
        };
        (input, output)
    }
}

/// Two-layer GCN without bias: `A · relu(A · H · W1) · W2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnExpert {
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Two-layer GCN emitting one logit per expert, plus the top-K count.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingNetwork {
    pub w1: Matrix,
    pub w2: Matrix,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub experts: Vec<GcnExpert>,
    pub gate: GatingNetwork,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub config: ModelConfig,
    pub layers: Vec<MoeLayer>,
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("glorot shape")
}

/// Adjacency data shared by every forward pass on one graph.
#[derive(Clone, Debug)]
pub struct GraphView {
    pub adj: Arc<SparseMatrix>,
    pub nbrs: Arc<Neighbors>,
    pub num_nodes: usize,
}

impl GraphView {
    pub fn new(g: &Graph) -> Self {
        Self {
            adj: g.normalized_adjacency(),
            nbrs: g.adjacency_lists(),
            num_nodes: g.num_nodes(),
        }
    }

    /// Sorted union of the closed neighborhoods of `rows`.
    pub fn support(&self, rows: &[usize]) -> Vec<usize> {
        let mut mark = vec![false; self.num_nodes];
        for &v in rows {
            mark[v] = true;
            for &u in self.nbrs.of(v) {
                mark[u] = true;
            }
        }
        (0..self.num_nodes).filter(|&i| mark[i]).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub w1: Var,
    pub w2: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub experts: Vec<ExpertVars>,
    pub gate_w1: Var,
    pub gate_w2: Var,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<LayerVars>,
}

impl ModelVars {
    /// Expert weights in [`MoeModel::expert_params_mut`] order.
    pub fn expert_vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| l.experts.iter().flat_map(|e| [e.w1, e.w2]))
            .collect()
    }

    /// Gate weights in [`MoeModel::gate_params_mut`] order.
    pub fn gate_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.gate_w1, l.gate_w2]).collect()
    }
}

/// Which parameter groups receive gradients on a bound tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub experts: bool,
    pub gate: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        experts: true,
        gate: true,
    };
    pub const NONE: Self = Self {
        experts: false,
        gate: false,
    };
    pub const GATE_ONLY: Self = Self {
        experts: false,
        gate: true,
    };
}

/// One expert's computation restricted to the nodes routed to it.
#[derive(Clone, Debug)]
pub struct ExpertPass {
    pub expert: usize,
    /// Routed nodes `R_k`, ascending.
    pub rows: Arc<Vec<usize>>,
    /// Closed neighborhood of `rows`, ascending; indexes `hidden`.
    pub support: Arc<Vec<usize>>,
    /// First-layer representations `relu(A H W1)` of the support nodes.
    pub hidden: Var,
    /// Aggregated second-layer representations of the routed nodes, before `W2`.
    pub aggregated: Var,
    /// Expert output for the routed nodes.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct LayerPass {
    pub input: Var,
    pub gate_logits: Var,
    pub weights: Var,
    pub assignment: GateAssignment,
    pub experts: Vec<ExpertPass>,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub layers: Vec<LayerPass>,
    pub logits: Var,
}

impl ForwardPass {
    pub fn last(&self) -> &LayerPass {
        self.layers.last().expect("at least one layer")
    }
}

impl GcnExpert {
    /// Full-graph forward on the tape: `A · relu(A · H · W1) · W2`.
    pub fn forward(tape: &mut Tape, vars: ExpertVars, adj: &Arc<SparseMatrix>, h: Var) -> Result<Var> {
        let ah = tape.spmm(adj, h)?;
        let pre = tape.matmul(ah, vars.w1)?;
        let hidden = tape.relu(pre);
        let agg = tape.spmm(adj, hidden)?;
        tape.matmul(agg, vars.w2)
    }

    /// Plain full-graph forward given the pre-aggregated input `A · H`.
    pub fn apply(&self, adj: &SparseMatrix, ah: &Matrix) -> Result<Matrix> {
        let hidden = ah.matmul(&self.w1)?.map(|x| x.max(0.0));
        adj.spmm(&hidden)?.matmul(&self.w2)
    }
}

impl MoeModel {
    /// Glorot-uniform initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = (0..config.n_layers)
            .map(|l| {
                let (din, dout) = config.layer_dims(l);
                let experts = (0..config.n_experts)
                    .map(|_| GcnExpert {
                        w1: glorot(&mut rng, din, config.hidden),
                        w2: glorot(&mut rng, config.hidden, dout),
                    })
                    .collect();
                let gate = GatingNetwork {
                    w1: glorot(&mut rng, din, config.hidden),
                    w2: glorot(&mut rng, config.hidden, config.n_experts),
                    top_k: config.top_k,
                };
                MoeLayer { experts, gate }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn n_experts(&self) -> usize {
        self.config.n_experts
    }

    pub fn top_k(&self) -> usize {
        self.config.top_k
    }

    pub fn expert_params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.experts.iter_mut().flat_map(|e| [&mut e.w1, &mut e.w2]))
            .collect()
    }

    pub fn gate_params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.gate.w1, &mut l.gate.w2])
            .collect()
    }

    pub fn expert_params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| l.experts.iter().flat_map(|e| [&e.w1, &e.w2]))
            .collect()
    }

    pub fn gate_params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.gate.w1, &l.gate.w2]).collect()
    }

    /// Registers every weight on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> ModelVars {
        let mut leaf = |m: &Matrix, train: bool| {
            if train {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                experts: l
                    .experts
                    .iter()
                    .map(|e| ExpertVars {
                        w1: leaf(&e.w1, trainable.experts),
                        w2: leaf(&e.w2, trainable.experts),
                    })
                    .collect(),
                gate_w1: leaf(&l.gate.w1, trainable.gate),
                gate_w2: leaf(&l.gate.w2, trainable.gate),
            })
            .collect();
        ModelVars { layers }
    }

    /// Sparse top-K forward. Each expert runs only on the nodes routed to it
    /// (and the one-hop support it needs); outputs are mixed by the gate
    /// weights in ascending expert order.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, view: &GraphView, x: Var) -> Result<ForwardPass> {
        self.forward_noisy(tape, vars, view, x, &[])
    }

    /// [`forward`](Self::forward) with constant offsets added to the gate
    /// logits of each layer before top-K selection (training-time
    /// exploration). Layers without an entry get none.
    pub fn forward_noisy(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        view: &GraphView,
        x: Var,
        gate_noise: &[Matrix],
    ) -> Result<ForwardPass> {
        let n = view.num_nodes;
        if tape.value(x).rows() != n {
            return Err(Error::dim("MoeModel::forward", "feature rows vs graph nodes"));
        }
        let mut h = x;
        let mut passes = Vec::with_capacity(self.layers.len());
        for (l, lv) in vars.layers.iter().enumerate() {
            let ah = tape.spmm(&view.adj, h)?;

            let g_pre = tape.matmul(ah, lv.gate_w1)?;
            let g_hidden = tape.relu(g_pre);
            let g_agg = tape.spmm(&view.adj, g_hidden)?;
            let mut gate_logits = tape.matmul(g_agg, lv.gate_w2)?;
            if let Some(noise) = gate_noise.get(l) {
                let c = tape.constant(noise.clone());
                gate_logits = tape.add(gate_logits, c)?;
            }
            let (assignment, mask) = gate::assign(tape.value(gate_logits), self.config.top_k)?;
            let weights = tape.masked_softmax(gate_logits, mask)?;
            let assignment = assignment.with_weights(tape.value(weights).clone());

            let mut experts = Vec::new();
            let mut mixed: Option<Var> = None;
            for (k, ev) in lv.experts.iter().enumerate() {
                let rows = assignment.routed_to(k);
                if rows.is_empty() {
                    continue;
                }
                let support = view.support(&rows);
                let mut col_map = vec![None; n];
                for (i, &s) in support.iter().enumerate() {
                    col_map[s] = Some(i);
                }
                let sub = Arc::new(view.adj.submatrix(&rows, &col_map, support.len()));
                let rows = Arc::new(rows);
                let support = Arc::new(support);

                let ah_s = tape.gather_rows(ah, Arc::clone(&support))?;
                let pre = tape.matmul(ah_s, ev.w1)?;
                let hidden = tape.relu(pre);
                let aggregated = tape.spmm(&sub, hidden)?;
                let output = tape.matmul(aggregated, ev.w2)?;

                let wcol = tape.column(weights, k)?;
                let wk = tape.gather_rows(wcol, Arc::clone(&rows))?;
                let scaled = tape.mul_col(output, wk)?;
                let placed = tape.scatter_rows(scaled, Arc::clone(&rows), n)?;
                mixed = Some(match mixed {
                    Some(acc) => tape.add(acc, placed)?,
                    None => placed,
                });
                experts.push(ExpertPass {
                    expert: k,
                    rows,
                    support,
                    hidden,
                    aggregated,
                    output,
                });
            }
            let mut output = mixed.expect("every node selects at least one expert");
            if l + 1 < vars.layers.len() {
                output = tape.relu(output);
            }
            passes.push(LayerPass {
                input: h,
                gate_logits,
                weights,
                assignment,
                experts,
                output,
            });
            h = output;
        }
        Ok(ForwardPass {
            layers: passes,
            logits: h,
        })
    }

    /// Forward without gradients, returning the final logits and pass record.
    pub fn forward_detached(&self, g: &Graph) -> Result<(Tape, ForwardPass)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Trainable::NONE);
        let x = tape.constant(g.features().clone());
        let pass = self.forward(&mut tape, &vars, &GraphView::new(g), x)?;
        Ok((tape, pass))
    }

    /// Class probabilities: softmax of the mixed final-layer outputs.
    pub fn predict(&self, g: &Graph) -> Result<Matrix> {
        let (tape, pass) = self.forward_detached(g)?;
        Ok(func::softmax_rows(tape.value(pass.logits)))
    }

    /// Gate assignment of the final layer on `g`.
    pub fn gate_assignment(&self, g: &Graph) -> Result<GateAssignment> {
        let (_, pass) = self.forward_detached(g)?;
        Ok(pass.last().assignment.clone())
    }

    /// Input to the final GraphMoE layer.
    fn final_input(&self, g: &Graph) -> Result<Matrix> {
        if self.layers.len() == 1 {
            return Ok(g.features().clone());
        }
        let (tape, pass) = self.forward_detached(g)?;
        Ok(tape.value(pass.last().input).clone())
    }

    /// Raw output of every final-layer expert on every node.
    pub fn per_expert_logits(&self, g: &Graph) -> Result<Vec<Matrix>> {
        let h = self.final_input(g)?;
        let adj = g.normalized_adjacency();
        let ah = adj.spmm(&h)?;
        let layer = self.layers.last().expect("at least one layer");
        par::map_indices(layer.experts.len(), |k| layer.experts[k].apply(&adj, &ah))
            .into_iter()
            .collect()
    }

    /// Standalone softmax prediction of every final-layer expert.
    pub fn per_expert_predictions(&self, g: &Graph) -> Result<Vec<Matrix>> {
        Ok(self.per_expert_logits(g)?.iter().map(func::softmax_rows).collect())
    }
}
