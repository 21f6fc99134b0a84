//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. Node
//! ids are assigned in creation order, which is a topological order, so
//! [`Tape::backward`] walks the nodes once in exact reverse order. The tape is
//! rebuilt for every training step.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::func::{self, NORM_EPS};
use crate::tensor::{Matrix, SparseMatrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Supervision target for [`Tape::cross_entropy`].
#[derive(Clone, Debug)]
pub enum Target {
    /// One class index per selected row.
    Hard(Vec<usize>),
    /// One probability row per selected row.
    Soft(Matrix),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedSoftmax(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterRows(Var, Arc<Vec<usize>>),
    Column(Var, usize),
    MulCol(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    WeightedSum(Var, Arc<Vec<f64>>),
    CrossEntropy {
        logits: Var,
        rows: Arc<Vec<usize>>,
        target: Arc<Target>,
    },
    SegmentCosine(Var, Arc<Vec<Segment>>),
    CvSquared(Var),
    LoadBalance(Var, Arc<Vec<f64>>),
    RowNormalize(Var),
    PairMlp(Box<PairMlpArgs>),
}

#[derive(Clone, Debug)]
struct PairMlpArgs {
    left: Var,
    right: Var,
    li: Arc<Vec<usize>>,
    ri: Arc<Vec<usize>>,
    bias: Var,
    w: Var,
    b: Var,
}

impl PairMlpArgs {
    /// Hidden pre-activation of pair `p`.
    fn pre(&self, tape: &Tape, p: usize, out: &mut [f64]) {
        let (l, r, bias) = (tape.value(self.left), tape.value(self.right), tape.value(self.bias));
        for (((o, x), y), c) in out
            .iter_mut()
            .zip(l.row(self.li[p]))
            .zip(r.row(self.ri[p]))
            .zip(bias.data())
        {
            *o = x + y + c;
        }
    }
}

/// Pair of equal-length slices `[a, a+len)` and `[b, b+len)` of a flattened value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub a: usize,
    pub b: usize,
    pub len: usize,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Sparse-dense product; the sparse operand is constant.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, d: Var) -> Result<Var> {
        let value = s.spmm(self.value(d))?;
        let rg = self.rg(d);
        Ok(self.push(value, Op::SpMM(Arc::clone(s), d), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `m + bias` with a `1 x c` bias broadcast over rows.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (mv, bv) = (self.value(m), self.value(bias));
        if bv.rows() != 1 || bv.cols() != mv.cols() {
            return Err(Error::dim("add_bias", format!("{:?} + {:?}", mv.shape(), bv.shape())));
        }
        let mut value = mv.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(m) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(m, bias), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(func::softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = func::softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(&func::log_softmax(src.row(r)));
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row softmax restricted to entries where `mask` is set; the rest are exactly 0.
    /// Every row must keep at least one entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(Error::dim("masked_softmax", "mask size"));
        }
        let c = src.cols();
        let mut value = Matrix::zeros(src.rows(), c);
        for r in 0..src.rows() {
            let m = &mask[r * c..(r + 1) * c];
            let row = src.row(r);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!("row {r} has no selected entry")));
            }
            let out = value.row_mut(r);
            let mut total = 0.0;
            for j in 0..c {
                if m[j] {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskedSoftmax(a), rg))
    }

    /// Scores index pairs with a one-hidden-layer MLP whose first layer is
    /// already applied per row: `relu(left[li[p]] + right[ri[p]] + bias) w + b`.
    /// Gives a `P x 1` column without materializing the `P x d` hidden layer.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_mlp(
        &mut self,
        left: Var,
        right: Var,
        li: Arc<Vec<usize>>,
        ri: Arc<Vec<usize>>,
        bias: Var,
        w: Var,
        b: Var,
    ) -> Result<Var> {
        let (lv, rv) = (self.value(left), self.value(right));
        let d = lv.cols();
        let shapes_ok = rv.cols() == d
            && self.value(bias).shape() == (1, d)
            && self.value(w).shape() == (d, 1)
            && self.value(b).shape() == (1, 1)
            && li.len() == ri.len();
        if !shapes_ok {
            return Err(Error::dim("pair_mlp", "operand shapes"));
        }
        if li.iter().any(|&i| i >= lv.rows()) || ri.iter().any(|&i| i >= rv.rows()) {
            return Err(Error::dim("pair_mlp", "pair index out of range"));
        }
        let args = PairMlpArgs {
            left,
            right,
            li,
            ri,
            bias,
            w,
            b,
        };
        let (wv, b0) = (self.value(w).data(), self.value(b).item());
        let mut out = vec![0.0; args.li.len()];
        par::for_each_chunk(&mut out, 1, args.li.len() * d, |p, o| {
            let mut z = vec![0.0; d];
            args.pre(self, p, &mut z);
            o[0] = z.iter().zip(wv).map(|(x, y)| x.max(0.0) * y).sum::<f64>() + b0;
        });
        let value = Matrix::column(out);
        let rg = [left, right, bias, w, b].iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::PairMlp(Box::new(args)), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {}", src.rows())));
        }
        let value = src.select_rows(&idx);
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, idx), rg))
    }

    /// Places row `i` of `a` at row `idx[i]` of an `n`-row zero matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, n: usize) -> Result<Var> {
        let src = self.value(a);
        if idx.len() != src.rows() || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim("scatter_rows", "index list"));
        }
        let mut value = Matrix::zeros(n, src.cols());
        for (i, &t) in idx.iter().enumerate() {
            value.row_mut(t).copy_from_slice(src.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::ScatterRows(a, idx), rg))
    }

    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        let src = self.value(a);
        if c >= src.cols() {
            return Err(Error::dim("column", format!("{c} of {}", src.cols())));
        }
        let value = Matrix::column((0..src.rows()).map(|r| src.get(r, c)).collect());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Column(a, c), rg))
    }

    /// Scales row `r` of `m` by `col[r]` (`col` is `n x 1`).
    pub fn mul_col(&mut self, m: Var, col: Var) -> Result<Var> {
        let (mv, cv) = (self.value(m), self.value(col));
        if cv.cols() != 1 || cv.rows() != mv.rows() {
            return Err(Error::dim("mul_col", format!("{:?} * {:?}", mv.shape(), cv.shape())));
        }
        let mut value = mv.clone();
        for r in 0..value.rows() {
            let k = cv.data()[r];
            value.row_mut(r).iter_mut().for_each(|x| *x *= k);
        }
        let rg = self.rg(m) || self.rg(col);
        Ok(self.push(value, Op::MulCol(m, col), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let mut value = Matrix::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let out = value.row_mut(r);
            out[..av.cols()].copy_from_slice(av.row(r));
            out[av.cols()..].copy_from_slice(bv.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Matrix::column((0..src.rows()).map(|r| src.row(r).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = vec![0.0; src.cols()];
        for r in 0..src.rows() {
            for (o, x) in out.iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        let value = Matrix::from_vec(1, src.cols(), out).expect("row shape");
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    /// `Σ w_i a_i` over the flattened value.
    pub fn weighted_sum(&mut self, a: Var, w: Arc<Vec<f64>>) -> Result<Var> {
        let src = self.value(a);
        if w.len() != src.len() {
            return Err(Error::dim("weighted_sum", "weight count"));
        }
        let value = Matrix::scalar(src.data().iter().zip(w.iter()).map(|(x, k)| x * k).sum());
        let rg = self.rg(a);
        Ok(self.push(value, Op::WeightedSum(a, w), rg))
    }

    /// Mean cross-entropy of `logits[rows[i]]` against `target` row `i`.
    /// An empty row set yields 0.
    pub fn cross_entropy(&mut self, logits: Var, rows: Arc<Vec<usize>>, target: Target) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        match &target {
            Target::Hard(labels) => {
                if labels.len() != rows.len() {
                    return Err(Error::dim("cross_entropy", "label count"));
                }
                if let Some(&l) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::contract(format!("label {l} out of range for {c} classes")));
                }
            }
            Target::Soft(t) => {
                if t.rows() != rows.len() || t.cols() != c {
                    return Err(Error::dim("cross_entropy", "soft target shape"));
                }
            }
        }
        if rows.iter().any(|&r| r >= lv.rows()) {
            return Err(Error::dim("cross_entropy", "row index"));
        }
        let mut total = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let ls = func::log_softmax(lv.row(r));
            total -= match &target {
                Target::Hard(labels) => ls[labels[i]],
                Target::Soft(t) => t.row(i).iter().zip(&ls).map(|(a, b)| a * b).sum(),
            };
        }
        let value = Matrix::scalar(if rows.is_empty() {
            0.0
        } else {
            total / rows.len() as f64
        });
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                rows,
                target: Arc::new(target),
            },
            rg,
        ))
    }

    /// Cosine similarity of each segment pair of the flattened value, as a `P x 1` column.
    pub fn segment_cosine(&mut self, a: Var, segs: Arc<Vec<Segment>>) -> Result<Var> {
        let src = self.value(a).data();
        if segs.iter().any(|s| s.a + s.len > src.len() || s.b + s.len > src.len()) {
            return Err(Error::dim("segment_cosine", "segment out of range"));
        }
        let value = Matrix::column(
            segs.iter()
                .map(|s| func::cosine_sim(&src[s.a..s.a + s.len], &src[s.b..s.b + s.len]))
                .collect(),
        );
        let rg = self.rg(a);
        Ok(self.push(value, Op::SegmentCosine(a, segs), rg))
    }

    /// Squared coefficient of variation (population variance over squared mean).
    pub fn cv_squared(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).data();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        if x.is_empty() || mean == 0.0 {
            return Err(Error::contract("cv_squared of zero-mean input"));
        }
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let rg = self.rg(a);
        Ok(self.push(Matrix::scalar(var / (mean * mean)), Op::CvSquared(a), rg))
    }

    /// `N Σ I_k L_k / (Σ I)(Σ L)` with constant loads `L`.
    pub fn load_balance(&mut self, importance: Var, load: Arc<Vec<f64>>) -> Result<Var> {
        let x = self.value(importance).data();
        if x.len() != load.len() {
            return Err(Error::dim("load_balance", "expert count"));
        }
        let (si, sl) = (x.iter().sum::<f64>(), load.iter().sum::<f64>());
        if si == 0.0 || sl == 0.0 {
            return Err(Error::contract("load_balance with zero total"));
        }
        let dot: f64 = x.iter().zip(load.iter()).map(|(a, b)| a * b).sum();
        let n = x.len() as f64;
        let rg = self.rg(importance);
        Ok(self.push(
            Matrix::scalar(n * dot / (si * sl)),
            Op::LoadBalance(importance, load),
            rg,
        ))
    }

    /// Rows scaled to unit L2 norm; near-zero rows map to zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize(a), rg)
    }

    /// Gradients of the scalar `root` with respect to every node that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward from non-scalar node of shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // Only leaf gradients are reported; interior ones are dropped early.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, m: Matrix| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], m);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, g.matmul_t(bv));
                }
                if self.rg(*b) {
                    send(*b, av.t_matmul(g));
                }
            }
            Op::SpMM(s, d) => send(*d, s.t_spmm(g)),
            Op::Add(a, b) => {
                if self.rg(*a) {
                    send(*a, g.clone());
                }
                if self.rg(*b) {
                    send(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    send(*a, g.clone());
                }
                if self.rg(*b) {
                    send(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, g.zip_map(bv, |x, y| x * y));
                }
                if self.rg(*b) {
                    send(*b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Scale(a, k) => send(*a, g.map(|x| x * k)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::AddBias(m, b) => {
                if self.rg(*m) {
                    send(*m, g.clone());
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (o, x) in gb.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    send(*b, Matrix::from_vec(1, g.cols(), gb).expect("bias shape"));
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                send(*a, g.zip_map(av, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Exp(a) => send(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => send(*a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Softplus(a) => send(*a, g.zip_map(self.value(*a), |x, y| x * func::sigmoid(y))),
            Op::SoftmaxRows(a) | Op::MaskedSoftmax(a) => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &p), &q) in da.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                send(*a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for ((d, &ls), &q) in da.row_mut(r).iter_mut().zip(out.row(r)).zip(gr) {
                        *d = q - ls.exp() * total;
                    }
                }
                send(*a, da);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for (d, x) in da.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                send(*a, da);
            }
            Op::ScatterRows(a, idx) => send(*a, g.select_rows(idx)),
            Op::Column(a, c) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    da.set(r, *c, g.data()[r]);
                }
                send(*a, da);
            }
            Op::MulCol(m, col) => {
                let (mv, cv) = (self.value(*m), self.value(*col));
                if self.rg(*m) {
                    let mut dm = g.clone();
                    for r in 0..dm.rows() {
                        let k = cv.data()[r];
                        dm.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    send(*m, dm);
                }
                if self.rg(*col) {
                    let dc = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(mv.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*col, Matrix::column(dc));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Matrix::zeros(g.rows(), ca);
                let mut db = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    let slice = g.data()[start * c..(start + r) * c].to_vec();
                    send(p, Matrix::from_vec(r, c, slice).expect("slice shape"));
                    start += r;
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let k = g.data()[i];
                    da.row_mut(i).iter_mut().for_each(|x| *x = k);
                }
                send(*a, da);
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    da.row_mut(i).copy_from_slice(g.data());
                }
                send(*a, da);
            }
            Op::WeightedSum(a, w) => {
                let (r, c) = self.value(*a).shape();
                let k = g.item();
                let data = w.iter().map(|x| x * k).collect();
                send(*a, Matrix::from_vec(r, c, data).expect("weight shape"));
            }
            Op::CrossEntropy { logits, rows, target } => {
                if rows.is_empty() {
                    return;
                }
                let lv = self.value(*logits);
                let mut da = Matrix::zeros(lv.rows(), lv.cols());
                let k = g.item() / rows.len() as f64;
                for (i, &r) in rows.iter().enumerate() {
                    let p = func::softmax(lv.row(r));
                    let d = da.row_mut(r);
                    match target.as_ref() {
                        Target::Hard(labels) => {
                            for (j, (dj, pj)) in d.iter_mut().zip(&p).enumerate() {
                                let t = if j == labels[i] { 1.0 } else { 0.0 };
                                *dj += k * (pj - t);
                            }
                        }
                        Target::Soft(t) => {
                            // d/dz of -Σ t log softmax(z) is softmax(z) Σt - t.
                            let tr = t.row(i);
                            let ts: f64 = tr.iter().sum();
                            for ((dj, pj), tj) in d.iter_mut().zip(&p).zip(tr) {
                                *dj += k * (pj * ts - tj);
                            }
                        }
                    }
                }
                send(*logits, da);
            }
            Op::PairMlp(args) => {
                let d = self.value(args.left).cols();
                let wv = self.value(args.w).data();
                let mut dl = Matrix::zeros(self.value(args.left).rows(), d);
                let mut dr = Matrix::zeros(self.value(args.right).rows(), d);
                let mut dbias = vec![0.0; d];
                let mut dw = vec![0.0; d];
                let mut z = vec![0.0; d];
                let mut dz = vec![0.0; d];
                for (p, &gp) in g.data().iter().enumerate() {
                    args.pre(self, p, &mut z);
                    for j in 0..d {
                        let on = z[j] > 0.0;
                        dz[j] = if on { gp * wv[j] } else { 0.0 };
                        dw[j] += if on { gp * z[j] } else { 0.0 };
                        dbias[j] += dz[j];
                    }
                    for (o, x) in dl.row_mut(args.li[p]).iter_mut().zip(&dz) {
                        *o += x;
                    }
                    for (o, x) in dr.row_mut(args.ri[p]).iter_mut().zip(&dz) {
                        *o += x;
                    }
                }
                let db: f64 = g.data().iter().sum();
                if self.rg(args.left) {
                    send(args.left, dl);
                }
                if self.rg(args.right) {
                    send(args.right, dr);
                }
                if self.rg(args.bias) {
                    send(args.bias, Matrix::from_vec(1, d, dbias).expect("bias shape"));
                }
                if self.rg(args.w) {
                    send(args.w, Matrix::column(dw));
                }
                if self.rg(args.b) {
                    send(args.b, Matrix::scalar(db));
                }
            }
            Op::SegmentCosine(a, segs) => {
                let av = self.value(*a);
                let src = av.data();
                let mut da = vec![0.0; src.len()];
                for (s, &gk) in segs.iter().zip(g.data()) {
                    let x = &src[s.a..s.a + s.len];
                    let y = &src[s.b..s.b + s.len];
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nx < NORM_EPS || ny < NORM_EPS || gk == 0.0 {
                        continue;
                    }
                    let cos = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
                    for j in 0..s.len {
                        da[s.a + j] += gk * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                        da[s.b + j] += gk * (x[j] / (nx * ny) - cos * y[j] / (ny * ny));
                    }
                }
                send(*a, Matrix::from_vec(av.rows(), av.cols(), da).expect("shape"));
            }
            Op::CvSquared(a) => {
                let av = self.value(*a);
                let x = av.data();
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let k = g.item();
                let data = x
                    .iter()
                    .map(|v| k * (2.0 * (v - mean) / (n * mean * mean) - 2.0 * var / (n * mean.powi(3))))
                    .collect();
                send(*a, Matrix::from_vec(av.rows(), av.cols(), data).expect("shape"));
            }
            Op::LoadBalance(a, load) => {
                let av = self.value(*a);
                let x = av.data();
                let n = x.len() as f64;
                let si: f64 = x.iter().sum();
                let sl: f64 = load.iter().sum();
                let dot: f64 = x.iter().zip(load.iter()).map(|(p, q)| p * q).sum();
                let k = g.item();
                let data = load.iter().map(|l| k * n / sl * (l * si - dot) / (si * si)).collect();
                send(*a, Matrix::from_vec(av.rows(), av.cols(), data).expect("shape"));
            }
            Op::RowNormalize(a) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let norm = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm < NORM_EPS {
                        continue;
                    }
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &yj), &gj) in da.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = (gj - yj * dot) / norm;
                    }
                }
                send(*a, da);
            }
        }
    }
}
