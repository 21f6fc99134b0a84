use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-node top-K expert selection and softmax weights over the survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct GateAssignment {
    n_experts: usize,
    top_k: usize,
    /// `selected[v]`: chosen experts of node `v`, ascending expert index.
    selected: Vec<Vec<usize>>,
    /// Dense `n x N` weights, zero for unselected experts.
    weights: Matrix,
}

impl GateAssignment {
    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn num_nodes(&self) -> usize {
        self.selected.len()
    }

    pub fn selected(&self, v: usize) -> &[usize] {
        &self.selected[v]
    }

    pub fn weight(&self, v: usize, k: usize) -> f64 {
        self.weights.get(v, k)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// Nodes routed to expert `k`, ascending.
    pub fn routed_to(&self, k: usize) -> Vec<usize> {
        (0..self.selected.len())
            .filter(|&v| self.selected[v].binary_search(&k).is_ok())
            .collect()
    }

    /// Hard count of nodes selecting each expert.
    pub fn load(&self) -> Vec<f64> {
        let mut l = vec![0.0; self.n_experts];
        for sel in &self.selected {
            for &k in sel {
                l[k] += 1.0;
            }
        }
        l
    }

    /// Sum of gate weights per expert.
    pub fn importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_experts];
        for v in 0..self.selected.len() {
            for (i, x) in imp.iter_mut().enumerate() {
                *x += self.weights.get(v, i);
            }
        }
        imp
    }

    pub(crate) fn with_weights(mut self, weights: Matrix) -> Self {
        self.weights = weights;
        self
    }
}

/// Mask of the top-`k` entries per row; ties go to the lower index.
pub fn top_k_mask(logits: &Matrix, k: usize) -> Result<(Vec<bool>, Vec<Vec<usize>>)> {
    let n = logits.cols();
    if k == 0 || k > n {
        return Err(Error::contract(format!("top-k {k} outside 1..={n}")));
    }
    let mut mask = vec![false; logits.len()];
    let mut selected = Vec::with_capacity(logits.rows());
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for r in 0..logits.rows() {
        let row = logits.row(r);
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut sel = order[..k].to_vec();
        sel.sort_unstable();
        for &j in &sel {
            mask[r * n + j] = true;
        }
        selected.push(sel);
    }
    Ok((mask, selected))
}

/// Gate assignment from raw logits: top-`k` survivors, softmax over them.
pub fn assign(logits: &Matrix, k: usize) -> Result<(GateAssignment, Arc<Vec<bool>>)> {
    let (mask, selected) = top_k_mask(logits, k)?;
    let n = logits.cols();
    let mut weights = Matrix::zeros(logits.rows(), n);
    for (r, sel) in selected.iter().enumerate() {
        let vals: Vec<f64> = sel.iter().map(|&j| logits.get(r, j)).collect();
        let p = crate::tensor::func::softmax(&vals);
        for (&j, w) in sel.iter().zip(p) {
            weights.set(r, j, w);
        }
    }
    Ok((
        GateAssignment {
            n_experts: n,
            top_k: k,
            selected,
            weights,
        },
        Arc::new(mask),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_two_of_four() {
        let logits = Matrix::from_rows(&[vec![2.0, 1.0, 0.5, -1.0]]);
        let (a, _) = assign(&logits, 2).unwrap();
        assert_eq!(a.selected(0), &[0, 1]);
        assert!((a.weight(0, 0) - 0.7311).abs() < 1e-4);
        assert!((a.weight(0, 1) - 0.2689).abs() < 1e-4);
        assert_eq!(a.weight(0, 2), 0.0);
        assert_eq!(a.weight(0, 3), 0.0);
    }

    #[test]
    fn equal_logits_all_selected_uniform() {
        let logits = Matrix::filled(1, 4, 0.3);
        let (a, _) = assign(&logits, 4).unwrap();
        for k in 0..4 {
            assert!((a.weight(0, k) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let logits = Matrix::from_rows(&[vec![1.0, 2.0, 2.0, 2.0]]);
        let (a, _) = assign(&logits, 2).unwrap();
        assert_eq!(a.selected(0), &[1, 2]);
    }

    #[test]
    fn k_out_of_range() {
        let logits = Matrix::zeros(2, 3);
        assert!(assign(&logits, 4).is_err());
        assert!(assign(&logits, 0).is_err());
    }

    #[test]
    fn load_and_importance() {
        let logits = Matrix::from_rows(&[vec![3.0, 0.0, 1.0], vec![0.0, 2.0, 1.0]]);
        let (a, _) = assign(&logits, 1).unwrap();
        assert_eq!(a.load(), vec![1.0, 1.0, 0.0]);
        assert_eq!(a.importance(), vec![1.0, 1.0, 0.0]);
        assert_eq!(a.routed_to(1), vec![1]);
    }
}
