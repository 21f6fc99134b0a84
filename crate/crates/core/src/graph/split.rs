use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Fraction of nodes masked out of training as test nodes, halved into the
/// triggered (ASR) and clean (ACC) evaluation sets.
pub const TEST_FRACTION: f64 = 0.2;

/// Disjoint node-id sets, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub clean_test: Vec<usize>,
    pub asr_test: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Split {
    /// Nodes held out of the training graph.
    pub fn test_nodes(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.clean_test.iter().chain(&self.asr_test).copied().collect();
        t.sort_unstable();
        t
    }

    /// `V_L ∪ V_U`, sorted.
    pub fn labeled_and_unlabeled(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.train.iter().chain(&self.unlabeled).copied().collect();
        t.sort_unstable();
        t
    }

    pub fn parts(&self) -> [(&'static str, &[usize]); 5] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("clean_test", &self.clean_test),
            ("asr_test", &self.asr_test),
            ("unlabeled", &self.unlabeled),
        ]
    }

    /// Checks that parts are sorted, in range, and pairwise disjoint.
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![false; num_nodes];
        for (name, ids) in self.parts() {
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::contract(format!("split part {name} not sorted")));
            }
            for &v in ids {
                if v >= num_nodes {
                    return Err(Error::contract(format!("split part {name} has node {v}")));
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(Error::contract(format!("node {v} in two split parts")));
                }
            }
        }
        Ok(())
    }

    /// Re-indexes every part through `map`, dropping unmapped nodes.
    pub fn remap(&self, map: &[Option<usize>]) -> Split {
        let f = |ids: &[usize]| {
            let mut out: Vec<usize> = ids.iter().filter_map(|&v| map.get(v).copied().flatten()).collect();
            out.sort_unstable();
            out
        };
        Split {
            train: f(&self.train),
            val: f(&self.val),
            clean_test: f(&self.clean_test),
            asr_test: f(&self.asr_test),
            unlabeled: f(&self.unlabeled),
        }
    }
}

/// Masks out 20% of nodes as test nodes (split evenly into ASR and ACC
/// halves) and divides the rest into labeled, validation and unlabeled
/// nodes. `train_frac` and `val_frac` are fractions of all nodes.
pub fn split_inductive(g: &Graph, seed: u64, train_frac: f64, val_frac: f64) -> Result<Split> {
    if !(0.0..1.0).contains(&train_frac)
        || !(0.0..1.0).contains(&val_frac)
        || train_frac + val_frac + TEST_FRACTION > 1.0 + 1e-12
    {
        return Err(Error::contract(format!(
            "train_frac {train_frac} + val_frac {val_frac} leaves no room for {TEST_FRACTION} test nodes"
        )));
    }
    let n = g.num_nodes();
    let n_test = (TEST_FRACTION * n as f64).round() as usize;
    let n_asr = n_test / 2;
    let n_clean = n_test - n_asr;
    let n_train = (train_frac * n as f64).round() as usize;
    let n_val = (val_frac * n as f64).round() as usize;
    if n_asr == 0 || n_clean == 0 || n_train == 0 || n_val == 0 || n_test + n_train + n_val > n {
        return Err(Error::contract(format!(
            "graph with {n} nodes too small for non-empty split parts"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut cursor = 0;
    let mut take = |k: usize| {
        let mut part = order[cursor..cursor + k].to_vec();
        part.sort_unstable();
        cursor += k;
        part
    };
    let asr_test = take(n_asr);
    let clean_test = take(n_clean);
    let train = take(n_train);
    let val = take(n_val);
    let unlabeled = take(n - n_test - n_train - n_val);
    Ok(Split {
        train,
        val,
        clean_test,
        asr_test,
        unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    fn nodes(n: usize) -> Graph {
        Graph::new(Matrix::zeros(n, 1), vec![0; n], 1, vec![]).unwrap()
    }

    #[test]
    fn hundred_nodes_ten_and_ten() {
        let s = split_inductive(&nodes(100), 3, 0.2, 0.1).unwrap();
        assert_eq!(s.asr_test.len(), 10);
        assert_eq!(s.clean_test.len(), 10);
        assert_eq!(s.train.len(), 20);
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.unlabeled.len(), 50);
    }

    #[test]
    fn deterministic() {
        let g = nodes(77);
        assert_eq!(
            split_inductive(&g, 9, 0.3, 0.1).unwrap(),
            split_inductive(&g, 9, 0.3, 0.1).unwrap()
        );
    }

    #[test]
    fn too_small_or_bad_fractions() {
        assert!(split_inductive(&nodes(4), 0, 0.2, 0.1).is_err());
        assert!(split_inductive(&nodes(100), 0, 0.7, 0.2).is_err());
    }

    proptest! {
        #[test]
        fn partition(n in 20usize..400, seed in any::<u64>(), tf in 0.05..0.5f64) {
            let s = split_inductive(&nodes(n), seed, tf, 0.1).unwrap();
            s.validate(n).unwrap();
            let total: usize = s.parts().iter().map(|(_, p)| p.len()).sum();
            prop_assert_eq!(total, n);
            prop_assert!(s.asr_test.len().abs_diff(s.clean_test.len()) <= 1);
        }
    }
}
