use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Matrix;

/// Stochastic-block-model graph with class-conditional Gaussian features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub classes: usize,
    pub dim: usize,
    /// Expected fraction of a node's edges that stay inside its class.
    pub homophily: f64,
    pub avg_degree: f64,
    /// Standard deviation of the per-class mean vectors; feature noise is unit.
    pub mean_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 1000,
            classes: 4,
            dim: 32,
            homophily: 0.9,
            avg_degree: 8.0,
            mean_scale: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Graph> {
        let &Self {
            nodes: n,
            classes: c,
            dim,
            homophily,
            avg_degree,
            mean_scale,
            seed,
        } = self;
        if c == 0 || n < c {
            return Err(Error::contract(format!("need nodes >= classes >= 1, got {n} and {c}")));
        }
        if !(0.0..=1.0).contains(&homophily) {
            return Err(Error::contract(format!("homophily {homophily} outside [0, 1]")));
        }
        if !(avg_degree >= 0.0) || !(mean_scale >= 0.0) {
            return Err(Error::contract("negative degree or mean scale"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(&mut rng);

        let per_class = n as f64 / c as f64;
        let p_in = if per_class > 1.0 {
            (homophily * avg_degree / (per_class - 1.0)).min(1.0)
        } else {
            0.0
        };
        let others = n as f64 - per_class;
        let p_out = if others > 0.0 {
            ((1.0 - homophily) * avg_degree / others).min(1.0)
        } else {
            0.0
        };
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let p = if labels[u] == labels[v] { p_in } else { p_out };
                if p > 0.0 && rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }

        let mean_dist = Normal::new(0.0, mean_scale).map_err(|e| Error::contract(e.to_string()))?;
        let means: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..dim).map(|_| mean_dist.sample(&mut rng)).collect())
            .collect();
        let mut data = Vec::with_capacity(n * dim);
        for &l in &labels {
            for &m in &means[l] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(m + noise);
            }
        }
        Graph::new(Matrix::from_vec(n, dim, data)?, labels, c, edges)
    }
}

/// SBM graph with the default degree and feature scale.
pub fn generate_synthetic(nodes: usize, classes: usize, dim: usize, homophily: f64, seed: u64) -> Result<Graph> {
    SyntheticSpec {
        nodes,
        classes,
        dim,
        homophily,
        seed,
        ..Default::default()
    }
    .generate()
}
