//! Parallel vs sequential execution of the data-parallel kernels and of full
//! model steps. Both paths produce bit-identical results; only speed differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rgmoe::attack::{edge_manipulation, AttackRecipe, EdgeMode};
use rgmoe::graph::{generate_synthetic, split_inductive};
use rgmoe::logic::MiDiscriminator;
use rgmoe::model::{ModelConfig, MoeModel};
use rgmoe::par;
use rgmoe::tensor::Matrix;
use rgmoe::train::{phase1_train, TrainConfig};

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn dense(rows: usize, cols: usize, seed: u64) -> Matrix {
    let data = (0..rows * cols)
        .map(|i| (((i as u64).wrapping_mul(2654435761) ^ seed) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn kernels(c: &mut Criterion) {
    let a = dense(2000, 64, 1);
    let b = dense(64, 64, 2);
    let g = generate_synthetic(2000, 4, 64, 0.9, 0).unwrap();
    let adj = g.normalized_adjacency();
    let mut group = c.benchmark_group("kernels");
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("matmul_2000x64x64", name), |bench| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
        group.bench_function(BenchmarkId::new("spmm_2000", name), |bench| {
            bench.iter(|| black_box(adj.spmm(&a).unwrap()))
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn model_steps(c: &mut Criterion) {
    let g = generate_synthetic(1000, 4, 32, 0.9, 0).unwrap();
    let split = split_inductive(&g, 0, 0.2, 0.1).unwrap();
    let model = MoeModel::new(ModelConfig {
        in_dim: 32,
        hidden: 32,
        num_classes: 4,
        n_experts: 12,
        top_k: 2,
        n_layers: 1,
        seed: 0,
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("predict_1000", name), |bench| {
            bench.iter(|| black_box(model.predict(&g).unwrap()))
        });
        group.bench_function(BenchmarkId::new("phase1_two_epochs", name), |bench| {
            bench.iter(|| {
                let mut m = model.clone();
                let mut d = MiDiscriminator::new(32, 32, 1);
                black_box(phase1_train(&mut m, &mut d, &g, &split, &cfg).unwrap())
            })
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn greedy_attack(c: &mut Criterion) {
    let g = generate_synthetic(300, 4, 16, 0.9, 0).unwrap();
    let split = split_inductive(&g, 0, 0.2, 0.1).unwrap();
    let recipe = AttackRecipe::edge(0.02, EdgeMode::Greedy, 0);
    let mut group = c.benchmark_group("attack");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("greedy_edges_300", name), |bench| {
            bench.iter(|| black_box(edge_manipulation(&g, &split, &recipe).unwrap()))
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, kernels, model_steps, greedy_attack);
criterion_main!(benches);
