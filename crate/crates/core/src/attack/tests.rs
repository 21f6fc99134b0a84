use super::*;
use crate::graph::{generate_synthetic, split_inductive};

fn fixture(n: usize, seed: u64) -> (Graph, Split) {
    let g = generate_synthetic(n, 4, 16, 0.9, seed).unwrap();
    let s = split_inductive(&g, seed, 0.2, 0.1).unwrap();
    (g, s)
}

#[test]
fn five_percent_of_a_thousand() {
    let (g, s) = fixture(1000, 0);
    let p = backdoor_attack(&g, &s, &AttackRecipe::backdoor(3)).unwrap();
    assert_eq!(p.ledger.relabeled.len(), 50);
    assert_eq!(p.ledger.injected.len(), 150);
    assert_eq!(p.graph.num_nodes(), 1150);
    assert_eq!(p.graph.num_edges(), g.num_edges() + 50 * 4);
    for &(h, _) in &p.ledger.relabeled {
        assert_eq!(p.graph.labels()[h], 0);
        assert!(p.split.train.binary_search(&h).is_ok());
    }
}

#[test]
fn tiny_rate_keeps_one_host() {
    let (g, s) = fixture(100, 1);
    let recipe = AttackRecipe {
        rate: 1e-6,
        ..AttackRecipe::backdoor(0)
    };
    let p = backdoor_attack(&g, &s, &recipe).unwrap();
    assert_eq!(p.ledger.relabeled.len(), 1);
    assert_eq!(p.ledger.injected.len(), 3);
}

#[test]
fn backdoor_touches_only_hosts_and_triggers() {
    let (g, s) = fixture(300, 2);
    let p = backdoor_attack(&g, &s, &AttackRecipe::backdoor(5)).unwrap();
    let hosts: Vec<usize> = p.ledger.relabeled.iter().map(|&(h, _)| h).collect();
    for v in 0..g.num_nodes() {
        assert_eq!(p.graph.features().row(v), g.features().row(v));
        if !hosts.contains(&v) {
            assert_eq!(p.graph.labels()[v], g.labels()[v]);
        }
    }
    for &(u, v) in p.graph.edges() {
        let old = u < g.num_nodes() && v < g.num_nodes();
        assert!(!old || g.has_edge(u, v));
        if !old {
            assert!(p.ledger.is_poisoned(u) && p.ledger.is_poisoned(v));
        }
    }
    for part in [&s.val, &s.clean_test, &s.asr_test] {
        for &v in part.iter() {
            assert!(!p.ledger.is_poisoned(v));
        }
    }
}

#[test]
fn invalid_recipes_rejected() {
    let (g, s) = fixture(100, 0);
    for recipe in [
        AttackRecipe {
            trigger_size: MAX_TRIGGER_SIZE + 1,
            ..AttackRecipe::default()
        },
        AttackRecipe {
            trigger_size: 0,
            ..AttackRecipe::default()
        },
        AttackRecipe {
            target_class: 4,
            ..AttackRecipe::default()
        },
        AttackRecipe {
            rate: 0.0,
            ..AttackRecipe::default()
        },
        AttackRecipe {
            rate: 1.5,
            ..AttackRecipe::edge(0.1, EdgeMode::Random, 0)
        },
    ] {
        assert!(run_attack(&g, &s, &recipe).is_err(), "{recipe:?}");
    }
    assert!(node_injection(&g, &s, &AttackRecipe::inject(3, 101, 0)).is_err());
    assert!(node_injection(&g, &s, &AttackRecipe::inject(3, 0, 0)).is_err());
}

#[test]
fn every_attack_reverts_exactly() {
    let (g, s) = fixture(200, 4);
    for recipe in [
        AttackRecipe::backdoor(1),
        AttackRecipe::edge(0.05, EdgeMode::Random, 1),
        AttackRecipe::edge(0.02, EdgeMode::Greedy, 1),
        AttackRecipe::inject(10, 4, 1),
    ] {
        let p = run_attack(&g, &s, &recipe).unwrap();
        let (clean, split) = p.ledger.revert(&p.graph, &p.split).unwrap();
        assert_eq!(clean, g, "{:?}", recipe.kind);
        assert_eq!(split, s, "{:?}", recipe.kind);
    }
}

#[test]
fn attacks_are_deterministic() {
    let (g, s) = fixture(150, 6);
    for recipe in [
        AttackRecipe::backdoor(9),
        AttackRecipe::edge(0.05, EdgeMode::Greedy, 9),
        AttackRecipe::inject(5, 3, 9),
    ] {
        assert_eq!(
            run_attack(&g, &s, &recipe).unwrap(),
            run_attack(&g, &s, &recipe).unwrap()
        );
    }
    let a = backdoor_attack(&g, &s, &AttackRecipe::backdoor(1)).unwrap();
    let b = backdoor_attack(&g, &s, &AttackRecipe::backdoor(2)).unwrap();
    assert_ne!(a.ledger.relabeled, b.ledger.relabeled);
}

#[test]
fn edge_budget_accounting() {
    let (g, s) = fixture(200, 7);
    let tiny = 0.5 / g.num_edges() as f64;
    let p = edge_manipulation(&g, &s, &AttackRecipe::edge(tiny, EdgeMode::Random, 0)).unwrap();
    assert_eq!(p.graph, g);
    assert!(p.ledger.flipped_edges.is_empty());
    for mode in [EdgeMode::Random, EdgeMode::Greedy] {
        let p = edge_manipulation(&g, &s, &AttackRecipe::edge(0.03, mode, 0)).unwrap();
        let budget = (0.03 * g.num_edges() as f64).floor() as usize;
        assert_eq!(p.ledger.flipped_edges.len(), budget);
        let diff = (0..g.num_nodes())
            .flat_map(|u| (u + 1..g.num_nodes()).map(move |v| (u, v)))
            .filter(|&(u, v)| g.has_edge(u, v) != p.graph.has_edge(u, v))
            .count();
        assert_eq!(diff, budget);
    }
}

#[test]
fn full_rate_on_a_triangle_empties_it() {
    let g = Graph::new(Matrix::zeros(3, 2), vec![0, 1, 0], 2, vec![(0, 1), (1, 2), (0, 2)]).unwrap();
    let s = Split {
        train: vec![0, 1],
        clean_test: vec![2],
        ..Split::default()
    };
    let p = edge_manipulation(&g, &s, &AttackRecipe::edge(1.0, EdgeMode::Random, 0)).unwrap();
    assert_eq!(p.graph.num_edges(), 0);
    assert_eq!(p.ledger.poisoned, vec![0, 1, 2]);
}

#[test]
fn local_delta_matches_full_recomputation() {
    let (g, s) = fixture(80, 8);
    let sur = Surrogate::fit(&g, &s.train, 0).unwrap();
    let local = LocalGcn::new(&g, &sur, &s.train).unwrap();
    let loss = |graph: &Graph| {
        let z = sur.logits(graph).unwrap();
        s.train
            .iter()
            .map(|&t| func::cross_entropy(z.row(t), graph.labels()[t]).unwrap())
            .sum::<f64>()
    };
    let base = loss(&g);
    for (u, v) in [(0, 1), (3, 40), (10, 11), (5, 79)] {
        let flipped = g.with_flipped(&[(u, v)]).unwrap();
        let want = loss(&flipped) - base;
        let got = local.delta(u, v);
        assert!((want - got).abs() < 1e-9, "({u},{v}): {want} vs {got}");
    }
}

#[test]
fn greedy_hurts_at_least_as_much_as_random() {
    let mut drop = [0.0; 2];
    for seed in 0..3 {
        let (g, s) = fixture(200, seed);
        let test = s.test_nodes();
        for (i, mode) in [EdgeMode::Random, EdgeMode::Greedy].into_iter().enumerate() {
            let p = edge_manipulation(&g, &s, &AttackRecipe::edge(0.10, mode, seed)).unwrap();
            let clean = Surrogate::fit(&g, &s.train, seed).unwrap().accuracy(&g, &test).unwrap();
            let hit = Surrogate::fit(&p.graph, &s.train, seed)
                .unwrap()
                .accuracy(&p.graph, &test)
                .unwrap();
            drop[i] += (clean - hit) / 3.0;
        }
    }
    assert!(drop[1] >= drop[0], "greedy {} vs random {}", drop[1], drop[0]);
}

#[test]
fn zero_injection_is_identity() {
    let (g, s) = fixture(100, 0);
    let p = node_injection(&g, &s, &AttackRecipe::inject(0, 8, 0)).unwrap();
    assert_eq!(p.graph, g);
    assert_eq!(p.split, s);
    assert!(p.ledger.injected.is_empty());
}

#[test]
fn injected_nodes_have_configured_degree() {
    let (g, s) = fixture(200, 3);
    let p = node_injection(&g, &s, &AttackRecipe::inject(12, 5, 0)).unwrap();
    assert_eq!(p.ledger.injected, (200..212).collect::<Vec<_>>());
    for &v in &p.ledger.injected {
        assert_eq!(p.graph.degree(v), 5);
        assert!(p.split.train.binary_search(&v).is_ok());
    }
    for v in 0..g.num_nodes() {
        assert_eq!(p.graph.features().row(v), g.features().row(v));
        assert_eq!(p.graph.labels()[v], g.labels()[v]);
    }
}

#[test]
fn injection_lowers_surrogate_accuracy() {
    let (g, s) = fixture(300, 5);
    let p = node_injection(&g, &s, &AttackRecipe::inject(15, 8, 0)).unwrap();
    let test = s.test_nodes();
    let clean = Surrogate::fit(&g, &s.train, 0).unwrap().accuracy(&g, &test).unwrap();
    let hit = Surrogate::fit(&p.graph, &p.split.train, 0)
        .unwrap()
        .accuracy(&p.graph, &test)
        .unwrap();
    assert!(hit < clean, "{hit} vs {clean}");
}

#[test]
fn second_choice() {
    assert_eq!(second_most_likely(&[0.1, 0.6, 0.3]), 2);
    assert_eq!(second_most_likely(&[0.5, 0.25, 0.25]), 1);
}

#[test]
fn test_triggers_reach_only_asr_nodes() {
    let (g, s) = fixture(200, 9);
    let p = backdoor_attack(&g, &s, &AttackRecipe::backdoor(0)).unwrap();
    let t = attach_test_triggers(&p.graph, &p.split, &p.ledger).unwrap();
    let base = p.graph.num_nodes();
    assert_eq!(t.num_nodes(), base + 3 * s.asr_test.len());
    for &v in &s.asr_test {
        let new: Vec<usize> = t.neighbors(v).into_iter().filter(|&u| u >= base).collect();
        assert_eq!(new.len(), 1);
        assert_eq!(t.degree(new[0]), 3);
        assert_eq!(t.labels()[v], p.graph.labels()[v]);
    }
    for &v in &s.clean_test {
        assert_eq!(t.neighbors(v), p.graph.neighbors(v));
    }
    let clean = Split::default();
    let mut empty = p.ledger.clone();
    empty.trigger = None;
    assert!(attach_test_triggers(&p.graph, &clean, &empty).is_err());
}
