use super::*;
use crate::attack::{run_attack, AttackRecipe, EdgeMode};
use crate::graph::{generate_synthetic, split_inductive};
use crate::model::{assign, ModelConfig};

fn one_hot(preds: &[usize], c: usize) -> Matrix {
    Matrix::from_rows(
        &preds
            .iter()
            .map(|&p| (0..c).map(|j| if j == p { 1.0 } else { 0.0 }).collect())
            .collect::<Vec<_>>(),
    )
}

#[test]
fn asr_extremes() {
    let labels = [0, 1, 2, 1, 0];
    let nodes = [0, 1, 2, 3, 4];
    assert_eq!(asr_of(&one_hot(&[0; 5], 3), &labels, &nodes, 0).unwrap(), 1.0);
    assert_eq!(asr_of(&one_hot(&labels, 3), &labels, &nodes, 0).unwrap(), 0.0);
    // Two of the three eligible nodes flipped.
    assert!((asr_of(&one_hot(&[1, 0, 0, 1, 0], 3), &labels, &nodes, 0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn asr_needs_eligible_nodes() {
    let labels = [0, 0, 1];
    assert!(asr_of(&one_hot(&[0, 0, 0], 2), &labels, &[0, 1], 0).is_err());
    assert!(asr_of(&one_hot(&[0, 0, 0], 2), &labels, &[], 0).is_err());
}

#[test]
fn accuracy_cases() {
    let labels = [0, 1, 2, 3];
    assert_eq!(accuracy_of(&one_hot(&labels, 4), &labels, &[0, 1, 2, 3]).unwrap(), 1.0);
    assert_eq!(
        accuracy_of(&one_hot(&[0, 0, 0, 0], 4), &labels, &[0, 1, 2, 3]).unwrap(),
        0.25
    );
    assert!(accuracy_of(&one_hot(&labels, 4), &labels, &[]).is_err());
}

#[test]
fn random_predictor_near_chance() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let n = 20_000;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let nodes: Vec<usize> = (0..n).collect();
    let acc = accuracy_of(&one_hot(&preds, 4), &labels, &nodes).unwrap();
    assert!((acc - 0.25).abs() < 0.02, "{acc}");
}

#[test]
fn histogram_counts_every_value() {
    let h = histogram(&[0.0, 0.05, 0.1, 0.55, 0.99, 1.0, 1.7, -0.2], 10);
    assert_eq!(h.iter().sum::<usize>(), 8);
    assert_eq!(h[0], 3);
    assert_eq!(h[1], 1);
    assert_eq!(h[5], 1);
    assert_eq!(h[9], 3);
    assert!(histogram(&[0.3], 0).is_empty());
}

#[test]
fn routing_rate_bounds() {
    let logits = Matrix::from_rows(&[vec![3.0, 1.0, 0.0], vec![0.0, 2.0, 1.0], vec![1.0, 0.0, 4.0]]);
    let (two, _) = assign(&logits, 2).unwrap();
    assert!((routing_rate_to_robust(&two, &[0, 1, 2], &[0, 1, 2]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(routing_rate_to_robust(&two, &[0, 1], &[]).unwrap(), 0.0);
    let (one, _) = assign(&logits, 1).unwrap();
    // K = 1 sends nodes 0 and 1 to experts 0 and 1.
    assert_eq!(routing_rate_to_robust(&one, &[0, 1], &[2]).unwrap(), 0.0);
    assert_eq!(routing_rate_to_robust(&one, &[2], &[2]).unwrap(), 1.0);
    assert!(routing_rate_to_robust(&one, &[], &[2]).is_err());
}

#[test]
fn detection_precision_recall() {
    let report = crate::router::identify_perturbed(&[1, 2, 3, 4, 5], &[0.0, 0.0, 0.0, 0.0, 10.0]).unwrap();
    assert_eq!(report.flagged, vec![5]);
    assert_eq!(detection_quality(&report, &[5, 9]), (Some(1.0), Some(1.0)));
    assert_eq!(detection_quality(&report, &[4, 5]), (Some(1.0), Some(0.5)));
    assert_eq!(detection_quality(&report, &[]), (Some(0.0), None));
    let none = crate::router::identify_perturbed(&[1, 2], &[1.0, 1.0]).unwrap();
    assert_eq!(detection_quality(&none, &[1]), (None, Some(0.0)));
}

#[test]
fn identical_experts_identical_rows() {
    let g = generate_synthetic(60, 3, 8, 0.8, 1).unwrap();
    let s = split_inductive(&g, 1, 0.3, 0.1).unwrap();
    let mut model = MoeModel::new(ModelConfig {
        in_dim: 8,
        hidden: 8,
        num_classes: 3,
        n_experts: 4,
        top_k: 2,
        n_layers: 1,
        seed: 3,
    })
    .unwrap();
    let e0 = model.layers[0].experts[0].clone();
    model.layers[0].experts.iter_mut().for_each(|e| *e = e0.clone());
    let p = run_attack(&g, &s, &AttackRecipe::edge(0.1, EdgeMode::Random, 0)).unwrap();
    let rows = per_expert_robustness(&model, &g, &p.graph, &s.test_nodes(), Some(0)).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows
        .windows(2)
        .all(|w| w[0].asr == w[1].asr && w[0].acc_drop == w[1].acc_drop));
}

fn report_keys(v: &serde_json::Value) -> Vec<String> {
    let mut keys: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    keys
}

#[test]
fn report_schema_is_stable() {
    let g = generate_synthetic(120, 3, 8, 0.9, 2).unwrap();
    let s = split_inductive(&g, 2, 0.3, 0.1).unwrap();
    let model = MoeModel::new(ModelConfig {
        in_dim: 8,
        hidden: 8,
        num_classes: 3,
        n_experts: 4,
        top_k: 2,
        n_layers: 1,
        seed: 0,
    })
    .unwrap();
    let mut seen = Vec::new();
    for recipe in [
        None,
        Some(AttackRecipe::backdoor(1)),
        Some(AttackRecipe::edge(0.05, EdgeMode::Random, 1)),
        Some(AttackRecipe::inject(4, 3, 1)),
    ] {
        let (graph, split, ledger) = match recipe {
            Some(r) => {
                let p = run_attack(&g, &s, &r).unwrap();
                (p.graph, p.split, Some(p.ledger))
            }
            None => (g.clone(), s.clone(), None),
        };
        let report = evaluate(&model, &graph, &split, ledger.as_ref(), serde_json::json!({"k": 1})).unwrap();
        for f in [report.clean_acc, report.routing_robust_rate]
            .into_iter()
            .chain(report.asr)
            .chain(report.per_expert.iter().flat_map(|e| e.asr))
        {
            assert!((0.0..=1.0).contains(&f));
        }
        assert_eq!(report.per_expert.len(), 4);
        let v = serde_json::to_value(&report).unwrap();
        seen.push((
            report_keys(&v),
            report_keys(&v["disagreement"]),
            report_keys(&v["per_expert"][0]),
        ));
        let csv = report.per_expert_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("id,asr,acc_drop\n"));
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
    let (top, dis, row) = &seen[0];
    for k in [
        "asr",
        "clean_acc",
        "per_expert",
        "routing_robust_rate",
        "disagreement",
        "config",
    ] {
        assert!(top.contains(&k.to_string()), "{k}");
    }
    for k in ["mu", "sigma", "flagged", "precision", "recall"] {
        assert!(dis.contains(&k.to_string()), "{k}");
    }
    assert_eq!(row, &["acc_drop", "asr", "id"]);
}
