//! Paired-run trends on the reference backdoor scenario, three seeds each.
//! Runs are trained once and shared between tests.

use std::sync::OnceLock;

use rgmoe::attack::AttackRecipe;
use rgmoe::eval::EvalReport;
use rgmoe::graph::AttackKind;
use rgmoe::pipeline::{train_and_evaluate, Scenario};
use rgmoe::train::TrainConfig;

const SEEDS: [u64; 3] = [0, 1, 2];

struct SeedRuns {
    vanilla: EvalReport,
    /// Diversity training, no router fine-tuning.
    phase1: EvalReport,
    full: EvalReport,
}

fn backdoor_report(seed: u64, cfg: TrainConfig) -> EvalReport {
    let poisoned = Scenario::reference(seed)
        .poisoned(&AttackRecipe::backdoor(seed))
        .unwrap();
    train_and_evaluate(&poisoned, &TrainConfig { seed, ..cfg }).unwrap().1
}

fn runs() -> &'static [SeedRuns] {
    static RUNS: OnceLock<Vec<SeedRuns>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| SeedRuns {
                vanilla: backdoor_report(seed, TrainConfig::vanilla()),
                phase1: backdoor_report(
                    seed,
                    TrainConfig {
                        router_finetune: false,
                        ..TrainConfig::default()
                    },
                ),
                full: backdoor_report(seed, TrainConfig::default()),
            })
            .collect()
    })
}

fn mean(f: impl Fn(&SeedRuns) -> f64) -> f64 {
    runs().iter().map(f).sum::<f64>() / SEEDS.len() as f64
}

fn robust_share(r: &EvalReport) -> f64 {
    let robust = r
        .per_expert
        .iter()
        .filter(|e| e.is_robust(AttackKind::Backdoor))
        .count();
    robust as f64 / r.per_expert.len() as f64
}

#[test]
fn vanilla_moe_learns_the_backdoor() {
    let asr = mean(|r| r.vanilla.asr.unwrap());
    assert!(asr >= 0.8, "mean vanilla ASR {asr}");
}

#[test]
fn router_finetuning_does_not_raise_asr() {
    for (seed, r) in SEEDS.iter().zip(runs()) {
        let (b, a) = (r.phase1.asr.unwrap(), r.full.asr.unwrap());
        assert!(a <= b, "seed {seed}: ASR {b} -> {a}");
    }
}

#[test]
fn finetuned_router_favors_robust_experts() {
    let before = mean(|r| r.phase1.routing_robust_rate);
    let after = mean(|r| r.full.routing_robust_rate);
    assert!(after > before, "routing rate to robust experts {before} -> {after}");
}

/// Known gap: the diversity term barely moves per-expert robustness on the
/// synthetic scenario; the robust share (about 0.64) is the same with and
/// without it over these seeds.
#[test]
#[ignore = "known gap, documented in the README"]
fn diversity_raises_robust_expert_share() {
    let plain = mean(|r| robust_share(&r.vanilla));
    let diverse = mean(|r| robust_share(&r.phase1));
    assert!(diverse > plain, "robust share {plain} -> {diverse}");
}
