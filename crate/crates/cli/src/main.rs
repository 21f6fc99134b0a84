use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use rgmoe::attack::{run_attack, AttackRecipe, EdgeMode};
use rgmoe::eval::{evaluate, DisagreementSummary};
use rgmoe::graph::{load_graph, save_graph, AttackKind, Bundle};
use rgmoe::logic::logic_vectors;
use rgmoe::model::Checkpoint;
use rgmoe::pipeline::Scenario;
use rgmoe::train::{detect_inductive, restore, train_full, training_view, Diversity, TrainConfig};

/// Exit status for command-line usage errors (BSD `EX_USAGE`).
const EXIT_USAGE: u8 = 64;
const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Parser, Debug)]
#[command(
    name = "rgmoe",
    version,
    about = "Robust graph mixture-of-experts: data, attacks, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic graph bundle with an inductive split.
    Gen(GenArgs),
    /// Poison a graph bundle.
    Attack(AttackArgs),
    /// Train RGMoE (or an ablation) on a bundle and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a bundle.
    Eval(EvalArgs),
    /// Dump logic vectors and the disagreement report.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.9)]
    homophily: f64,
    #[arg(long, default_value_t = 0.2)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output bundle directory.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Clean bundle directory.
    #[arg(short, long)]
    input: PathBuf,
    /// Poisoned bundle directory.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "backdoor")]
    kind: AttackKind,
    /// Backdoor hosts as a fraction of nodes, or edge flips as a fraction of edges.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value_t = 3)]
    trigger_size: usize,
    #[arg(long, default_value_t = 0)]
    target_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_mode, default_value = "greedy")]
    mode: EdgeMode,
    #[arg(long, default_value_t = 50)]
    inject_count: usize,
    #[arg(long, default_value_t = 8)]
    edges_per_node: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Checkpoint path; defaults to `checkpoint.json` in the bundle.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the per-epoch trace (both phases) as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    experts: usize,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 0.05)]
    lambda: f64,
    #[arg(long, default_value_t = 0.25)]
    gamma: f64,
    #[arg(long, default_value_t = 0.3)]
    margin: f64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    router_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Weight of the importance and load balancing losses.
    #[arg(long, default_value_t = 0.01)]
    aux_weight: f64,
    #[arg(long, value_parser = parse_diversity, default_value = "logic")]
    diversity: Diversity,
    /// Skip router fine-tuning (phase 2).
    #[arg(long)]
    no_router: bool,
    /// Plain sparse MoE: no diversity loss and no router fine-tuning.
    #[arg(long)]
    vanilla: bool,
    /// One joint gradient for the MI and logic terms.
    #[arg(long)]
    joint_mi_grad: bool,
    /// Diversify all experts at every node instead of the selected ones.
    #[arg(long)]
    all_experts: bool,
    /// Std of Gaussian exploration noise on phase-1 gate logits.
    #[arg(long, default_value_t = 0.0)]
    gate_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Defaults to `checkpoint.json` in the bundle.
    #[arg(short, long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-expert robustness as CSV.
    #[arg(long)]
    per_expert_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    checkpoint: Option<PathBuf>,
    /// Logic vectors as CSV (node, expert, neighbor, mi_value).
    #[arg(long)]
    logic_csv: Option<PathBuf>,
    /// Disagreement report as JSON.
    #[arg(long)]
    disagreement: Option<PathBuf>,
    /// Seed of the marginal-pair rotation used for logic vectors.
    #[arg(long, default_value_t = 0)]
    rotation: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    s.parse().map_err(|e: rgmoe::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<EdgeMode, String> {
    s.parse().map_err(|e: rgmoe::Error| e.to_string())
}

fn parse_diversity(s: &str) -> Result<Diversity, String> {
    s.parse().map_err(|e: rgmoe::Error| e.to_string())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(report: Option<&PathBuf>, v: Value) -> Result<()> {
    match report {
        Some(p) => write_json(p, &v),
        None => {
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(())
        }
    }
}

fn checkpoint_path(bundle: &Path, given: Option<&PathBuf>) -> PathBuf {
    given.cloned().unwrap_or_else(|| bundle.join(CHECKPOINT_FILE))
}

fn gen(a: &GenArgs) -> Result<()> {
    let scenario = Scenario {
        nodes: a.nodes,
        classes: a.classes,
        dim: a.dim,
        homophily: a.homophily,
        train_frac: a.train_frac,
        val_frac: a.val_frac,
        seed: a.seed,
    };
    let (g, split) = scenario.build()?;
    save_graph(&g, &split, None, &a.output)?;
    emit(
        a.report.as_ref(),
        json!({
            "scenario": scenario,
            "num_nodes": g.num_nodes(),
            "num_edges": g.num_edges(),
            "split": split.parts().iter().map(|(name, ids)| (name.to_string(), json!(ids.len()))).collect::<serde_json::Map<_, _>>(),
        }),
    )
}

fn attack(a: &AttackArgs) -> Result<()> {
    let bundle = load_graph(&a.input)?;
    if bundle.ledger.is_some() {
        return Err(rgmoe::Error::Contract("input bundle is already poisoned".into()).into());
    }
    let default_rate = match a.kind {
        AttackKind::Edge => 0.10,
        _ => 0.05,
    };
    let recipe = AttackRecipe {
        kind: a.kind,
        rate: a.rate.unwrap_or(default_rate),
        trigger_size: a.trigger_size,
        target_class: a.target_class,
        seed: a.seed,
        mode: a.mode,
        inject_count: a.inject_count,
        edges_per_node: a.edges_per_node,
    };
    let p = run_attack(&bundle.graph, &bundle.split, &recipe)?;
    save_graph(&p.graph, &p.split, Some(&p.ledger), &a.output)?;
    emit(
        a.report.as_ref(),
        json!({
            "recipe": recipe,
            "num_nodes": p.graph.num_nodes(),
            "num_edges": p.graph.num_edges(),
            "poisoned": p.ledger.poisoned.len(),
            "injected": p.ledger.injected.len(),
            "flipped_edges": p.ledger.flipped_edges.len(),
            "relabeled": p.ledger.relabeled.len(),
        }),
    )
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig {
        n_experts: a.experts,
        top_k: a.top_k,
        hidden: a.hidden,
        n_layers: a.layers,
        lambda: a.lambda,
        gamma: a.gamma,
        margin: a.margin,
        rho: a.rho,
        epochs: a.epochs,
        router_epochs: a.router_epochs,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        aux_weight: a.aux_weight,
        diversity: a.diversity,
        router_finetune: !a.no_router,
        joint_mi_grad: a.joint_mi_grad,
        logic_all_experts: a.all_experts,
        gate_noise: a.gate_noise,
        ..TrainConfig::default()
    };
    if a.vanilla {
        cfg.lambda = 0.0;
        cfg.diversity = Diversity::None;
        cfg.router_finetune = false;
    }
    cfg
}

fn train(a: &TrainArgs) -> Result<()> {
    let bundle = load_graph(&a.input)?;
    let cfg = train_config(a);
    let trained = train_full(&bundle.graph, &bundle.split, &cfg)?;
    let out = checkpoint_path(&a.input, a.output.as_ref());
    trained.checkpoint().save(&out)?;
    if let Some(path) = &a.trace {
        let mut csv = trained.phase1.to_csv();
        for line in trained.phase2.to_csv().lines().skip(1) {
            writeln!(csv, "{line}").expect("write to string");
        }
        write_text(path, &csv)?;
    }
    let last = |t: &rgmoe::train::TrainTrace| t.records.last().map(|r| json!(r));
    emit(
        a.report.as_ref(),
        json!({
            "checkpoint": out,
            "config": cfg,
            "phase1_final": last(&trained.phase1),
            "phase2_final": last(&trained.phase2),
            "flagged": trained.detection.as_ref().map(|d| d.flagged.len()),
        }),
    )
}

fn load_model(bundle_dir: &Path, given: Option<&PathBuf>) -> Result<(Bundle, Checkpoint)> {
    let ck = Checkpoint::load(checkpoint_path(bundle_dir, given))?;
    let bundle = load_graph(bundle_dir)?;
    Ok((bundle, ck))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (bundle, ck) = load_model(&a.input, a.checkpoint.as_ref())?;
    let (model, _, cfg) = restore(&ck)?;
    let config = cfg.map_or(Value::Null, |c| json!(c));
    let report = evaluate(&model, &bundle.graph, &bundle.split, bundle.ledger.as_ref(), config)?;
    if let Some(path) = &a.per_expert_csv {
        write_text(path, &report.per_expert_csv())?;
    }
    emit(a.report.as_ref(), serde_json::to_value(&report)?)
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let (bundle, ck) = load_model(&a.input, a.checkpoint.as_ref())?;
    let (model, disc, cfg) = restore(&ck)?;
    let mut summary = serde_json::Map::new();
    if let Some(path) = &a.logic_csv {
        let disc = disc.ok_or_else(|| rgmoe::Error::Contract("checkpoint carries no MI discriminator".into()))?;
        let all = cfg.is_some_and(|c| c.logic_all_experts);
        let (tg, _, keep) = training_view(&bundle.graph, &bundle.split)?;
        let vectors = logic_vectors(&disc, &model, &tg, a.rotation, all)?;
        let mut csv = String::from("node,expert,neighbor,mi_value\n");
        for lv in &vectors {
            for &(u, mi) in &lv.entries {
                writeln!(csv, "{},{},{},{}", keep[lv.node], lv.expert, keep[u], mi).expect("write to string");
            }
        }
        write_text(path, &csv)?;
        summary.insert("logic_vectors".into(), json!(vectors.len()));
    }
    let report = detect_inductive(&model, &bundle.graph, &bundle.split)?;
    let quality = DisagreementSummary::new(&report, bundle.ledger.as_ref());
    let dump = json!({
        "nodes": report.nodes,
        "scores": report.scores,
        "mu": report.mu,
        "sigma": report.sigma,
        "threshold": report.threshold,
        "flagged": report.flagged,
        "precision": quality.precision,
        "recall": quality.recall,
    });
    if let Some(path) = &a.disagreement {
        write_json(path, &dump)?;
    }
    summary.insert("disagreement".into(), serde_json::to_value(&quality)?);
    emit(a.report.as_ref(), Value::Object(summary))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<rgmoe::Error>() {
        return e.exit_code() as u8;
    }
    // Anything else is an I/O or serialization failure.
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Attack(a) => attack(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
