//! Thin command-line layer over the library: argument parsing, config-file
//! merging, manifests and exit-code mapping. All real work happens in the
//! library modules; the runnable examples cover the same ground in code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::condense::{self, CondenseConfig, CondensedGraph};
use crate::error::{Error, Result};
use crate::eval::{self, round_sig, LpTarget};
use crate::graph::{self, GraphBundle};
use crate::rng::Rng;
use crate::spectral;
use crate::synth;

#[derive(Parser, Debug)]
#[command(
    name = "graphcondense",
    version,
    about = "Condense attributed graphs into tiny synthetic graphs that keep \
             link-prediction utility while blunting membership inference",
    after_help = "Config file keys (flat key=value, one per line, overridden by flags):\n  \
        rate | reduction_rate, repeats, epochs, lr_feat, lr_struct, lr_sgc, beta,\n  \
        tau1, tau2, curvature, sgc_layers, hidden_units, outer_loops, inner_loops,\n  \
        k_eig, per_class_sample_size, momentum, weight_decay, selection,\n  \
        checkpoint_every, edge_threshold, strict_inner_adjacency, seed\n\n\
        The GC_LOG environment variable controls log verbosity (error..trace)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for repeat-level parallelism (1 keeps runs bit-stable
    /// by construction; higher counts produce the same artifacts).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset bundle.
    Synth(SynthArgs),
    /// Score nodes spectrally and emit the per-class selection.
    Select(SelectArgs),
    /// Run the full condensation loop and write the artifact directory.
    Condense(CondenseArgs),
    /// Evaluate a condensed graph (or an original bundle) on one task.
    Eval(EvalArgs),
    /// Render a condensed graph to DOT (weight-scaled pen widths).
    ExportDot(ExportDotArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator: sbm or ba.
    #[arg(long, default_value = "sbm")]
    pub kind: String,
    #[arg(long, default_value_t = 1000)]
    pub nodes: usize,
    /// SBM community count (doubles as the class count).
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0.05)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.002)]
    pub p_out: f64,
    /// Preferential-attachment edges per new node.
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    /// Class count for ba (sbm uses --blocks).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub features: usize,
    /// Per-coordinate feature noise around the class centroid.
    #[arg(long, default_value_t = synth::DEFAULT_FEATURE_NOISE)]
    pub noise: f64,
    #[arg(long, default_value = "synthetic")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    /// Bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Budget as a fraction of train nodes.
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub k_eig: Option<usize>,
    #[arg(long, default_value_t = spectral::DEFAULT_SIMILARITY_EPSILON)]
    pub epsilon: f64,
}

#[derive(Args, Debug)]
pub struct CondenseArgs {
    /// Bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Budget as a fraction of train nodes (required here or in the config
    /// file).
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_feat: Option<f64>,
    #[arg(long)]
    pub lr_struct: Option<f64>,
    #[arg(long)]
    pub lr_sgc: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau1: Option<usize>,
    #[arg(long)]
    pub tau2: Option<usize>,
    #[arg(long)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub sgc_layers: Option<usize>,
    #[arg(long)]
    pub hidden_units: Option<usize>,
    #[arg(long)]
    pub outer_loops: Option<usize>,
    #[arg(long)]
    pub inner_loops: Option<usize>,
    #[arg(long)]
    pub k_eig: Option<usize>,
    #[arg(long)]
    pub per_class_sample: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// algebraic-jaccard (default) or random.
    #[arg(long)]
    pub selection: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub edge_threshold: Option<f64>,
    /// Rebuild the synthetic adjacency inside the class loop (slower,
    /// identical results).
    #[arg(long)]
    pub strict_inner_adjacency: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub task: EvalTask,
}

#[derive(Subcommand, Debug)]
pub enum EvalTask {
    /// Link-prediction F1 on held-out original edges.
    Lp(LpTaskArgs),
    /// Node membership-inference attack accuracy.
    Mia(AttackTaskArgs),
    /// Link membership-inference attack F1.
    Lmia(AttackTaskArgs),
    /// Node/edge counts and density.
    Stats(StatsTaskArgs),
    /// Training wall-clock and artifact size.
    Efficiency(EfficiencyTaskArgs),
}

#[derive(Args, Debug)]
pub struct LpTaskArgs {
    /// Original bundle directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Condensed artifact directory; omit to evaluate the original graph.
    #[arg(long)]
    pub condensed: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub edge_threshold: f64,
}

#[derive(Args, Debug)]
pub struct AttackTaskArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Condensed artifact directory; omit to attack an original-trained
    /// target.
    #[arg(long)]
    pub condensed: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub edge_threshold: f64,
}

#[derive(Args, Debug)]
pub struct StatsTaskArgs {
    /// Original bundle directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Condensed artifact directory.
    #[arg(long)]
    pub condensed: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub edge_threshold: f64,
}

#[derive(Args, Debug)]
pub struct EfficiencyTaskArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub condensed: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub edge_threshold: f64,
}

#[derive(Args, Debug)]
pub struct ExportDotArgs {
    /// Condensed artifact directory.
    #[arg(long)]
    pub condensed: PathBuf,
    /// Edges at or below this weight are omitted.
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
}

#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    tool_version: String,
    seed: u64,
    config_hash: String,
    started_at: String,
    finished_at: String,
    outputs: Vec<String>,
    config: serde_json::Value,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::Config("--out <dir> is required for this command".into()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_manifest(
    dir: &Path,
    started_at: String,
    seed: u64,
    config_hash: String,
    config: serde_json::Value,
    outputs: Vec<String>,
) -> Result<()> {
    let manifest = RunManifest {
        command: std::env::args().collect(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config_hash,
        started_at,
        finished_at: now(),
        outputs,
        config,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn load_config_file(cfg: &mut CondenseConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                lineno + 1
            )));
        };
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    Ok(())
}

/// Resolve the effective condensation config: defaults, then the config
/// file, then CLI flags.
fn resolve_condense_config(cli: &Cli, args: &CondenseArgs) -> Result<CondenseConfig> {
    let mut cfg = CondenseConfig::default();
    if let Some(path) = &cli.config {
        load_config_file(&mut cfg, path)?;
    }
    if let Some(rate) = args.rate {
        cfg.reduction_rate = rate;
    } else if cli.config.is_none() {
        return Err(Error::Config(
            "--rate is required (or supply reduction_rate in a config file)".into(),
        ));
    }
    macro_rules! merge {
        ($($field:ident <- $arg:expr),* $(,)?) => {
            $(if let Some(v) = $arg { cfg.$field = v; })*
        };
    }
    merge!(
        repeats <- args.repeats,
        epochs <- args.epochs,
        lr_feat <- args.lr_feat,
        lr_struct <- args.lr_struct,
        lr_sgc <- args.lr_sgc,
        beta <- args.beta,
        tau1 <- args.tau1,
        tau2 <- args.tau2,
        curvature <- args.curvature,
        sgc_layers <- args.sgc_layers,
        hidden_units <- args.hidden_units,
        outer_loops <- args.outer_loops,
        inner_loops <- args.inner_loops,
        momentum <- args.momentum,
        weight_decay <- args.weight_decay,
        checkpoint_every <- args.checkpoint_every,
        edge_threshold <- args.edge_threshold,
        seed <- cli.seed,
    );
    if let Some(k) = args.k_eig {
        cfg.k_eig = Some(k);
    }
    if let Some(s) = args.per_class_sample {
        cfg.per_class_sample_size = Some(s);
    }
    if let Some(sel) = &args.selection {
        cfg.selection = sel.parse()?;
    }
    if args.strict_inner_adjacency {
        cfg.strict_inner_adjacency = true;
    }
    Ok(cfg)
}

fn load_condensed_arg(path: &Path) -> Result<CondensedGraph> {
    condense::load_condensed(path)
}

/// Execute a parsed command; returns the process exit path via `Result`.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(&cli, args),
        Command::Select(args) => cmd_select(&cli, args),
        Command::Condense(args) => cmd_condense(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::ExportDot(args) => cmd_export_dot(&cli, args),
    }
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let bundle = match args.kind.as_str() {
        "sbm" => synth::generate_sbm_with_noise(
            &args.name,
            args.nodes,
            args.blocks,
            args.p_in,
            args.p_out,
            args.features,
            args.noise,
            seed,
        )?,
        "ba" => synth::generate_ba_with_noise(
            &args.name,
            args.nodes,
            args.m,
            args.classes,
            args.features,
            args.noise,
            seed,
        )?,
        other => {
            return Err(Error::Config(format!(
                "unknown generator '{other}' (expected sbm or ba)"
            )))
        }
    };
    graph::save_bundle(&bundle, out)?;
    let config = json!({
        "kind": args.kind, "nodes": args.nodes, "blocks": args.blocks,
        "p_in": args.p_in, "p_out": args.p_out, "m": args.m,
        "classes": args.classes, "features": args.features,
        "noise": args.noise, "name": args.name,
    });
    write_manifest(
        out,
        started,
        seed,
        String::new(),
        config,
        graph::bundle_files(out)
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    )?;
    println!(
        "wrote bundle '{}': {} nodes, {} edges, {} classes",
        bundle.name,
        bundle.num_nodes,
        bundle.num_edges(),
        bundle.num_classes
    );
    Ok(())
}

fn cmd_select(cli: &Cli, args: &SelectArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let g = graph::load_bundle(&args.data)?;
    let budget = condense::budget_from_rate(&g, args.rate)?;
    let k_eig = args
        .k_eig
        .unwrap_or_else(|| spectral::default_k_eig(g.num_classes, g.num_nodes));
    let lap = spectral::laplacian(&g);
    let cache = spectral::smallest_eigenvectors(&lap, k_eig)?;
    let scores = spectral::algebraic_jaccard_scores(&cache, args.epsilon);
    let selection = spectral::select_nodes(&g, &scores, &budget)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let s = &scores.mean_similarity;
    let stats = json!({
        "min": round_sig(s.iter().cloned().fold(f64::INFINITY, f64::min), 6),
        "max": round_sig(s.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 6),
        "mean": round_sig(s.iter().sum::<f64>() / s.len() as f64, 6),
    });
    let body = json!({
        "selected": selection.selected,
        "per_class_budget": selection.per_class_budget,
        "mean_similarity_stats": stats,
    });
    write_json(&out.join("selection.json"), &body)?;
    let config = json!({
        "data": args.data.display().to_string(),
        "rate": args.rate, "k_eig": k_eig, "epsilon": args.epsilon,
    });
    write_manifest(
        out,
        started,
        seed,
        String::new(),
        config,
        vec![out.join("selection.json").display().to_string()],
    )?;
    println!(
        "selected {} nodes across {} classes",
        selection.selected.len(),
        budget.len()
    );
    Ok(())
}

fn cmd_condense(cli: &Cli, args: &CondenseArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let g = graph::load_bundle(&args.data)?;
    let cfg = resolve_condense_config(cli, args)?;
    let output = condense::condense_with_threads(&g, &cfg, cli.threads.max(1))?;
    condense::save_artifact(&output.graph, &output.history, &output.net, out)?;
    let config = serde_json::to_value(&cfg)
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
    write_manifest(
        out,
        started,
        cfg.seed,
        cfg.hash(),
        config,
        condense::artifact_files(out)
            .iter()
            .map(|p| p.display().to_string())
            .chain([out.join("history.csv").display().to_string()])
            .collect(),
    )?;
    println!(
        "condensed '{}' to {} nodes (best val F1 {:.4}, repeat {}, epoch {})",
        g.name,
        output.graph.num_nodes(),
        output.best_val_f1,
        output.best_repeat,
        output.best_epoch
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    match &args.task {
        EvalTask::Lp(t) => eval_lp(cli, t),
        EvalTask::Mia(t) => eval_mia(cli, t),
        EvalTask::Lmia(t) => eval_lmia(cli, t),
        EvalTask::Stats(t) => eval_stats(cli, t),
        EvalTask::Efficiency(t) => eval_efficiency(cli, t),
    }
}

fn attack_context(
    t: &AttackTaskArgs,
) -> Result<(GraphBundle, Option<CondensedGraph>)> {
    let g = graph::load_bundle(&t.data)?;
    let cond = t.condensed.as_deref().map(load_condensed_arg).transpose()?;
    Ok((g, cond))
}

fn report_body(
    task: &str,
    dataset: &str,
    rate: Option<f64>,
    report: &eval::Report,
) -> serde_json::Value {
    let r = report.rounded();
    json!({
        "task": task,
        "dataset": dataset,
        "rate": rate,
        "metric": r.metric,
        "runs": r.runs,
        "mean": r.mean,
        "std": r.std_dev,
    })
}

fn eval_lp(cli: &Cli, t: &LpTaskArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let g = graph::load_bundle(&t.data)?;
    let cond = t.condensed.as_deref().map(load_condensed_arg).transpose()?;
    let target = match &cond {
        Some(c) => LpTarget::Condensed(c),
        None => LpTarget::Original(&g),
    };
    let report = eval::lp_report(&target, &g, t.runs, seed, t.edge_threshold)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("report.json"), &report_body("lp", &g.name, None, &report))?;
    write_manifest(
        out,
        started,
        seed,
        String::new(),
        json!({"data": t.data.display().to_string(),
               "condensed": t.condensed.as_ref().map(|p| p.display().to_string()),
               "runs": t.runs, "edge_threshold": t.edge_threshold}),
        vec![out.join("report.json").display().to_string()],
    )?;
    println!("lp f1: {}", report.format_percent());
    Ok(())
}

fn eval_mia(cli: &Cli, t: &AttackTaskArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let (g, cond) = attack_context(t)?;
    let target = match &cond {
        Some(c) => eval::train_node_classifier_condensed(c, seed),
        None => eval::train_node_classifier_bundle(&g, seed),
    };
    let report = eval::attack_mia(&target, &g, t.runs, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("report.json"), &report_body("mia", &g.name, None, &report))?;
    write_manifest(
        out,
        started,
        seed,
        String::new(),
        json!({"data": t.data.display().to_string(),
               "condensed": t.condensed.as_ref().map(|p| p.display().to_string()),
               "runs": t.runs}),
        vec![out.join("report.json").display().to_string()],
    )?;
    println!("mia accuracy: {}", report.format_percent());
    Ok(())
}

fn eval_lmia(cli: &Cli, t: &AttackTaskArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let (g, cond) = attack_context(t)?;
    let split = eval::EdgeSplit::build(&g, Rng::new(seed).split("edge-split", 0).seed())?;
    let target = match &cond {
        Some(c) => eval::train_lp_condensed(c, t.edge_threshold, seed)?,
        None => eval::train_lp_bundle(&g, &split, seed),
    };
    let report = eval::attack_lmia(&target, &g, &split, t.runs, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("report.json"), &report_body("lmia", &g.name, None, &report))?;
    write_manifest(
        out,
        started,
        seed,
        String::new(),
        json!({"data": t.data.display().to_string(),
               "condensed": t.condensed.as_ref().map(|p| p.display().to_string()),
               "runs": t.runs, "edge_threshold": t.edge_threshold}),
        vec![out.join("report.json").display().to_string()],
    )?;
    println!("lmia f1: {}", report.format_percent());
    Ok(())
}

fn eval_stats(cli: &Cli, t: &StatsTaskArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let (name, stats) = match (&t.condensed, &t.data) {
        (Some(c), _) => {
            let cond = load_condensed_arg(c)?;
            (
                cond.provenance.dataset.clone(),
                eval::stats_condensed(&cond, t.edge_threshold),
            )
        }
        (None, Some(d)) => {
            let g = graph::load_bundle(d)?;
            (g.name.clone(), eval::stats_bundle(&g))
        }
        (None, None) => {
            return Err(Error::Config(
                "eval stats needs --condensed or --data".into(),
            ))
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let body = json!({
        "dataset": name,
        "nodes": stats.nodes,
        "edges": stats.edges,
        "density": round_sig(stats.density, 6),
    });
    write_json(&out.join("stats.json"), &body)?;
    write_manifest(
        out,
        started,
        seed,
        String::new(),
        json!({"condensed": t.condensed.as_ref().map(|p| p.display().to_string()),
               "data": t.data.as_ref().map(|p| p.display().to_string()),
               "edge_threshold": t.edge_threshold}),
        vec![out.join("stats.json").display().to_string()],
    )?;
    println!(
        "nodes {}, edges {}, density {:.2}%",
        stats.nodes,
        stats.edges,
        stats.density * 100.0
    );
    Ok(())
}

fn eval_efficiency(cli: &Cli, t: &EfficiencyTaskArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let g = graph::load_bundle(&t.data)?;
    let original = eval::measure_efficiency(
        &LpTarget::Original(&g),
        &g,
        Some(&t.data),
        t.epochs,
        seed,
        t.edge_threshold,
    )?;
    let mut body = json!({
        "task": "efficiency",
        "dataset": g.name,
        "epochs": t.epochs,
        "original": {
            "seconds": round_sig(original.seconds, 6),
            "artifact_bytes": original.artifact_bytes,
        },
    });
    if let Some(cdir) = &t.condensed {
        let cond = load_condensed_arg(cdir)?;
        let condensed = eval::measure_efficiency(
            &LpTarget::Condensed(&cond),
            &g,
            Some(cdir),
            t.epochs,
            seed,
            t.edge_threshold,
        )?;
        body["condensed"] = json!({
            "seconds": round_sig(condensed.seconds, 6),
            "artifact_bytes": condensed.artifact_bytes,
        });
        body["speedup"] = json!(round_sig(original.seconds / condensed.seconds.max(1e-9), 6));
        body["storage_ratio"] = json!(round_sig(
            original.artifact_bytes as f64 / (condensed.artifact_bytes.max(1)) as f64,
            6
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("report.json"), &body)?;
    write_manifest(
        out,
        started,
        seed,
        String::new(),
        json!({"data": t.data.display().to_string(),
               "condensed": t.condensed.as_ref().map(|p| p.display().to_string()),
               "epochs": t.epochs}),
        vec![out.join("report.json").display().to_string()],
    )?;
    println!("efficiency report written to {}", out.join("report.json").display());
    Ok(())
}

fn cmd_export_dot(cli: &Cli, args: &ExportDotArgs) -> Result<()> {
    let started = now();
    let out = require_out(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let cond = load_condensed_arg(&args.condensed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dot_path = out.join("graph.dot");
    eval::export_dot_condensed(&cond, &dot_path, args.threshold)?;
    write_manifest(
        out,
        started,
        seed,
        String::new(),
        json!({"condensed": args.condensed.display().to_string(),
               "threshold": args.threshold}),
        vec![dot_path.display().to_string()],
    )?;
    println!("wrote {}", dot_path.display());
    Ok(())
}
