//! Command-line entry point: generate synthetic datasets, train, evaluate,
//! run the configuration ablation ladder, and report graph statistics.
//!
//! Exit codes: 0 success, 1 user error (bad flags, malformed inputs),
//! 2 internal error (numeric failure or a bug).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fraudgnn::checkpoint;
use fraudgnn::config::RunConfig;
use fraudgnn::graph::MultiRelationGraph;
use fraudgnn::model::CandidateCache;
use fraudgnn::synth::{self, SynthConfig};
use fraudgnn::train::{
    self, ablation_csv, eval_csv, loss_csv, run_ablation, stratified_split, thresholds_csv,
    TrainError,
};

/// Environment variable that overrides every output directory.
const OUTPUT_DIR_ENV: &str = "FRAUDGNN_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "fraudgnn", version, about = "Fraud detection on multi-relation graphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint + CSV logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the four-stage configuration ladder over shared seeds.
    Ablate(AblateArgs),
    /// Print and save per-relation degree statistics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset shape: `sparse` (Yelp-like) or `dense` (Amazon-like).
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 2000)]
    nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    fraud_ratio: Option<f64>,
    /// Comma-separated per-relation mean degrees, e.g. `4,8,10`.
    #[arg(long)]
    degrees: Option<String>,
    #[arg(long)]
    intra_pref: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    camouflage: Option<f64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    sim_embed_dim: Option<usize>,
    /// First layer using 2-hop candidates; layers+1 disables.
    #[arg(long)]
    iis_start: Option<usize>,
    /// `l1` or `cosine`.
    #[arg(long)]
    similarity: Option<String>,
    /// `none`, `node`, or `batch`.
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    lambda_sim: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `train`, `test`, or `all`.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of shared seeds (seed, seed+1, ...).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn user(e: impl std::fmt::Display) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Internal(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let outcome = std::panic::catch_unwind(run);
    match outcome {
        Ok(Ok(())) => ExitCode::from(0),
        Ok(Err(CliError::User(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Ok(Err(CliError::Internal(msg))) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<(), CliError> {
    match Cli::parse().cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Stats(args) => cmd_stats(args),
    }
}

fn resolve_out(flag: Option<PathBuf>, cfg_dir: Option<&Path>, fallback: &str) -> PathBuf {
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        return PathBuf::from(dir);
    }
    flag.or_else(|| cfg_dir.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::User(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::User(format!("cannot write {}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<MultiRelationGraph, CliError> {
    MultiRelationGraph::load(path).map_err(CliError::user)
}

impl ConfigArgs {
    fn build(&self, dataset: &Path) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(file) = &self.config {
            let text = fs::read_to_string(file)
                .map_err(|e| CliError::User(format!("cannot read {}: {e}", file.display())))?;
            cfg.apply_text(&text).map_err(CliError::user)?;
        }
        let mut overrides: Vec<(&str, String)> = Vec::new();
        macro_rules! push {
            ($key:literal, $field:expr) => {
                if let Some(v) = &$field {
                    overrides.push(($key, v.to_string()));
                }
            };
        }
        push!("seed", self.seed);
        push!("epochs", self.epochs);
        push!("batch_size", self.batch_size);
        push!("train_frac", self.train_frac);
        push!("layers", self.layers);
        push!("hidden_dim", self.hidden_dim);
        push!("sim_embed_dim", self.sim_embed_dim);
        push!("iis_start", self.iis_start);
        push!("similarity", self.similarity);
        push!("norm", self.norm);
        push!("lambda_sim", self.lambda_sim);
        push!("lr", self.lr);
        for (key, value) in overrides {
            cfg.set(key, &value, 0).map_err(CliError::user)?;
        }
        cfg.dataset = Some(dataset.to_path_buf());
        cfg.validate().map_err(CliError::user)?;
        Ok(cfg)
    }
}

fn stats_csv(graph: &MultiRelationGraph) -> String {
    let stats = graph.degree_stats();
    let mut out = String::from("# degree_stats v1\n");
    let _ = writeln!(out, "# density={}", stats.density);
    out.push_str("relation,mean_degree,max_degree,edges\n");
    for (r, rel) in stats.per_relation.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", r + 1, rel.mean_degree, rel.max_degree, rel.edges);
    }
    out
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let out = resolve_out(args.out.clone(), None, "dataset");
    let mut cfg = match args.preset.as_str() {
        "sparse" => SynthConfig::sparse(args.nodes, args.seed),
        "dense" => SynthConfig::dense(args.nodes, args.seed),
        other => return Err(CliError::User(format!("unknown preset {other:?}"))),
    };
    if let Some(v) = args.fraud_ratio {
        cfg.fraud_ratio = v;
    }
    if let Some(list) = &args.degrees {
        let degrees: Result<Vec<f64>, _> = list.split(',').map(|s| s.trim().parse()).collect();
        cfg.mean_degrees = degrees.map_err(|e| CliError::User(format!("bad --degrees: {e}")))?;
    }
    if let Some(v) = args.intra_pref {
        cfg.intra_class_preference = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = args.separation {
        cfg.class_separation = v;
    }
    if let Some(v) = args.camouflage {
        cfg.camouflage_rate = v;
    }

    let graph = synth::generate(&cfg).map_err(CliError::user)?;
    ensure_dir(&out)?;
    graph.save(&out).map_err(CliError::user)?;
    write_file(&out.join("stats.csv"), &stats_csv(&graph))?;
    println!(
        "wrote {} nodes, {} relations, {} edges to {}",
        graph.num_nodes(),
        graph.num_relations(),
        graph.total_edges(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let graph = load_graph(&args.data)?;
    let cfg = args.cfg.build(&args.data)?;
    let out_dir = resolve_out(args.out.clone(), cfg.output_dir.as_deref(), "run");
    ensure_dir(&out_dir)?;

    let result = train::train(&graph, &cfg)?;
    checkpoint::save(&out_dir.join("checkpoint.json"), &result.model, &cfg)
        .map_err(CliError::user)?;
    write_file(&out_dir.join("loss_per_layer.csv"), &loss_csv(&result.logs))?;
    write_file(&out_dir.join("thresholds.csv"), &thresholds_csv(&result.logs))?;
    write_file(&out_dir.join("eval_per_epoch.csv"), &eval_csv(&result.logs))?;

    let last = result.logs.last().expect("at least one epoch");
    println!("trained {} epochs; held-out metrics:", last.epoch);
    print!("{}", last.eval.to_kv_block());
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let ckpt = checkpoint::load(&args.checkpoint).map_err(CliError::user)?;
    let graph = load_graph(&args.data)?;
    if graph.feature_dim() != ckpt.model.feature_dim {
        return Err(CliError::User(format!(
            "dataset feature dim {} does not match checkpoint {}",
            graph.feature_dim(),
            ckpt.model.feature_dim
        )));
    }
    if graph.num_relations() != ckpt.model.num_relations {
        return Err(CliError::User(format!(
            "dataset has {} relations, checkpoint expects {}",
            graph.num_relations(),
            ckpt.model.num_relations
        )));
    }
    let split = stratified_split(graph.labels(), ckpt.run.train_frac, ckpt.run.seed);
    let nodes: Vec<u32> = match args.split.as_str() {
        "train" => split.train,
        "test" => split.test,
        "all" => (0..graph.num_nodes() as u32).collect(),
        other => return Err(CliError::User(format!("unknown split {other:?}"))),
    };
    let cache = CandidateCache::build(&graph, ckpt.model.needs_two_hop());
    let report = train::evaluate(&ckpt.model, &graph, &cache, &nodes, ckpt.run.batch_size)
        .map_err(CliError::user)?;
    print!("{}", report.to_kv_block());

    let out_dir = resolve_out(args.out.clone(), ckpt.run.output_dir.as_deref(), "run");
    ensure_dir(&out_dir)?;
    let mut csv = String::from("# eval_report v1\n");
    let _ = writeln!(csv, "split,{}", fraudgnn::metrics::EvalReport::CSV_HEADER);
    let _ = writeln!(csv, "{},{}", args.split, report.to_csv_row());
    write_file(&out_dir.join("eval_report.csv"), &csv)?;
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let graph = load_graph(&args.data)?;
    let base = args.cfg.build(&args.data)?;
    let out_dir = resolve_out(args.out.clone(), base.output_dir.as_deref(), "run");
    ensure_dir(&out_dir)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| base.seed + i).collect();
    let rows = run_ablation(&graph, &base, &seeds)?;
    write_file(&out_dir.join("ablation.csv"), &ablation_csv(&rows))?;
    for stage in fraudgnn::train::AblationStage::ALL {
        let mut recalls: Vec<f64> = rows
            .iter()
            .filter(|r| r.stage == stage.name())
            .map(|r| r.recall)
            .collect();
        recalls.sort_by(f64::total_cmp);
        let median = recalls[recalls.len() / 2];
        println!("{}: median recall {}", stage.name(), median);
    }
    println!("wrote {}", out_dir.join("ablation.csv").display());
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let graph = load_graph(&args.data)?;
    let csv = stats_csv(&graph);
    print!("{csv}");
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                ensure_dir(parent)?;
            }
        }
        write_file(out, &csv)?;
    }
    Ok(())
}
