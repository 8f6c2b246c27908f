//! Command-line front end: build graphs, analyze cost, train, evaluate and
//! draw heat maps. Every run writes its outputs and a `run.json` under
//! `--out`.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 when the
//! work itself fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sparseagg::architecture::{
    analyze, compare_topologies, comparison_csv, plan_network, NetworkSpec,
};
use sparseagg::introspect::{export_heatmap, weight_heatmap, HeatmapFormat};
use sparseagg::model::Network;
use sparseagg::topology::{build_graph, TopologyKind};
use sparseagg::train::{evaluate, load_cifar10, scaled_milestones, train_model_with, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "sparseagg",
    version,
    about = "Sparse feature aggregation networks"
)]
struct Cli {
    /// Network spec (JSON). Flags override its fields.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving every output of the run.
    #[arg(long, global = true, default_value = "sparseagg-out")]
    out: PathBuf,
    /// CIFAR-10 binary directory (cifar-10-batches-bin).
    #[arg(long, global = true, env = "SPARSEAGG_CIFAR_DIR")]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an aggregation graph and export it.
    Graph(GraphArgs),
    /// Parameter and FLOP report for a spec.
    Analyze(AnalyzeArgs),
    /// Train on CIFAR-10 and save a checkpoint.
    Train(TrainArgs),
    /// Top-1 error of a checkpoint on the CIFAR-10 test split.
    Eval(EvalArgs),
    /// Feature-reuse heat map of a checkpoint or a freshly initialized spec.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
struct GraphArgs {
    /// plain, dense, sparse:<c> or fractal:<columns>; defaults to the spec's.
    #[arg(long)]
    topology: Option<TopologyKind>,
    /// Number of nodes, including node 0. Without it, one graph per block of
    /// the spec is written.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_enum, default_value_t = GraphFormat::Dot)]
    format: GraphFormat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GraphFormat {
    Dot,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    topology: Option<TopologyKind>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
    format: ReportFormat,
    /// Also compare these topologies on the same spec (comma separated).
    #[arg(long, value_delimiter = ',')]
    compare: Vec<TopologyKind>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    topology: Option<TopologyKind>,
    /// Stratified subset of the training split (multiple of 10).
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Epochs at which the learning rate drops tenfold; defaults to 50% and
    /// 75% of the run.
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long)]
    no_augment: bool,
    /// Skip the per-epoch test evaluation.
    #[arg(long)]
    no_test: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// Checkpoint directory; without it the spec is initialized from `--seed`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ImageFormat::Pgm)]
    format: ImageFormat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ImageFormat {
    Csv,
    Pgm,
}

/// Error tagged with the exit code it maps to.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

#[derive(Serialize)]
struct Versions {
    sparseagg: &'static str,
    sparseagg_cli: &'static str,
}

#[derive(Serialize)]
struct RunRecord {
    command: String,
    spec_hash: Option<String>,
    seed: u64,
    versions: Versions,
    started_unix: u64,
    wall_seconds: f64,
}

/// Outcome of a subcommand: the spec hash it worked on, if any.
type Outcome = Result<Option<String>, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            report(&e);
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            report(&e);
            ExitCode::from(2)
        }
    }
}

/// Prints the error chain, skipping causes already quoted by their parent.
fn report(e: &anyhow::Error) {
    let mut line = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !line.contains(&text) {
            if !line.is_empty() {
                line.push_str(": ");
            }
            line.push_str(&text);
        }
    }
    eprintln!("error: {line}");
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // validate the spec before touching anything else
    let spec = cli
        .spec
        .as_deref()
        .map(NetworkSpec::from_file)
        .transpose()
        .map_err(invalid)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let (name, spec_hash) = match &cli.command {
        Command::Graph(args) => ("graph", graph(cli, spec.as_ref(), args)?),
        Command::Analyze(args) => ("analyze", run_analyze(cli, spec.as_ref(), args)?),
        Command::Train(args) => ("train", train(cli, spec.as_ref(), args)?),
        Command::Eval(args) => ("eval", eval(cli, args)?),
        Command::Heatmap(args) => ("heatmap", heatmap(cli, spec.as_ref(), args)?),
    };
    let record = RunRecord {
        command: name.to_string(),
        spec_hash,
        seed: cli.seed,
        versions: Versions {
            sparseagg: sparseagg::VERSION,
            sparseagg_cli: env!("CARGO_PKG_VERSION"),
        },
        started_unix,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write(
        &cli.out.join("run.json"),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn require_spec(spec: Option<&NetworkSpec>, command: &str) -> Result<NetworkSpec, Failure> {
    spec.cloned()
        .ok_or_else(|| invalid(anyhow!("`{command}` needs --spec")))
}

fn with_override(
    spec: NetworkSpec,
    topology: Option<TopologyKind>,
) -> Result<NetworkSpec, Failure> {
    let spec = match topology {
        Some(t) => spec.with_topology(t),
        None => spec,
    };
    spec.validate().map_err(invalid)?;
    Ok(spec)
}

fn data_dir(cli: &Cli) -> Result<&Path, Failure> {
    cli.data.as_deref().ok_or_else(|| {
        invalid(anyhow!(
            "no data directory: pass --data or set SPARSEAGG_CIFAR_DIR"
        ))
    })
}

fn graph(cli: &Cli, spec: Option<&NetworkSpec>, args: &GraphArgs) -> Outcome {
    let ext = match args.format {
        GraphFormat::Dot => "dot",
        GraphFormat::Json => "json",
    };
    let render =
        |g: &sparseagg::topology::AggregationGraph, labels: Option<&[String]>| match args.format {
            GraphFormat::Dot => g.to_dot(labels),
            GraphFormat::Json => g.to_json() + "\n",
        };
    if let Some(layers) = args.layers {
        let topology = args
            .topology
            .or(spec.map(|s| s.topology))
            .ok_or_else(|| invalid(anyhow!("`graph --layers` needs --topology or --spec")))?;
        let g = build_graph(topology, layers).map_err(invalid)?;
        println!(
            "{topology}: {} nodes, {} edges",
            g.num_layers(),
            g.count_edges()
        );
        write(&cli.out.join(format!("graph.{ext}")), render(&g, None))?;
        return Ok(spec.map(NetworkSpec::hash));
    }
    let spec = with_override(require_spec(spec, "graph")?, args.topology)?;
    let plan = plan_network(&spec).map_err(invalid)?;
    for scope in &plan.scopes {
        let g = scope.graph();
        let mut labels = vec!["input".to_string()];
        labels.extend(scope.layers.iter().map(|l| l.name()));
        let block = scope.blocks.first().copied().unwrap_or(scope.index + 1);
        println!(
            "block {block}: {} nodes, {} edges",
            g.num_layers(),
            g.count_edges()
        );
        write(
            &cli.out.join(format!("graph_block{block}.{ext}")),
            render(&g, Some(&labels)),
        )?;
    }
    Ok(Some(spec.hash()))
}

fn run_analyze(cli: &Cli, spec: Option<&NetworkSpec>, args: &AnalyzeArgs) -> Outcome {
    let spec = with_override(require_spec(spec, "analyze")?, args.topology)?;
    let plan = plan_network(&spec).map_err(invalid)?;
    let report = analyze(&plan).map_err(invalid)?;
    println!(
        "{}: {} parameters, {} FLOPs per image",
        spec.name.as_deref().unwrap_or("network"),
        report.total_params,
        report.total_flops
    );
    match args.format {
        ReportFormat::Csv => write(&cli.out.join("report.csv"), report.to_csv())?,
        ReportFormat::Json => write(&cli.out.join("report.json"), report.to_json() + "\n")?,
    }
    if !args.compare.is_empty() {
        let rows = compare_topologies(&spec, &args.compare).map_err(invalid)?;
        write(&cli.out.join("comparison.csv"), comparison_csv(&rows))?;
    }
    Ok(Some(spec.hash()))
}

fn train(cli: &Cli, spec: Option<&NetworkSpec>, args: &TrainArgs) -> Outcome {
    let spec = with_override(require_spec(spec, "train")?, args.topology)?;
    let cfg = TrainConfig {
        base_lr: args.lr,
        milestones: args
            .milestones
            .clone()
            .unwrap_or_else(|| scaled_milestones(args.epochs)),
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        seed: cli.seed,
        augment: !args.no_augment,
        ..TrainConfig::for_epochs(args.epochs)
    };
    cfg.validate().map_err(invalid)?;
    let mut net = Network::<f32>::compile(&spec, cli.seed).map_err(invalid)?;
    let (train_set, test_set) = load_cifar10(data_dir(cli)?, args.subset, cli.seed)?;
    log::info!(
        "training {} parameters on {} images for {} epochs",
        net.param_count(),
        train_set.len(),
        cfg.epochs
    );
    write(
        &cli.out.join("train_config.json"),
        serde_json::to_string_pretty(&cfg)? + "\n",
    )?;
    let test = (!args.no_test).then_some(&test_set);
    let history_path = cli.out.join("history.csv");
    let mut partial = sparseagg::train::History::default();
    let history = train_model_with(&mut net, &train_set, test, &cfg, |record| {
        partial.epochs.push(record.clone());
        if let Err(e) = fs::write(&history_path, partial.to_csv()) {
            log::warn!("could not update {}: {e}", history_path.display());
        }
    })?;
    write(&history_path, history.to_csv())?;
    net.save(&cli.out.join("checkpoint"))?;
    log::info!(
        "checkpoint saved to {}",
        cli.out.join("checkpoint").display()
    );
    Ok(Some(spec.hash()))
}

fn load_checkpoint(dir: &Path) -> Result<Network<f32>, Failure> {
    let spec = Network::<f32>::read_spec(dir).map_err(invalid)?;
    Ok(Network::<f32>::load(dir, &spec)?)
}

fn eval(cli: &Cli, args: &EvalArgs) -> Outcome {
    let net = load_checkpoint(&args.checkpoint)?;
    let (_, test) = load_cifar10(data_dir(cli)?, None, cli.seed)?;
    let report = evaluate(&net, &test, args.batch_size)?;
    println!(
        "top-1 error {:.4} (loss {:.4}) on {} images",
        report.top1_error,
        report.loss,
        test.len()
    );
    let json = serde_json::json!({
        "top1_error": report.top1_error,
        "loss": report.loss,
        "images": test.len(),
        "epoch": net.epoch,
    });
    write(
        &cli.out.join("eval.json"),
        serde_json::to_string_pretty(&json)? + "\n",
    )?;
    Ok(Some(net.spec_hash().to_string()))
}

fn heatmap(cli: &Cli, spec: Option<&NetworkSpec>, args: &HeatmapArgs) -> Outcome {
    let net = match &args.checkpoint {
        Some(dir) => load_checkpoint(dir)?,
        None => {
            let spec = require_spec(spec, "heatmap")?;
            Network::<f32>::compile(&spec, cli.seed).map_err(invalid)?
        }
    };
    let report = weight_heatmap(&net).map_err(invalid)?;
    let (format, file) = match args.format {
        ImageFormat::Csv => (HeatmapFormat::Csv, "heatmap.csv"),
        ImageFormat::Pgm => (HeatmapFormat::Pgm, "heatmap.pgm"),
    };
    let path = cli.out.join(file);
    export_heatmap(&report, &path, format)?;
    log::info!("wrote {}", path.display());
    Ok(Some(net.spec_hash().to_string()))
}
