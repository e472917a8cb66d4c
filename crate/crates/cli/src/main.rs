//! `nowcast`: generate synthetic scenarios, build datasets, train, tune,
//! evaluate and export predictions.
//!
//! Exit codes: 0 ok, 2 usage or parse error, 3 IO error, 4 numeric failure.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nowcast_core::features::build_feature_tensor;
use nowcast_core::graph::AdjacencyConfig;
use nowcast_core::io;
use nowcast_core::model::{Ablation, ChannelSet, ModelConfig, ModelParams};
use nowcast_core::scenario::{generate, ScenarioConfig};
use nowcast_core::tensor::Tensor;
use nowcast_core::trainer::{
    class_weights, evaluate, make_windows, parameter_gradient_check, split_validation, train, tune, Evaluation,
    TrainConfig, TrainHistory, Window,
};
use nowcast_core::{Error, FeatureTensor, RegionGraph, Result, StaticFeatures, UnitNode};

use manifest::RunManifest;

const GRAPH_FILE: &str = "graph.json";
const WEIGHTS_FILE: &str = "weights.bin";
const HISTORY_FILE: &str = "history.csv";
const METRICS_FILE: &str = "metrics.json";
const CONFUSION_FILE: &str = "confusion.csv";
const BEST_CONFIG_FILE: &str = "best_config.json";
const GRADCHECK_FILE: &str = "gradcheck.json";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Graph-based urban flood nowcasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario as raw input CSVs.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the normalized dataset and graph files from raw CSVs.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and score it on the held-out span.
    Train(TrainArgs),
    /// Train the learning-rate x dropout grid and keep the best run.
    Tune {
        #[command(flatten)]
        run: TrainArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score saved weights on a split.
    Evaluate(ScoreArgs),
    /// Export per-node class probabilities for a split.
    Predict(ScoreArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long, value_enum)]
    channels: Option<ChannelsArg>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Run configuration supplying the split and class weighting.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    AttentionOff,
    GraphOff,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::AttentionOff => Ablation::AttentionOff,
            AblationArg::GraphOff => Ablation::GraphOff,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelsArg {
    All,
    PhysicsOnly,
}

impl From<ChannelsArg> for ChannelSet {
    fn from(c: ChannelsArg) -> Self {
        match c {
            ChannelsArg::All => ChannelSet::All,
            ChannelsArg::PhysicsOnly => ChannelSet::PhysicsOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PrepareConfig {
    /// Steps used to fit the normalization statistics.
    fit_end: Option<usize>,
    adjacency: AdjacencyConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TuneGrid {
    learning_rates: Vec<f64>,
    dropouts: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 3e-3],
            dropouts: vec![0.0, 0.3],
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    grid: TuneGrid,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NOWCAST_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nowcast: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, seed, out } => cmd_generate(config.as_deref(), seed, &out),
        Command::Prepare { input, config, out } => cmd_prepare(&input, config.as_deref(), &out),
        Command::Train(args) => cmd_train(&args),
        Command::Tune { run, jobs } => cmd_tune(&run, jobs),
        Command::Evaluate(args) => cmd_score(&args, false),
        Command::Predict(args) => cmd_score(&args, true),
        Command::Gradcheck { seed, out } => cmd_gradcheck(seed, out.as_deref()),
    }
}

/// A missing or malformed config is a usage error, not an IO failure.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, manifest: &mut RunManifest) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    if !path.is_file() {
        return Err(Error::usage(format!("config file {} not found", path.display())));
    }
    manifest.config_paths.push(path.to_path_buf());
    manifest.input(path)?;
    io::read_json(path)
}

fn cmd_generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("generate");
    let mut cfg: ScenarioConfig = load_config(config, &mut manifest)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = generate(&cfg)?;
    info!(
        "scenario seed {} (effective {}), label counts {:?}",
        cfg.seed, ds.meta.effective_seed, ds.meta.label_counts
    );
    let files = ds.write(out)?;
    manifest.seeds = vec![cfg.seed, ds.meta.effective_seed];
    manifest.outputs(out, &files)?;
    manifest.finish(out)?;
    Ok(())
}

fn cmd_prepare(input: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("prepare");
    let cfg: PrepareConfig = load_config(config, &mut manifest)?;
    for f in [io::NODES_FILE, io::GAUGES_FILE, io::READINGS_FILE, io::EVENTS_FILE, io::ROAD_STATUS_FILE] {
        manifest.input(&input.join(f))?;
    }
    let (nodes, raw) = io::read_raw_dir(input)?;
    let fit_end = cfg.fit_end.unwrap_or(TrainConfig::default().split);
    let ft = build_feature_tensor(&raw, &nodes, fit_end)?;
    let graph = RegionGraph::build(nodes.clone(), &cfg.adjacency, ModelConfig::default().cheb_k)?;

    let mut files = io::write_dataset(out, &ft)?;
    let nodes_path = out.join(io::NODES_FILE);
    io::write_nodes(&nodes_path, &nodes)?;
    let adjacency_path = out.join(io::ADJACENCY_FILE);
    io::write_adjacency(&adjacency_path, &graph.node_ids(), &graph.edges())?;
    let graph_path = out.join(GRAPH_FILE);
    io::write_json(&graph_path, &cfg.adjacency)?;
    files.extend([nodes_path, adjacency_path, graph_path]);
    manifest.flag("fit_end", fit_end);
    manifest.outputs(out, &files)?;
    manifest.finish(out)?;
    Ok(())
}

struct Loaded {
    data: FeatureTensor,
    nodes: Vec<UnitNode>,
    adjacency: AdjacencyConfig,
}

fn load_data(dir: &Path, manifest: &mut RunManifest) -> Result<Loaded> {
    for f in [io::DATASET_FILE, io::DATASET_META_FILE, io::NODES_FILE, GRAPH_FILE] {
        manifest.input(&dir.join(f))?;
    }
    let data = io::read_dataset(dir)?;
    let nodes = io::read_nodes(&dir.join(io::NODES_FILE))?;
    let adjacency = io::read_json(&dir.join(GRAPH_FILE))?;
    Ok(Loaded { data, nodes, adjacency })
}

fn run_config(args: &TrainArgs, manifest: &mut RunManifest, n_nodes: usize) -> Result<RunConfig> {
    let mut cfg: RunConfig = load_config(args.config.as_deref(), manifest)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(a) = args.ablation {
        cfg.model.ablation = a.into();
    }
    if let Some(c) = args.channels {
        cfg.model.channels = c.into();
    }
    cfg.model.n_nodes = n_nodes;
    manifest.seeds = vec![cfg.train.seed];
    manifest.flag("ablation", cfg.model.ablation.as_str());
    manifest.flag("channels", cfg.model.channels.as_str());
    Ok(cfg)
}

/// Writes weights, history, test metrics, confusion matrix and test
/// predictions; returns their paths.
fn write_run(
    out: &Path,
    loaded: &Loaded,
    graph: &RegionGraph,
    params: &ModelParams,
    history: &TrainHistory,
    train_cfg: &TrainConfig,
) -> Result<Vec<PathBuf>> {
    let cfg = params.config();
    let windows = make_windows(loaded.data.n_steps(), cfg.t_in, cfg.horizon, train_cfg.split)?;
    let weights = [1.0; 3];
    let test = evaluate(&loaded.data, graph, params, &windows.test, &weights)?;
    let p = |f: &str| out.join(f);
    io::write_weights(&p(WEIGHTS_FILE), params)?;
    io::write_bytes(&p(HISTORY_FILE), history.to_csv().as_bytes())?;
    write_scores(out, &test)?;
    io::write_predictions(&p(io::PREDICTIONS_FILE), loaded.data.node_ids(), &test.predictions)?;
    println!("{}", test.report.to_json());
    Ok([WEIGHTS_FILE, HISTORY_FILE, METRICS_FILE, CONFUSION_FILE, io::PREDICTIONS_FILE]
        .iter()
        .map(|f| p(f))
        .collect())
}

fn write_scores(out: &Path, eval: &Evaluation) -> Result<()> {
    let mut json = eval.report.to_json();
    json.push('\n');
    io::write_bytes(&out.join(METRICS_FILE), json.as_bytes())?;
    io::write_bytes(&out.join(CONFUSION_FILE), eval.confusion.to_csv().as_bytes())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::start("train");
    let loaded = load_data(&args.data, &mut manifest)?;
    let cfg = run_config(args, &mut manifest, loaded.data.n_nodes())?;
    let graph = cfg.model.build_graph(loaded.nodes.clone(), &loaded.adjacency)?;
    let (params, history) = train(&loaded.data, &graph, &cfg.model, &cfg.train)?;
    info!("best epoch {}", history.best_epoch);
    let files = write_run(&args.out, &loaded, &graph, &params, &history, &cfg.train)?;
    manifest.outputs(&args.out, &files)?;
    manifest.finish(&args.out)?;
    Ok(())
}

fn cmd_tune(args: &TrainArgs, jobs: usize) -> Result<()> {
    let mut manifest = RunManifest::start("tune");
    let loaded = load_data(&args.data, &mut manifest)?;
    let cfg = run_config(args, &mut manifest, loaded.data.n_nodes())?;
    manifest.flag("jobs", jobs);
    let graph = cfg.model.build_graph(loaded.nodes.clone(), &loaded.adjacency)?;
    let result = tune(
        &loaded.data,
        &graph,
        &cfg.model,
        &cfg.train,
        &cfg.grid.learning_rates,
        &cfg.grid.dropouts,
        jobs,
    )?;
    let mut files = write_run(
        &args.out,
        &loaded,
        &graph,
        &result.best_params,
        &result.best_history,
        &result.best_config,
    )?;
    let board = args.out.join(io::LEADERBOARD_FILE);
    io::write_leaderboard(&board, &result.leaderboard)?;
    let best = args.out.join(BEST_CONFIG_FILE);
    io::write_json(&best, &result.best_config)?;
    files.extend([board, best]);
    manifest.outputs(&args.out, &files)?;
    manifest.finish(&args.out)?;
    Ok(())
}

fn split_windows(data: &FeatureTensor, model: &ModelConfig, cfg: &TrainConfig, split: Split) -> Result<Vec<Window>> {
    let windows = make_windows(data.n_steps(), model.t_in, model.horizon, cfg.split)?;
    Ok(match split {
        Split::Train => windows.train,
        Split::Val => split_validation(&windows.train, cfg.val_fraction).1,
        Split::Test => windows.test,
    })
}

fn cmd_score(args: &ScoreArgs, predict: bool) -> Result<()> {
    let mut manifest = RunManifest::start(if predict { "predict" } else { "evaluate" });
    let loaded = load_data(&args.data, &mut manifest)?;
    manifest.input(&args.weights)?;
    let cfg: RunConfig = load_config(args.config.as_deref(), &mut manifest)?;
    let params = io::read_weights(&args.weights)?;
    let model = params.config();
    if model.n_nodes != loaded.data.n_nodes() {
        return Err(Error::usage(format!(
            "weights expect {} nodes, dataset has {}",
            model.n_nodes,
            loaded.data.n_nodes()
        )));
    }
    manifest.seeds = vec![model.seed];
    manifest.flag("split", args.split.as_str());
    manifest.flag("ablation", model.ablation.as_str());
    manifest.flag("channels", model.channels.as_str());
    let graph = model.build_graph(loaded.nodes.clone(), &loaded.adjacency)?;
    let all_train = split_windows(&loaded.data, model, &cfg.train, Split::Train)?;
    let windows = split_windows(&loaded.data, model, &cfg.train, args.split)?;
    // Loss uses the class weights training used.
    let labels: Vec<usize> = all_train.iter().flat_map(|w| loaded.data.labels_at(w.target)).collect();
    let weights = class_weights(&labels, cfg.train.class_weights)?;
    let eval = evaluate(&loaded.data, &graph, &params, &windows, &weights)?;
    let files = if predict {
        let path = args.out.join(io::PREDICTIONS_FILE);
        io::write_predictions(&path, loaded.data.node_ids(), &eval.predictions)?;
        vec![path]
    } else {
        write_scores(&args.out, &eval)?;
        println!("{}", eval.report.to_json());
        vec![args.out.join(METRICS_FILE), args.out.join(CONFUSION_FILE)]
    };
    manifest.flag("loss", format!("{:e}", eval.loss));
    manifest.outputs(&args.out, &files)?;
    manifest.finish(&args.out)?;
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport {
    seed: u64,
    eps: f64,
    tolerance: f64,
    groups: Vec<(String, f64)>,
    max_relative_error: f64,
}

/// Three nodes, a four-step window and one block, as in the test suite.
fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::start("gradcheck");
    manifest.seeds = vec![seed];
    let model = ModelConfig {
        n_nodes: 3,
        widths: vec![4],
        t_in: 4,
        seed,
        ..ModelConfig::default()
    };
    let nodes: Vec<UnitNode> = [(0.0, 0.0), (1000.0, 0.0), (0.0, 1500.0)]
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| UnitNode {
            id: format!("g{i}"),
            x,
            y,
            static_features: StaticFeatures {
                in_floodplain: i == 0,
                residential_ratio: 0.3 + 0.2 * i as f64,
                watershed_id: format!("w{}", i % 2),
                dist_coast: y,
                dist_stream: x,
            },
        })
        .collect();
    let graph = model.build_graph(nodes, &AdjacencyConfig::default())?;
    let params = ModelParams::init(&model)?;
    let x = Tensor::from_fn([3, model.in_channels, 4], |i| {
        ((i[0] * 31 + i[1] * 7 + i[2] * 3 + seed as usize) as f64 * 0.37).sin()
    })?;
    let labels = [0, 1, 2];
    let eps = 1e-5;
    let groups = parameter_gradient_check(&x, &labels, &graph, &params, eps)?;
    let worst = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    for (name, err) in &groups {
        println!("{name:<16} {err:.3e}");
    }
    println!("max relative error {worst:.3e}");
    if let Some(dir) = out {
        let path = dir.join(GRADCHECK_FILE);
        let report = GradcheckReport {
            seed,
            eps,
            tolerance: GRADCHECK_TOLERANCE,
            groups,
            max_relative_error: worst,
        };
        io::write_json(&path, &report)?;
        manifest.outputs(dir, &[path])?;
        manifest.finish(dir)?;
    }
    if worst >= GRADCHECK_TOLERANCE {
        return Err(Error::domain(format!(
            "gradient mismatch {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}
