//! Command-line entry point: dataset generation, training, metric
//! evaluation, latent traversals, and run-comparison reports.
//!
//! Exit codes: 0 success, 2 usage, 3 data/config error, 4 numeric failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nedvae::graphdata::{self, DataError, GenConfig, GraphFamily};
use nedvae::metrics::{self, MetricParams};
use nedvae::model::{LatentGroup, Model};
use nedvae::objective::{ObjectiveError, Variant};
use nedvae::runconfig::{parse_anchor, RunConfig, RunConfigError};
use nedvae::trainer::{self, TrainError};
use nedvae::traversal::{self, BaseCode, TraversalSpec};

#[derive(Parser)]
#[command(name = "nedvae", version, about = "Node-edge disentangled graph auto-encoding")]
struct Cli {
    /// Cap the worker-thread pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a factor-labeled synthetic graph dataset.
    Gen(GenArgs),
    /// Train a model from a run-config file.
    Train(TrainArgs),
    /// Score a trained checkpoint on a dataset.
    Eval(EvalArgs),
    /// Decode latent traversals into DOT/CSV/JSON reports.
    Traverse(TraverseArgs),
    /// Aggregate runs.csv into a comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Graph family: er or ws.
    #[arg(long)]
    family: String,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Run directory for the frozen config, checkpoint and log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    variant: Option<String>,
    /// Dataset file overriding the config's dataset section.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Metric report JSON path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "runs.csv")]
    runs_csv: PathBuf,
    /// Dataset column in runs.csv; defaults to the dataset file stem.
    #[arg(long)]
    dataset_name: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    votes: Option<usize>,
    #[arg(long)]
    test_trials: Option<usize>,
}

#[derive(Args)]
struct TraverseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict graph dumps to one group (e, f or g).
    #[arg(long)]
    group: Option<String>,
    /// Restrict graph dumps to one dimension of the group.
    #[arg(long)]
    dim: Option<usize>,
    /// Value grid as lo:hi:points (default 0:10:11).
    #[arg(long)]
    grid: Option<String>,
    /// Base code: zeros or sample:<index> (needs --dataset).
    #[arg(long, default_value = "zeros")]
    base: String,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Seed pinning the node assignment vector.
    #[arg(long, default_value_t = 0)]
    s_seed: u64,
    /// Skip per-step DOT/JSON dumps; write only the effect profile.
    #[arg(long)]
    no_dumps: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "runs.csv")]
    runs: PathBuf,
    /// Markdown output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RunConfigError> for CliError {
    fn from(e: RunConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { .. } | TrainError::Adam(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<metrics::MetricError> for CliError {
    fn from(e: metrics::MetricError) -> Self {
        match e {
            metrics::MetricError::Forward(err) => CliError::Numeric(err.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<traversal::TraversalError> for CliError {
    fn from(e: traversal::TraversalError) -> Self {
        match e {
            traversal::TraversalError::Forward(err) => CliError::Numeric(err.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Seed precedence: explicit flag, then NED_SEED, then the config value.
fn resolve_seed(flag: Option<u64>, config_value: u64) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Ok(env) = std::env::var("NED_SEED") {
        if let Ok(parsed) = env.parse() {
            return parsed;
        }
    }
    config_value
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Traverse(args) => cmd_traverse(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let family = match args.family.to_ascii_lowercase().as_str() {
        "er" => GraphFamily::Er,
        "ws" => GraphFamily::Ws,
        other => {
            return Err(CliError::Data(format!(
                "unknown family {other:?}; expected er or ws"
            )))
        }
    };
    let seed = resolve_seed(args.seed, 0);
    let config = match family {
        GraphFamily::Er => GenConfig::er_default(args.n, args.samples),
        GraphFamily::Ws => GenConfig::ws_default(args.n, args.samples),
    };
    let ds = graphdata::generate(&config, seed)?;
    graphdata::write_dataset(&ds, &args.out)?;
    println!(
        "wrote {} records ({} family, n = {}, seed = {}) to {}",
        ds.len(),
        family,
        args.n,
        seed,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    config.seed = resolve_seed(args.seed, config.seed);
    if let Some(v) = &args.variant {
        config.objective.variant = v.clone();
    }
    if let Some(p) = &args.dataset {
        config.dataset.path = Some(p.clone());
    }
    if let Some(i) = args.iterations {
        config.train.iterations = i;
    }
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        config.train.learning_rate = lr;
    }
    config.train.seed = config.seed;

    std::fs::create_dir_all(&args.out)?;
    let checkpoint_path = args.out.join("checkpoint.ned");
    config.train.checkpoint_path = Some(checkpoint_path.clone());
    std::fs::write(args.out.join("run.toml"), config.to_toml_string())?;

    let ds = config.resolve_dataset()?;
    if ds.is_empty() {
        return Err(CliError::Data("dataset is empty".into()));
    }
    let sample = &ds.records[0].0;
    let model_config = config.resolve_model(sample.n, sample.k, sample.d)?;
    let objective = config.resolve_objective()?;
    let resume = match &args.resume {
        Some(path) => Some(trainer::load_checkpoint(path)?),
        None => None,
    };
    let (checkpoint, log) = trainer::train(&ds, model_config, objective, &config.train, resume)?;

    let mut log_file = std::fs::File::create(args.out.join("train_log.jsonl"))?;
    for record in &log {
        writeln!(
            log_file,
            "{}",
            serde_json::to_string(record).expect("log record serializes")
        )?;
    }
    let last = log.last().map(|r| r.breakdown.total).unwrap_or(f64::NAN);
    println!(
        "trained {} for {} iterations (seed {}); final loss {:.4}; checkpoint at {}",
        checkpoint.objective_spec.variant,
        checkpoint.iteration,
        config.seed,
        last,
        checkpoint_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let checkpoint = trainer::load_checkpoint(&args.checkpoint)?;
    let ds = graphdata::read_dataset(&args.dataset)?;
    let model = checkpoint.model();
    let seed = resolve_seed(args.seed, 0);
    let mut params = MetricParams::default();
    if let Some(t) = args.trials {
        params.trials = t;
    }
    if let Some(v) = args.votes {
        params.votes = v;
    }
    if let Some(t) = args.test_trials {
        params.test_trials = t;
    }
    let rep = metrics::represent(&ds, &model)?;
    let report = metrics::evaluate_metrics(&rep, &params, seed)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(path) => std::fs::write(path, format!("{json}\n"))?,
        None => println!("{json}"),
    }
    let dataset_name = args.dataset_name.clone().unwrap_or_else(|| {
        args.dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    metrics::append_runs_csv(
        &args.runs_csv,
        &dataset_name,
        checkpoint.objective_spec.variant.name(),
        seed,
        &report,
    )?;
    eprintln!(
        "eval {}: beta={:.2} factor={:.2} dci={:.3} mod={:.3} -> {}",
        checkpoint.objective_spec.variant,
        report.beta_m,
        report.factor_m,
        report.dci,
        report.modularity,
        args.runs_csv.display()
    );
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(CliError::Data(format!(
            "grid must be lo:hi:points, got {spec:?}"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| CliError::Data(format!("bad grid lower bound {:?}", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| CliError::Data(format!("bad grid upper bound {:?}", parts[1])))?;
    let points: usize = parts[2]
        .parse()
        .map_err(|_| CliError::Data(format!("bad grid point count {:?}", parts[2])))?;
    if points == 0 {
        return Err(CliError::Data("grid needs at least one point".into()));
    }
    if points == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

fn cmd_traverse(args: TraverseArgs) -> Result<(), CliError> {
    let checkpoint = trainer::load_checkpoint(&args.checkpoint)?;
    let model: Model<f32> = checkpoint.model();
    let ds = match &args.dataset {
        Some(path) => Some(graphdata::read_dataset(path)?),
        None => None,
    };
    let base = if args.base == "zeros" {
        BaseCode::Zeros
    } else if let Some(idx) = args.base.strip_prefix("sample:") {
        let idx = idx
            .parse()
            .map_err(|_| CliError::Data(format!("bad sample index in {:?}", args.base)))?;
        BaseCode::Sample(idx)
    } else {
        return Err(CliError::Data(format!(
            "base must be zeros or sample:<index>, got {:?}",
            args.base
        )));
    };
    let grid = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => TraversalSpec::default_grid(),
    };
    std::fs::create_dir_all(&args.out)?;

    let profile = traversal::effect_profile(&model, ds.as_ref(), base, &grid, args.s_seed)?;
    let mut csv = std::fs::File::create(args.out.join("effect_profile.csv"))?;
    profile.write_csv(&mut csv)?;

    if !args.no_dumps {
        let groups: Vec<LatentGroup> = match &args.group {
            Some(g) => vec![parse_anchor(g)?],
            None => LatentGroup::ALL.to_vec(),
        };
        for group in groups {
            let size = model.config.group_range(group).len();
            let dims: Vec<usize> = match args.dim {
                Some(d) => vec![d],
                None => (0..size).collect(),
            };
            for dim in dims {
                let spec = TraversalSpec {
                    base,
                    group,
                    dim,
                    grid: grid.clone(),
                    s_seed: args.s_seed,
                };
                let graphs = traversal::traverse(&model, ds.as_ref(), &spec)?;
                let mut jsonl =
                    std::fs::File::create(args.out.join(format!("traversal_{group}{dim}.jsonl")))?;
                for (k, graph) in graphs.iter().enumerate() {
                    let mut dot = std::fs::File::create(
                        args.out.join(format!("traversal_{group}{dim}_{k:02}.dot")),
                    )?;
                    traversal::write_dot(graph, &mut dot)?;
                    traversal::write_traversal_json(graph, k, group, dim, grid[k], &mut jsonl)?;
                }
            }
        }
    }
    println!(
        "wrote effect profile ({} rows) and dumps to {}",
        profile.rows.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Default, Clone)]
struct RunRow {
    beta: Vec<f64>,
    factor: Vec<f64>,
    dci: Vec<f64>,
    modularity: Vec<f64>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.runs)?;
    let mut rows: BTreeMap<(String, String), RunRow> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(CliError::Data(format!(
                "runs.csv line {} has {} fields, expected 7",
                i + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|_| CliError::Data(format!("bad {what} value {s:?} on line {}", i + 1)))
        };
        let entry = rows
            .entry((fields[0].to_string(), fields[1].to_string()))
            .or_default();
        entry.beta.push(parse(fields[3], "beta_m")?);
        entry.factor.push(parse(fields[4], "factor_m")?);
        entry.dci.push(parse(fields[5], "dci")?);
        entry.modularity.push(parse(fields[6], "modularity")?);
    }
    let variant_rank = |name: &str| {
        Variant::ALL
            .iter()
            .position(|v| v.name() == name)
            .unwrap_or(Variant::ALL.len())
    };
    let mut keys: Vec<(String, String)> = rows.keys().cloned().collect();
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(variant_rank(&a.1).cmp(&variant_rank(&b.1))));

    let mut out = String::new();
    out.push_str("| Dataset | Method | beta-M(%) | F-M(%) | DCI | Mod | runs |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for key in keys {
        let row = rows.get_mut(&key).unwrap();
        let runs = row.beta.len();
        out.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:.3} | {:.3} | {} |\n",
            key.0,
            key.1,
            median(&mut row.beta),
            median(&mut row.factor),
            median(&mut row.dci),
            median(&mut row.modularity),
            runs
        ));
    }
    match &args.out {
        Some(path) => std::fs::write(path, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}
