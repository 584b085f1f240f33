use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use rackopt::bench::{self, ExperimentConfig, ReportFormat};
use rackopt::heuristic::{identity_order, solve_ordered};
use rackopt::instgen::{batch_seed, generate_instance, GeneratorConfig};
use rackopt::io;
use rackopt::model::constraint_report;
use rackopt::objective::Objective;
use rackopt::oracle;
use rackopt::ordering::{self, checkpoint, train::write_curve_csv, TrainConfig};
use rackopt::{Error, HeuristicConfig};

#[derive(Parser)]
#[command(name = "rackopt", version, about = "Rack placement optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic instances.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Solve one instance file.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instance: PathBuf,
        /// Comma-separated rack-type order; identity when omitted.
        #[arg(long, conflicts_with_all = ["policy", "exhaustive"])]
        order: Option<String>,
        /// Choose the order with a trained policy checkpoint.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Try every order (at most 8 rack types).
        #[arg(long)]
        exhaustive: bool,
    },
    /// Train the ordering policy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run an experiment over many instances and algorithms.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Tally where each rack type sits in the best random orders.
    RankAnalysis {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute every record of a results directory.
    Audit {
        #[command(flatten)]
        common: Common,
    },
    /// Solve a tiny instance exactly and report the heuristic's gap.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instance: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RankConfig {
    generator: GeneratorConfig,
    instances: usize,
    orders_per_instance: usize,
    heuristic: HeuristicConfig,
    seed: u64,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            instances: 80,
            orders_per_instance: 10,
            heuristic: HeuristicConfig::default(),
            seed: 0,
        }
    }
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse(_) | Error::SchemaVersion { .. } => Failure::Config(e.to_string()),
            Error::Context { ref source, .. } if matches!(**source, Error::Config(_) | Error::Parse(_)) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn set_workers(n: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(())
}

/// Writes `rows` of serializable records as CSV or JSON.
fn write_table<T: Serialize>(path_stem: &Path, format: Format, rows: &[T]) -> Result<PathBuf, Failure> {
    match format {
        Format::Json => {
            let path = path_stem.with_extension("json");
            fs::write(&path, serde_json::to_string_pretty(rows)?)?;
            Ok(path)
        }
        Format::Csv => {
            let path = path_stem.with_extension("csv");
            let mut w = csv_writer(&path)?;
            for r in rows {
                w.serialize(r).map_err(|e| Failure::Run(e.to_string()))?;
            }
            w.flush()?;
            Ok(path)
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Failure> {
    csv::Writer::from_path(path).map_err(|e| Failure::Run(e.to_string()))
}

#[derive(Serialize)]
struct GeneratedRow {
    id: String,
    seed: u64,
    num_positions: usize,
    num_rack_types: usize,
    total_demand: i64,
    placement_limit: i64,
}

fn cmd_generate(common: &Common, count: usize) -> Result<bool, Failure> {
    let mut config: GeneratorConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    let dir = out_dir(common, "instances")?;
    let mut rows = Vec::new();
    for i in 0..count {
        let seed = batch_seed(config.seed, i as u64);
        let inst = generate_instance(&config, seed)?;
        let id = format!("inst-{i:04}");
        io::save_instance(dir.join(format!("{id}.json")), &inst)?;
        rows.push(GeneratedRow {
            id,
            seed,
            num_positions: inst.num_positions,
            num_rack_types: inst.num_rack_types,
            total_demand: inst.demands.iter().sum(),
            placement_limit: inst.placement_limit,
        });
    }
    let index = write_table(&dir.join("index"), common.format, &rows)?;
    println!(
        "wrote {count} instances to {} (index {})",
        dir.display(),
        index.display()
    );
    Ok(true)
}

fn parse_order(text: &str) -> Result<Vec<usize>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Failure::Config(format!("--order: {e}")))
        })
        .collect()
}

fn cmd_solve(
    common: &Common,
    instance: &Path,
    order: Option<&str>,
    policy: Option<&Path>,
    exhaustive: bool,
) -> Result<bool, Failure> {
    let heuristic: HeuristicConfig = read_config(common.config.as_deref())?;
    set_workers(common.workers)?;
    let inst = io::load_instance(instance)?;
    let solution = if exhaustive {
        ordering::exhaustive_order_search(&inst, heuristic)?.best
    } else if let Some(path) = policy {
        let params = checkpoint::load(path)?;
        ordering::infer_order(&inst, &params, heuristic)?.best
    } else {
        let order = match order {
            Some(text) => parse_order(text)?,
            None => identity_order(inst.num_rack_types),
        };
        solve_ordered(&inst, &order, heuristic)?
    };
    let report = constraint_report(&inst, &solution.assignment)?;
    let dir = out_dir(common, "solution")?;
    io::save_assignment(dir.join("assignment.json"), &solution.assignment)?;
    write_table(
        &dir.join("breakdown"),
        common.format,
        std::slice::from_ref(&solution.breakdown),
    )?;
    let obj = Objective::new(&inst).with_penalty(heuristic.penalty);
    let eval = obj.evaluate(&solution.assignment)?;
    fs::write(
        dir.join("penalty_cells.csv"),
        io::penalty_cells_csv(&obj.penalty_cells(&eval))?,
    )?;
    println!(
        "order {:?}: objective {:.6} (movement {}, spread {:.6}, penalty {:.6}, placement excess {}, g1 violations {})",
        solution.order,
        solution.breakdown.augmented,
        solution.breakdown.movement,
        solution.breakdown.spread,
        solution.breakdown.limit_penalty,
        report.g3_excess,
        report.g1_violations.len()
    );
    Ok(true)
}

fn cmd_train(common: &Common, epochs: Option<usize>) -> Result<bool, Failure> {
    let mut config: TrainConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    config.validate()?;
    set_workers(common.workers)?;
    let dir = out_dir(common, "training")?;
    let outcome = ordering::train(&config, None, |r| {
        eprintln!(
            "epoch {:>4}  mean reward {:>12.4}  loss {:>10.6}",
            r.epoch, r.mean_reward, r.loss
        );
    })?;
    checkpoint::save(dir.join("policy.bin"), &outcome.params)?;
    match common.format {
        Format::Csv => write_curve_csv(fs::File::create(dir.join("curve.csv"))?, &outcome.curve)?,
        Format::Json => fs::write(dir.join("curve.json"), serde_json::to_string_pretty(&outcome.curve)?)?,
    }
    fs::write(dir.join("train_config.json"), serde_json::to_string_pretty(&config)?)?;
    println!("checkpoint written to {}", dir.join("policy.bin").display());
    Ok(true)
}

fn cmd_bench(common: &Common) -> Result<bool, Failure> {
    let mut config: ExperimentConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if common.workers.is_some() {
        config.workers = common.workers;
    }
    if common.format == Format::Json && !config.formats.contains(&ReportFormat::Json) {
        config.formats.push(ReportFormat::Json);
    }
    config.validate()?;
    let report = bench::run_experiment(&config)?;
    for a in &report.summary.algorithms {
        println!(
            "{:<14} runs {:>4}  success {:>5.1}%  mean objective {:>12.4}  median {:>12.4}",
            a.algorithm,
            a.runs,
            100.0 * a.success_rate,
            a.mean.objective,
            a.median.objective
        );
    }
    println!(
        "{} runs in {:.1} s, results in {}",
        report.records.len(),
        report.total_duration.as_secs_f64(),
        report.out_dir.display()
    );
    Ok(report.failures() == 0)
}

fn cmd_rank(common: &Common) -> Result<bool, Failure> {
    let mut config: RankConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.generator.validate()?;
    set_workers(common.workers)?;
    let instances: Vec<_> = (0..config.instances)
        .map(|i| generate_instance(&config.generator, batch_seed(config.seed, i as u64)))
        .collect::<Result<_, _>>()?;
    let table = bench::ordering_rank_analysis(&instances, config.orders_per_instance, config.heuristic, config.seed)?;
    let dir = out_dir(common, "rank")?;
    let path = write_table(&dir.join("rank_analysis"), common.format, &table.rows())?;
    for (k, pos) in table.modal_positions().iter().enumerate() {
        println!("rack type {k}: most frequent top-3 position {pos}");
    }
    println!("table written to {}", path.display());
    Ok(true)
}

fn cmd_audit(common: &Common) -> Result<bool, Failure> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Failure::Config("audit needs --out <results dir>".into()))?;
    let report = bench::audit(&dir)?;
    for m in &report.mismatches {
        eprintln!("{m}");
    }
    println!(
        "{} records checked, {} mismatches",
        report.checked,
        report.mismatches.len()
    );
    Ok(report.mismatches.is_empty())
}

#[derive(Serialize)]
struct OracleRow {
    optimal_value: f64,
    search_space_size: u128,
    heuristic_value: f64,
    gap: f64,
    heuristic_order: String,
}

fn cmd_oracle(common: &Common, instance: &Path) -> Result<bool, Failure> {
    let heuristic: HeuristicConfig = read_config(common.config.as_deref())?;
    let inst = io::load_instance(instance)?;
    let exact = oracle::brute_force_solve(&inst)?;
    let best = ordering::exhaustive_order_search(&inst, heuristic)?.best;
    let gap = oracle::gap_against(&inst, &best.assignment, exact.optimal_value)?;
    let dir = out_dir(common, "oracle")?;
    io::save_assignment(dir.join("optimal_assignment.json"), &exact.optimal_assignment)?;
    let row = OracleRow {
        optimal_value: exact.optimal_value,
        search_space_size: exact.search_space_size,
        heuristic_value: best.breakdown.augmented,
        gap,
        heuristic_order: best.order.iter().map(usize::to_string).collect::<Vec<_>>().join("-"),
    };
    write_table(&dir.join("oracle"), common.format, std::slice::from_ref(&row))?;
    println!(
        "optimum {:.6} over {} candidates; heuristic {:.6}; gap {:.6}",
        row.optimal_value, row.search_space_size, row.heuristic_value, row.gap
    );
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { common, count } => cmd_generate(common, *count),
        Command::Solve {
            common,
            instance,
            order,
            policy,
            exhaustive,
        } => cmd_solve(common, instance, order.as_deref(), policy.as_deref(), *exhaustive),
        Command::Train { common, epochs } => cmd_train(common, *epochs),
        Command::Bench { common } => cmd_bench(common),
        Command::RankAnalysis { common } => cmd_rank(common),
        Command::Audit { common } => cmd_audit(common),
        Command::Oracle { common, instance } => cmd_oracle(common, instance),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
