//! Experiment runner, ordering-rank analysis and report auditing.
//!
//! A results directory holds:
//! - `runs.csv` (and `runs.json` when requested): one row per
//!   (instance, algorithm) with the objective terms and the order used;
//! - `summary.json`: per-algorithm means, medians and success rates;
//! - `instances/<id>.json` and `assignments/<id>__<algorithm>.json`;
//! - `timings.csv` and `metadata.json`: wall-clock data, kept apart so that
//!   the files above are byte-identical across replays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heuristic::{identity_order, HeuristicConfig, Solution};
use crate::instgen::{batch_seed, generate_instance, GeneratorConfig};
use crate::io;
use crate::model::ProblemInstance;
use crate::objective::{total_utility, ObjectiveBreakdown};
use crate::ordering::{self, checkpoint, random_orders, solve_orders, PolicyParams};
use crate::rng;

pub const RUNS_CSV_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSource {
    Generate {
        #[serde(default)]
        generator: GeneratorConfig,
        count: usize,
    },
    Files {
        paths: Vec<PathBuf>,
    },
}

impl Default for InstanceSource {
    fn default() -> Self {
        InstanceSource::Generate {
            generator: GeneratorConfig::default(),
            count: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmSpec {
    /// Identity order `0, 1, …`.
    FixedOrder {
        #[serde(default)]
        heuristic: HeuristicConfig,
    },
    /// Best of `samples` uniformly random orders.
    RandomOrder {
        #[serde(default)]
        heuristic: HeuristicConfig,
        samples: usize,
    },
    Exhaustive {
        #[serde(default)]
        heuristic: HeuristicConfig,
    },
    Policy {
        #[serde(default)]
        heuristic: HeuristicConfig,
        checkpoint: PathBuf,
    },
}

impl AlgorithmSpec {
    pub fn id(&self) -> &'static str {
        match self {
            AlgorithmSpec::FixedOrder { .. } => "fixed_order",
            AlgorithmSpec::RandomOrder { .. } => "random_order",
            AlgorithmSpec::Exhaustive { .. } => "exhaustive",
            AlgorithmSpec::Policy { .. } => "policy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: InstanceSource,
    pub algorithms: Vec<AlgorithmSpec>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub formats: Vec<ReportFormat>,
    /// Worker threads; `None` uses every core.
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: InstanceSource::default(),
            algorithms: vec![
                AlgorithmSpec::FixedOrder {
                    heuristic: HeuristicConfig::default(),
                },
                AlgorithmSpec::RandomOrder {
                    heuristic: HeuristicConfig::default(),
                    samples: 10,
                },
            ],
            seed: 0,
            out_dir: PathBuf::from("results"),
            formats: vec![ReportFormat::Csv],
            workers: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Config("at least one algorithm is required".into()));
        }
        let mut ids: Vec<&str> = self.algorithms.iter().map(AlgorithmSpec::id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("each algorithm may appear only once".into()));
        }
        for a in &self.algorithms {
            match a {
                AlgorithmSpec::RandomOrder { samples: 0, .. } => {
                    return Err(Error::Config("random_order needs at least one sample".into()))
                }
                AlgorithmSpec::Policy { checkpoint, .. } if !checkpoint.exists() => {
                    return Err(Error::Config(format!(
                        "checkpoint {} does not exist",
                        checkpoint.display()
                    )))
                }
                _ => {}
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        match &self.source {
            InstanceSource::Generate { generator, .. } => generator.validate(),
            InstanceSource::Files { paths } if paths.is_empty() => Err(Error::Config("no instance files given".into())),
            InstanceSource::Files { .. } => Ok(()),
        }
    }
}

/// One (instance, algorithm) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub instance_id: String,
    pub seed: Option<u64>,
    pub algorithm: String,
    pub success: bool,
    /// Rack types joined by `-`; empty when the run failed.
    pub order: String,
    pub movement: f64,
    pub spread: f64,
    pub limit_penalty: f64,
    pub placement_excess: f64,
    pub utility: f64,
    pub objective: f64,
    #[serde(skip)]
    pub duration: Duration,
    #[serde(skip)]
    pub error: Option<String>,
}

impl RunRecord {
    fn new(id: &str, seed: Option<u64>, algorithm: &str, b: &ObjectiveBreakdown, order: &[usize]) -> Self {
        Self {
            instance_id: id.to_string(),
            seed,
            algorithm: algorithm.to_string(),
            success: true,
            order: order.iter().map(usize::to_string).collect::<Vec<_>>().join("-"),
            movement: b.movement,
            spread: b.spread,
            limit_penalty: b.limit_penalty,
            placement_excess: b.placement_excess,
            utility: b.utility,
            objective: b.augmented,
            duration: Duration::ZERO,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub movement: f64,
    pub spread: f64,
    pub limit_penalty: f64,
    pub placement_excess: f64,
    pub utility: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean: MetricStats,
    pub median: MetricStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub num_instances: usize,
    pub algorithms: Vec<AlgorithmSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
    pub total_duration: Duration,
    pub out_dir: PathBuf,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.success).count()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn stats(records: &[&RunRecord], f: impl Fn(Vec<f64>) -> f64) -> MetricStats {
    let col = |g: fn(&RunRecord) -> f64| f(records.iter().map(|r| g(r)).collect());
    MetricStats {
        movement: col(|r| r.movement),
        spread: col(|r| r.spread),
        limit_penalty: col(|r| r.limit_penalty),
        placement_excess: col(|r| r.placement_excess),
        utility: col(|r| r.utility),
        objective: col(|r| r.objective),
    }
}

fn mean(v: Vec<f64>) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-algorithm statistics over every record, failed runs included (they
/// carry the prior mapping's values).
pub fn summarize(seed: u64, num_instances: usize, algorithms: &[String], records: &[RunRecord]) -> Summary {
    let algorithms = algorithms
        .iter()
        .map(|a| {
            let rows: Vec<&RunRecord> = records.iter().filter(|r| &r.algorithm == a).collect();
            let successes = rows.iter().filter(|r| r.success).count();
            AlgorithmSummary {
                algorithm: a.clone(),
                runs: rows.len(),
                successes,
                success_rate: successes as f64 / rows.len().max(1) as f64,
                mean: stats(&rows, mean),
                median: stats(&rows, median),
            }
        })
        .collect();
    Summary {
        seed,
        num_instances,
        algorithms,
    }
}

/// Loaded or generated instances with their ids.
pub fn load_instances(source: &InstanceSource, seed: u64) -> Result<Vec<(String, ProblemInstance)>> {
    match source {
        InstanceSource::Generate { generator, count } => (0..*count)
            .map(|i| {
                let inst = generate_instance(generator, batch_seed(seed, i as u64))
                    .map_err(|e| e.context(format!("instance {i}")))?;
                Ok((format!("inst-{i:04}"), inst))
            })
            .collect(),
        InstanceSource::Files { paths } => paths
            .iter()
            .map(|p| {
                let id = p
                    .file_stem()
                    .map_or_else(|| "instance".to_string(), |s| s.to_string_lossy().into_owned());
                Ok((id, io::load_instance(p)?))
            })
            .collect(),
    }
}

enum Runner {
    Fixed(HeuristicConfig),
    Random(HeuristicConfig, usize),
    Exhaustive(HeuristicConfig),
    Policy(HeuristicConfig, Box<PolicyParams<f32>>),
}

impl Runner {
    fn from_spec(spec: &AlgorithmSpec) -> Result<Self> {
        Ok(match spec {
            AlgorithmSpec::FixedOrder { heuristic } => Runner::Fixed(*heuristic),
            AlgorithmSpec::RandomOrder { heuristic, samples } => Runner::Random(*heuristic, *samples),
            AlgorithmSpec::Exhaustive { heuristic } => Runner::Exhaustive(*heuristic),
            AlgorithmSpec::Policy {
                heuristic,
                checkpoint: path,
            } => Runner::Policy(*heuristic, Box::new(checkpoint::load(path)?)),
        })
    }

    fn run(&self, inst: &ProblemInstance, seed: u64) -> Result<Solution> {
        match self {
            Runner::Fixed(h) => crate::heuristic::solve_ordered(inst, &identity_order(inst.num_rack_types), *h),
            Runner::Random(h, n) => {
                let orders = random_orders(inst.num_rack_types, *n, seed);
                let solutions = solve_orders(inst, &orders, *h)?;
                Ok(best_of(solutions))
            }
            Runner::Exhaustive(h) => Ok(ordering::exhaustive_order_search(inst, *h)?.best),
            Runner::Policy(h, params) => Ok(ordering::infer_order(inst, params, *h)?.best),
        }
    }
}

fn best_of(solutions: Vec<Solution>) -> Solution {
    solutions
        .into_iter()
        .reduce(|a, b| {
            if b.breakdown.augmented < a.breakdown.augmented {
                b
            } else {
                a
            }
        })
        .expect("at least one solution")
}

fn assignment_path(dir: &Path, id: &str, algorithm: &str) -> PathBuf {
    dir.join("assignments").join(format!("{id}__{algorithm}.json"))
}

struct Job<'a> {
    id: &'a str,
    inst: &'a ProblemInstance,
    algorithm: usize,
    seed: u64,
}

fn run_job(job: &Job, runner: &Runner, algorithm: &str) -> (RunRecord, crate::model::Assignment) {
    let start = Instant::now();
    let outcome = runner.run(job.inst, job.seed);
    let elapsed = start.elapsed().max(Duration::from_nanos(1));
    let (mut record, assignment) = match outcome {
        Ok(sol) => (
            RunRecord::new(job.id, job.inst.seed, algorithm, &sol.breakdown, &sol.order),
            sol.assignment,
        ),
        Err(e) => {
            // Keep the previous mapping: zero movement, prior spread and penalty.
            let prior = job.inst.prior_assignment.clone();
            let b = total_utility(job.inst, &prior).expect("validated instance");
            let mut r = RunRecord::new(job.id, job.inst.seed, algorithm, &b, &[]);
            r.success = false;
            r.error = Some(e.to_string());
            (r, prior)
        }
    };
    record.duration = elapsed;
    (record, assignment)
}

/// Runs every algorithm on every instance and writes the results directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let instances = load_instances(&config.source, config.seed)?;
    let runners: Vec<Runner> = config.algorithms.iter().map(Runner::from_spec).collect::<Result<_>>()?;
    let ids: Vec<String> = config.algorithms.iter().map(|a| a.id().to_string()).collect();
    let job_seed = rng::derive_seed(config.seed, rng::tags::RANDOM_ORDERS);
    let jobs: Vec<Job> = instances
        .iter()
        .enumerate()
        .flat_map(|(i, (id, inst))| {
            (0..runners.len()).map(move |a| Job {
                id,
                inst,
                algorithm: a,
                seed: rng::derive_seed(job_seed, i as u64),
            })
        })
        .collect();

    let execute = |job: &Job| run_job(job, &runners[job.algorithm], &ids[job.algorithm]);
    #[cfg(feature = "parallel")]
    let results: Vec<(RunRecord, crate::model::Assignment)> = {
        use rayon::prelude::*;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.workers {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(execute).collect())
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(RunRecord, crate::model::Assignment)> = jobs.iter().map(execute).collect();

    let dir = &config.out_dir;
    fs::create_dir_all(dir.join("instances"))?;
    fs::create_dir_all(dir.join("assignments"))?;
    for (id, inst) in &instances {
        io::save_instance(dir.join("instances").join(format!("{id}.json")), inst)?;
    }
    for (record, assignment) in &results {
        io::save_assignment(assignment_path(dir, &record.instance_id, &record.algorithm), assignment)?;
    }
    let records: Vec<RunRecord> = results.into_iter().map(|(r, _)| r).collect();
    write_runs_csv(fs::File::create(dir.join("runs.csv"))?, &records)?;
    if config.formats.contains(&ReportFormat::Json) {
        fs::write(dir.join("runs.json"), serde_json::to_string_pretty(&records)?)?;
    }
    let summary = summarize(config.seed, instances.len(), &ids, &records);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    let mut timings = csv::Writer::from_path(dir.join("timings.csv"))?;
    timings.write_record(["instance_id", "algorithm", "seconds"])?;
    for r in &records {
        timings.write_record([
            r.instance_id.as_str(),
            r.algorithm.as_str(),
            &r.duration.as_secs_f64().to_string(),
        ])?;
    }
    timings.flush()?;
    let total_duration = started.elapsed();
    let meta = serde_json::json!({
        "seed": config.seed,
        "runs": records.len(),
        "runs_csv_version": RUNS_CSV_VERSION,
        "failed_runs": records
            .iter()
            .filter(|r| !r.success)
            .map(|r| serde_json::json!({
                "instance_id": r.instance_id,
                "algorithm": r.algorithm,
                "error": r.error,
            }))
            .collect::<Vec<_>>(),
        "total_seconds": total_duration.as_secs_f64(),
        "finished_unix_seconds": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    });
    fs::write(dir.join("metadata.json"), serde_json::to_string_pretty(&meta)?)?;

    Ok(ExperimentReport {
        records,
        summary,
        total_duration,
        out_dir: dir.clone(),
    })
}

/// Run records as CSV with the fixed column order.
pub fn write_runs_csv(w: impl std::io::Write, records: &[RunRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

/// Recomputes every record of a results directory from its stored instance
/// and assignment. Values must agree to `1e-9`.
pub fn audit(dir: impl AsRef<Path>) -> Result<AuditReport> {
    let dir = dir.as_ref();
    let records = read_runs_csv(dir.join("runs.csv"))?;
    let mut instances: BTreeMap<String, ProblemInstance> = BTreeMap::new();
    let mut mismatches = Vec::new();
    for r in &records {
        if !instances.contains_key(&r.instance_id) {
            let inst = io::load_instance(dir.join("instances").join(format!("{}.json", r.instance_id)))?;
            instances.insert(r.instance_id.clone(), inst);
        }
        let inst = &instances[&r.instance_id];
        let x = io::load_assignment(assignment_path(dir, &r.instance_id, &r.algorithm))?;
        let b = total_utility(inst, &x)?;
        for (name, stored, fresh) in [
            ("movement", r.movement, b.movement),
            ("spread", r.spread, b.spread),
            ("limit_penalty", r.limit_penalty, b.limit_penalty),
            ("placement_excess", r.placement_excess, b.placement_excess),
            ("utility", r.utility, b.utility),
            ("objective", r.objective, b.augmented),
        ] {
            if !((stored - fresh).abs() <= 1e-9) {
                mismatches.push(format!(
                    "{} / {}: {name} stored {stored}, recomputed {fresh}",
                    r.instance_id, r.algorithm
                ));
            }
        }
    }
    Ok(AuditReport {
        checked: records.len(),
        mismatches,
    })
}

/// Top-3 tallies per (rack type, order position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub num_types: usize,
    /// `counts[k][pos][rank]`.
    pub counts: Vec<Vec<[u64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rack_type: usize,
    /// One-based.
    pub order_position: usize,
    pub rank1: u64,
    pub rank2: u64,
    pub rank3: u64,
}

impl RankTable {
    pub fn rows(&self) -> Vec<RankRow> {
        let mut out = Vec::new();
        for (k, per_pos) in self.counts.iter().enumerate() {
            for (pos, c) in per_pos.iter().enumerate() {
                out.push(RankRow {
                    rack_type: k,
                    order_position: pos + 1,
                    rank1: c[0],
                    rank2: c[1],
                    rank3: c[2],
                });
            }
        }
        out
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().map(|c| c.iter().sum::<u64>()).sum()
    }

    /// Per rack type, the one-based position with the most top-3 tallies
    /// (earliest on ties).
    pub fn modal_positions(&self) -> Vec<usize> {
        self.counts
            .iter()
            .map(|per_pos| {
                let totals: Vec<u64> = per_pos.iter().map(|c| c.iter().sum()).collect();
                let mut best = 0;
                for (i, &t) in totals.iter().enumerate() {
                    if t > totals[best] {
                        best = i;
                    }
                }
                best + 1
            })
            .collect()
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.rows() {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Samples `n_orders` random orders per instance, ranks them by objective
/// (lowest first, earlier sample on ties) and tallies where each rack type
/// sits in the top three orders.
pub fn ordering_rank_analysis(
    instances: &[ProblemInstance],
    n_orders: usize,
    heuristic: HeuristicConfig,
    seed: u64,
) -> Result<RankTable> {
    if n_orders < 3 {
        return Err(Error::Config(
            "rank analysis needs at least 3 orders per instance".into(),
        ));
    }
    let nk = instances.first().map_or(0, |i| i.num_rack_types);
    if instances.iter().any(|i| i.num_rack_types != nk) {
        return Err(Error::Config("all instances need the same number of rack types".into()));
    }
    let mut counts = vec![vec![[0u64; 3]; nk]; nk];
    for (i, inst) in instances.iter().enumerate() {
        let orders = random_orders(nk, n_orders, rng::derive_seed(seed, i as u64));
        let solutions = solve_orders(inst, &orders, heuristic).map_err(|e| e.context(format!("instance {i}")))?;
        let mut ranked: Vec<usize> = (0..solutions.len()).collect();
        ranked.sort_by(|&a, &b| {
            solutions[a]
                .breakdown
                .augmented
                .total_cmp(&solutions[b].breakdown.augmented)
                .then(a.cmp(&b))
        });
        for (rank, &s) in ranked.iter().take(3).enumerate() {
            for (pos, &k) in solutions[s].order.iter().enumerate() {
                counts[k][pos][rank] += 1;
            }
        }
    }
    Ok(RankTable { num_types: nk, counts })
}
