//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use rackopt::bench::{self, AlgorithmSpec, ExperimentConfig, InstanceSource, ReportFormat};
use rackopt::heuristic::{identity_order, solve_ordered};
use rackopt::instgen::{
    batch_seed, generate_batch, generate_instance, GeneratorConfig, Range, SpreadTemplate, WeightPreset,
};
use rackopt::io::instance_to_json;
use rackopt::model::constraint_report;
use rackopt::objective::Objective;
use rackopt::ordering::policy::{PolicyConfig, PolicyParams};
use rackopt::ordering::train::{advantages, rollout_instance, surrogate_gradient, InstanceRollout};
use rackopt::ordering::{self, checkpoint, exhaustive_order_search, infer_order, random_order_baseline, TrainConfig};
use rackopt::rng::stream_rng;
use rackopt::{oracle, Assignment, HeuristicConfig, Matrix, ProblemInstance};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// Relaxed point with every entry in (0.005, 0.095): far from the movement
// hinge, and rows never exceed one rack.
fn relaxed_point(inst: &ProblemInstance, seed: u64) -> Assignment {
    let mut rng = stream_rng(seed, 1);
    let (np, nk) = (inst.num_positions, inst.num_rack_types);
    let values = (0..np * nk).map(|_| rng.random_range(0.005..0.095)).collect();
    Assignment::relaxed(Matrix::from_vec(np, nk, values).unwrap())
}

fn near_kink(inst: &ProblemInstance, x: &Assignment, margin: f64) -> bool {
    let counts = x.column_sums();
    let prior = inst.prior_counts();
    let new: f64 = counts.iter().zip(&prior).map(|(c, &p)| (c - p as f64).max(0.0)).sum();
    counts.iter().zip(&prior).any(|(c, &p)| (c - p as f64).abs() < margin)
        || (new - inst.placement_limit as f64).abs() < margin
}

fn gradient_correctness() -> Outcome {
    const STEP: f64 = 1e-5;
    const ENTRIES_PER_POINT: usize = 25;
    let start = Instant::now();
    let config = GeneratorConfig::with_positions(200);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut skipped = 0;
    for i in 0..20u64 {
        let inst = generate_instance(&config, batch_seed(100, i)).unwrap();
        let obj = Objective::new(&inst);
        let mut seed = 0;
        for _ in 0..100 {
            let x = loop {
                seed += 1;
                let x = relaxed_point(&inst, batch_seed(i, seed));
                if !near_kink(&inst, &x, 1e-3) {
                    break x;
                }
                skipped += 1;
            };
            points += 1;
            let grad = obj.gradient(&x).unwrap();
            let mut probe = x.clone();
            let mut rng = stream_rng(batch_seed(i, seed), 2);
            for _ in 0..ENTRIES_PER_POINT {
                let p = rng.random_range(0..inst.num_positions);
                let k = rng.random_range(0..inst.num_rack_types);
                let v = x.get(p, k);
                probe.set(p, k, v + STEP).unwrap();
                let hi = obj.total_utility(&probe).unwrap().augmented;
                probe.set(p, k, v - STEP).unwrap();
                let lo = obj.total_utility(&probe).unwrap().augmented;
                probe.set(p, k, v).unwrap();
                let fd = (hi - lo) / (2.0 * STEP);
                let a = grad.get(p, k);
                worst = worst.max((a - fd).abs() / a.abs().max(1.0));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-5 && elapsed < Duration::from_secs(120),
        format!(
            "max relative error {worst:.2e} (< 1e-5) over {points} points x {ENTRIES_PER_POINT} entries, {skipped} near-kink draws redrawn, {} (< 120 s)",
            secs(elapsed)
        ),
    )
}

fn tiny_config(num_positions: usize) -> GeneratorConfig {
    let base = GeneratorConfig::default().with_rack_types(2);
    GeneratorConfig {
        num_positions,
        scope_counts: vec![2],
        limit_ranges: vec![Range::new(1.0, 3.0)],
        demand_range: Range::new(1, 2),
        placement_limit_range: Range::new(1, 3),
        prior_probabilities: vec![0.25, 0.25, 0.5],
        spread_templates: vec![SpreadTemplate {
            resource_type: 5,
            rack_group: vec![0, 1],
            level: 0,
        }],
        ..base
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut zero = 0;
    let mut gaps = Vec::new();
    let mut below = 0;
    for i in 0..50u64 {
        let np = [4, 6, 8][i as usize % 3];
        let inst = generate_instance(&tiny_config(np), batch_seed(200, i)).unwrap();
        let exact = oracle::brute_force_solve(&inst).unwrap();
        let best = exhaustive_order_search(&inst, HeuristicConfig::default()).unwrap().best;
        let value = Objective::new(&inst).total_utility(&best.assignment).unwrap().augmented;
        if value < exact.optimal_value {
            below += 1;
        }
        let gap = (value - exact.optimal_value) / exact.optimal_value.abs().max(1.0);
        if gap <= 1e-12 {
            zero += 1;
        }
        gaps.push(gap);
    }
    let elapsed = start.elapsed();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max = gaps.iter().cloned().fold(0.0, f64::max);
    outcome(
        zero * 10 >= 6 * gaps.len() && mean <= 0.10 && below == 0 && elapsed < Duration::from_secs(60),
        format!(
            "gap 0 on {zero}/50 (>= 30), mean gap {:.2}% (<= 10%), max gap {:.2}%, below optimum {below} (= 0), {} (< 60 s)",
            100.0 * mean,
            100.0 * max,
            secs(elapsed)
        ),
    )
}

fn constraint_satisfaction() -> Outcome {
    let config = GeneratorConfig::default();
    let mut g1 = 0;
    let mut g2 = 0;
    let mut excess_instances = 0;
    let mut unreported = 0;
    let mut errors = 0;
    for i in 0..1000u64 {
        let inst = generate_instance(&config, batch_seed(300, i)).unwrap();
        let sol = match solve_ordered(&inst, &identity_order(inst.num_rack_types), HeuristicConfig::default()) {
            Ok(s) => s,
            Err(_) => {
                errors += 1;
                continue;
            }
        };
        let report = constraint_report(&inst, &sol.assignment).unwrap();
        g1 += report.g1_violations.len();
        if sol
            .assignment
            .counts()
            .iter()
            .zip(&inst.demands)
            .any(|(&c, &d)| c as i64 != d)
        {
            g2 += 1;
        }
        if report.g3_excess > 0 {
            excess_instances += 1;
        }
        if sol.breakdown.placement_excess != report.g3_excess as f64 {
            unreported += 1;
        }
    }
    outcome(
        g1 == 0 && g2 == 0 && unreported == 0 && errors == 0,
        format!(
            "1000 solves: g1 violations {g1}, inexact counts {g2}, solver errors {errors}, placement limit exceeded on {excess_instances} (all reported: {})",
            unreported == 0
        ),
    )
}

fn ordering_matters() -> Outcome {
    let line = |preset: WeightPreset| {
        let config = GeneratorConfig::default().with_weights(preset);
        let mut hits = 0;
        let mut ranges = Vec::new();
        for i in 0..20u64 {
            let inst = generate_instance(&config, batch_seed(400, i)).unwrap();
            let stats = random_order_baseline(&inst, 20, i, HeuristicConfig::default()).unwrap();
            let r = stats.relative_range();
            if r > 0.01 {
                hits += 1;
            }
            ranges.push(r);
        }
        ranges.sort_by(f64::total_cmp);
        (hits, ranges[10])
    };
    let (hits, median) = line(WeightPreset::Balanced);
    let (uniform_hits, uniform_median) = line(WeightPreset::Uniform);
    outcome(
        hits >= 15,
        format!(
            "range > 1% of mean on {hits}/20 instances (>= 15), median range {:.2}%; with weights 10/10: {uniform_hits}/20, median {:.2}%",
            100.0 * median,
            100.0 * uniform_median
        ),
    )
}

fn policy_improvement(checkpoint_path: &Path) -> Outcome {
    let config = TrainConfig::default();
    let start = Instant::now();
    let trained = ordering::train(&config, None, |_| {}).unwrap();
    let train_time = start.elapsed();
    checkpoint::save(checkpoint_path, &trained.params).unwrap();
    let untrained = PolicyParams::init(config.policy, config.seed).unwrap();
    let held_out = generate_batch(&GeneratorConfig::default(), 777, 40).unwrap();
    let (mut fixed, mut policy, mut baseline) = (0.0, 0.0, 0.0);
    let mut losses = 0;
    for inst in &held_out {
        let h = config.heuristic;
        let f = solve_ordered(inst, &identity_order(inst.num_rack_types), h)
            .unwrap()
            .breakdown
            .augmented;
        let p = infer_order(inst, &trained.params, h).unwrap().best.breakdown.augmented;
        let u = infer_order(inst, &untrained, h).unwrap().best.breakdown.augmented;
        fixed += f;
        policy += p;
        baseline += u;
        if p > f {
            losses += 1;
        }
    }
    let improvement = (fixed - policy) / fixed;
    let untrained_improvement = (fixed - baseline) / fixed;
    outcome(
        improvement >= 0.02 && losses <= 4 && train_time <= Duration::from_secs(4 * 3600),
        format!(
            "{} epochs x B={} in {}: mean objective {:.1} vs fixed order {:.1}, improvement {:.2}% (>= 2%), losses {losses}/40 (<= 4); untrained policy best-of-N {:.2}%",
            config.epochs,
            config.batch_size,
            secs(train_time),
            policy / 40.0,
            fixed / 40.0,
            100.0 * improvement,
            100.0 * untrained_improvement
        ),
    )
}

fn small_batch(params: &PolicyParams<f64>) -> Vec<InstanceRollout> {
    let config = GeneratorConfig::default().with_rack_types(4);
    (0..2u64)
        .map(|i| {
            let inst = generate_instance(&config, batch_seed(600, i)).unwrap();
            rollout_instance(&inst, params, HeuristicConfig::default(), i).unwrap()
        })
        .collect()
}

fn reinforce_machinery() -> Outcome {
    let policy = PolicyConfig {
        d_model: 16,
        num_heads: 2,
        num_layers: 2,
        ff_hidden: 32,
        logit_clip: 10.0,
    };
    let params = PolicyParams::init(policy, 5).unwrap();
    let batch = small_batch(&params.cast::<f64>());

    // Zero-sum advantages. Real rewards carry rounding, bounded by a few
    // ulps per term; integer rewards are summed exactly.
    let mut worst_ratio: f64 = 0.0;
    for ro in &batch {
        let a = advantages(&ro.rewards, 1.0);
        let scale = ro.rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let bound = 4.0 * a.len() as f64 * f64::EPSILON * scale;
        worst_ratio = worst_ratio.max(a.iter().sum::<f64>().abs() / bound);
    }
    let integer_sum: f64 = advantages(&[-1025.0, -1100.0, -990.0, -1041.0], 1.0).iter().sum();
    let zero_sum = worst_ratio <= 1.0 && integer_sum == 0.0;

    // Equal rewards cancel against the baseline.
    let equal: Vec<InstanceRollout> = batch
        .iter()
        .map(|ro| InstanceRollout {
            rewards: vec![-0.1; ro.rewards.len()],
            ..ro.clone()
        })
        .collect();
    let (_, grads) = surrogate_gradient(&params, &equal, 2.0).unwrap();
    let nonzero: usize = grads
        .iter()
        .map(|g| g.as_slice().iter().filter(|v| **v != 0.0).count())
        .sum();

    // Single-precision gradient against central differences of the loss.
    let (_, analytic) = surrogate_gradient(&params, &batch, 2.0).unwrap();
    let flat: Vec<f32> = analytic.iter().flat_map(|g| g.as_slice().iter().copied()).collect();
    let reference = params.cast::<f64>();
    let mut rng = stream_rng(6, 0);
    let mut worst_fd: f64 = 0.0;
    let mut checked = 0;
    while checked < 20 {
        let i = rng.random_range(0..params.num_weights());
        let a = f64::from(flat[i]);
        let h = 1e-4;
        let w = reference.weight(i);
        let mut plus = reference.clone();
        plus.set_weight(i, w + h);
        let mut minus = reference.clone();
        minus.set_weight(i, w - h);
        let fd = (surrogate_gradient(&plus, &batch, 2.0).unwrap().0
            - surrogate_gradient(&minus, &batch, 2.0).unwrap().0)
            / (2.0 * h);
        if fd.abs() < 1e-6 && a.abs() < 1e-6 {
            continue;
        }
        worst_fd = worst_fd.max((a - fd).abs() / fd.abs().max(a.abs()));
        checked += 1;
    }
    outcome(
        zero_sum && nonzero == 0 && worst_fd <= 1e-3,
        format!(
            "advantage sums within {:.2} of the rounding bound, integer rewards sum to {integer_sum}; equal-reward gradient nonzero entries {nonzero} (= 0); f32 gradient vs finite differences max relative error {worst_fd:.2e} over 20 weights (<= 1e-3)",
            worst_ratio
        ),
    )
}

fn throughput(checkpoint_path: &Path, out: &Path) -> Outcome {
    let inst = generate_instance(&GeneratorConfig::default(), 0).unwrap();
    let start = Instant::now();
    solve_ordered(&inst, &identity_order(inst.num_rack_types), HeuristicConfig::default()).unwrap();
    let single = start.elapsed();
    let config = ExperimentConfig {
        source: InstanceSource::Generate {
            generator: GeneratorConfig::default(),
            count: 80,
        },
        algorithms: vec![
            AlgorithmSpec::FixedOrder {
                heuristic: HeuristicConfig::default(),
            },
            AlgorithmSpec::Policy {
                heuristic: HeuristicConfig::default(),
                checkpoint: checkpoint_path.to_path_buf(),
            },
        ],
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let report = bench::run_experiment(&config).unwrap();
    let bench_time = start.elapsed();
    let mean = |id: &str| {
        report
            .summary
            .algorithms
            .iter()
            .find(|a| a.algorithm == id)
            .map(|a| a.mean.objective)
            .unwrap()
    };
    outcome(
        single <= Duration::from_secs(5) && bench_time <= Duration::from_secs(600) && report.failures() == 0,
        format!(
            "single solve {:.3} s (<= 5 s); 80-instance benchmark with policy {} (<= 600 s), failures {}, mean objective policy {:.1} vs fixed {:.1}",
            single.as_secs_f64(),
            secs(bench_time),
            report.failures(),
            mean("policy"),
            mean("fixed_order")
        ),
    )
}

fn peak_memory_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn scalability() -> Outcome {
    let start = Instant::now();
    let config = GeneratorConfig::tiled(100_000, 10, vec![20, 100, 500]);
    let result = generate_instance(&config, 0)
        .and_then(|inst| solve_ordered(&inst, &identity_order(inst.num_rack_types), HeuristicConfig::default()));
    let elapsed = start.elapsed();
    let peak = peak_memory_kib();
    let memory_ok = peak.is_none_or(|kib| kib <= 16 * 1024 * 1024);
    let memory = peak.map_or("unavailable".to_string(), |kib| {
        format!("{:.0} MiB", kib as f64 / 1024.0)
    });
    match result {
        Ok(sol) => outcome(
            elapsed <= Duration::from_secs(3600) && memory_ok,
            format!(
                "|P|=100000, |K|=100: generated and solved in {} (<= 3600 s), objective {:.1}, peak memory {memory} (<= 16 GiB)",
                secs(elapsed),
                sol.breakdown.augmented
            ),
        ),
        Err(e) => outcome(false, format!("|P|=100000, |K|=100 failed: {e}")),
    }
}

fn files_under(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().display().to_string());
            }
        }
    }
    out.sort();
    out
}

fn determinism(checkpoint_path: &Path, root: &Path) -> Outcome {
    let run = |name: &str| {
        let config = ExperimentConfig {
            source: InstanceSource::Generate {
                generator: GeneratorConfig::default(),
                count: 10,
            },
            algorithms: vec![
                AlgorithmSpec::FixedOrder {
                    heuristic: HeuristicConfig::default(),
                },
                AlgorithmSpec::RandomOrder {
                    heuristic: HeuristicConfig::default(),
                    samples: 5,
                },
                AlgorithmSpec::Policy {
                    heuristic: HeuristicConfig::default(),
                    checkpoint: checkpoint_path.to_path_buf(),
                },
            ],
            seed: 9,
            out_dir: root.join(name),
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
            ..ExperimentConfig::default()
        };
        bench::run_experiment(&config).unwrap();
        root.join(name)
    };
    let (a, b) = (run("first"), run("second"));
    let files = files_under(&a);
    let compared: Vec<&String> = files
        .iter()
        .filter(|f| !f.ends_with("timings.csv") && !f.ends_with("metadata.json"))
        .collect();
    let differing = compared
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .count();
    let same_listing = files == files_under(&b);
    let inst = |s| instance_to_json(&generate_instance(&GeneratorConfig::default(), s).unwrap()).unwrap();
    let generated_same = inst(0) == inst(0);
    outcome(
        differing == 0 && same_listing && generated_same && compared.len() > 20,
        format!(
            "{} instance, assignment and report files compared across two runs, {differing} differ (= 0)",
            compared.len()
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint_path = dir.path().join("policy.bin");
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 gradient correctness", gradient_correctness());
    report("2 oracle equivalence", oracle_equivalence());
    report("3 constraint satisfaction", constraint_satisfaction());
    report("4 ordering matters", ordering_matters());
    report("5 policy improvement", policy_improvement(&checkpoint_path));
    report("6 reinforce machinery", reinforce_machinery());
    report("7 throughput", throughput(&checkpoint_path, &dir.path().join("bench")));
    report("8 scalability", scalability());
    report("9 determinism", determinism(&checkpoint_path, dir.path()));
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
