//! Choosing the rack-type order fed to the heuristic.
//!
//! A learned policy ([`policy`]) trained by multi-trajectory REINFORCE
//! ([`train`]), plus exhaustive and random baselines.

pub mod checkpoint;
pub mod policy;
pub mod tape;
pub mod train;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heuristic::{Heuristic, HeuristicConfig, Solution};
use crate::matrix::Matrix;
use crate::model::{Assignment, ProblemInstance};
use crate::rng;

pub use policy::{DecodeMode, PolicyConfig, PolicyParams, Rollout, Starts};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

pub const EXHAUSTIVE_MAX_TYPES: usize = 8;

/// Two features per rack type, one row each:
/// the demand gap `(d_k − current_k) / |P|` and the resource-and-group
/// density `(Σ_r R[k,r] + #groups containing k) / (|R| + |I|)`.
pub fn featurize(inst: &ProblemInstance) -> Matrix<f64> {
    let nk = inst.num_rack_types;
    let current = inst.prior_counts();
    let np = inst.num_positions.max(1) as f64;
    let denom = (inst.num_resources + inst.spread_requirements.len()) as f64;
    let mut out = Matrix::filled(nk, policy::NUM_FEATURES, 0.0);
    for k in 0..nk {
        out[(k, 0)] = (inst.demands[k] - current[k] as i64) as f64 / np;
        let resources: f64 = inst.resource_matrix.row(k).iter().sum();
        let groups = inst
            .spread_requirements
            .iter()
            .filter(|req| req.rack_group.contains(&k))
            .count() as f64;
        out[(k, 1)] = if denom > 0.0 { (resources + groups) / denom } else { 0.0 };
    }
    out
}

/// Negative augmented objective; higher is better.
pub fn reward(inst: &ProblemInstance, x: &Assignment) -> Result<f64> {
    Ok(-crate::objective::total_utility(inst, x)?.augmented)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub best: Solution,
    pub orders_evaluated: usize,
}

/// Solves every permutation in lexicographic order and keeps the first one
/// with the lowest augmented objective. Orders that run out of vacant
/// positions are skipped; the error is returned only if every order fails.
pub fn exhaustive_order_search(inst: &ProblemInstance, config: HeuristicConfig) -> Result<ExhaustiveResult> {
    let n = inst.num_rack_types;
    if n > EXHAUSTIVE_MAX_TYPES {
        return Err(Error::TooManyTypes {
            got: n,
            max: EXHAUSTIVE_MAX_TYPES,
        });
    }
    let heuristic = Heuristic::new(inst, config)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<Solution> = None;
    let mut first_error = None;
    let mut evaluated = 0;
    loop {
        evaluated += 1;
        match heuristic.solve_ordered(&order) {
            Ok(s) => {
                if best
                    .as_ref()
                    .is_none_or(|b| s.breakdown.augmented < b.breakdown.augmented)
                {
                    best = Some(s);
                }
            }
            Err(e @ Error::Infeasible { .. }) => {
                first_error.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
        if !next_permutation(&mut order) {
            break;
        }
    }
    match best {
        Some(best) => Ok(ExhaustiveResult {
            best,
            orders_evaluated: evaluated,
        }),
        None => Err(first_error.expect("every order failed")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSample {
    pub order: Vec<usize>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub samples: Vec<OrderSample>,
}

impl OrderStats {
    pub fn from_samples(samples: Vec<OrderSample>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().map(|s| s.objective).sum::<f64>() / n;
        let min = samples.iter().map(|s| s.objective).fold(f64::INFINITY, f64::min);
        let max = samples.iter().map(|s| s.objective).fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean,
            min,
            max,
            samples,
        }
    }

    /// `(max − min) / mean`.
    pub fn relative_range(&self) -> f64 {
        (self.max - self.min) / self.mean.abs()
    }
}

/// Uniformly random permutations drawn from `seed`.
pub fn random_orders(num_types: usize, n_samples: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng::stream_rng(rng::derive_seed(seed, rng::tags::RANDOM_ORDERS), 0);
    (0..n_samples)
        .map(|_| {
            let mut o: Vec<usize> = (0..num_types).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect()
}

/// Solves `orders` independently, in parallel when available.
pub fn solve_orders(inst: &ProblemInstance, orders: &[Vec<usize>], config: HeuristicConfig) -> Result<Vec<Solution>> {
    let heuristic = Heuristic::new(inst, config)?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        orders.par_iter().map(|o| heuristic.solve_ordered(o)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        orders.iter().map(|o| heuristic.solve_ordered(o)).collect()
    }
}

pub fn random_order_baseline(
    inst: &ProblemInstance,
    n_samples: usize,
    seed: u64,
    config: HeuristicConfig,
) -> Result<OrderStats> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let orders = random_orders(inst.num_rack_types, n_samples, seed);
    let solutions = solve_orders(inst, &orders, config)?;
    Ok(OrderStats::from_samples(
        solutions
            .into_iter()
            .map(|s| OrderSample {
                order: s.order,
                objective: s.breakdown.augmented,
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub best: Solution,
    /// Every greedy candidate with its augmented objective.
    pub candidates: Vec<OrderSample>,
}

/// Greedy multi-start decoding, one heuristic solve per candidate; returns
/// the candidate with the lowest objective (first on ties).
pub fn infer_order(inst: &ProblemInstance, params: &PolicyParams<f32>, config: HeuristicConfig) -> Result<Inference> {
    let features = featurize(inst);
    let rollout = policy::decode_rollout(
        &params.cast::<f64>(),
        &features,
        Starts::MultiStart,
        DecodeMode::Greedy,
        0,
    )?;
    let solutions = solve_orders(inst, &rollout.orders, config)?;
    let candidates = solutions
        .iter()
        .map(|s| OrderSample {
            order: s.order.clone(),
            objective: s.breakdown.augmented,
        })
        .collect();
    let best = solutions
        .into_iter()
        .reduce(|a, b| {
            if b.breakdown.augmented < a.breakdown.augmented {
                b
            } else {
                a
            }
        })
        .expect("at least one candidate");
    Ok(Inference { best, candidates })
}
