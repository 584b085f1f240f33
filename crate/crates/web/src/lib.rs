//! Browser bindings for the rack placement solver.
//!
//! Every export takes and returns JSON strings. The page keeps the current
//! instance as JSON and passes it back on each call.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use rackopt::heuristic::{identity_order, solve_ordered};
use rackopt::instgen::{generate_instance, GeneratorConfig, Range};
use rackopt::io::{instance_from_json, instance_to_json};
use rackopt::model::constraint_report;
use rackopt::ordering::random_order_baseline;
use rackopt::{HeuristicConfig, ObjectiveBreakdown, ProblemInstance};

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutParams {
    pub positions: usize,
    pub rack_types: usize,
    pub seed: u64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            positions: 400,
            rack_types: 6,
            seed: 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Layout {
    pub instance: String,
    pub num_positions: usize,
    pub num_rack_types: usize,
    pub demands: Vec<i64>,
    /// Innermost scope of each position, for drawing.
    pub leaf_scope: Vec<usize>,
    pub prior: Vec<Option<usize>>,
}

#[derive(Debug, Serialize)]
pub struct Placement {
    pub order: Vec<usize>,
    pub occupants: Vec<Option<usize>>,
    pub moved: usize,
    pub placement_excess: u64,
    pub breakdown: ObjectiveBreakdown,
}

#[derive(Debug, Serialize)]
pub struct Sweep {
    pub objectives: Vec<f64>,
    pub orders: Vec<Vec<usize>>,
    pub best_order: Vec<usize>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn scaled(range: Range<i64>, num_positions: usize) -> Range<i64> {
    let f = |v: i64| ((v * num_positions as i64) / 1000).max(1);
    Range::new(f(range.min), f(range.max))
}

fn config_for(params: &LayoutParams) -> Result<GeneratorConfig, String> {
    if !(50..=5000).contains(&params.positions) {
        return Err("positions must be between 50 and 5000".into());
    }
    if !(1..=10).contains(&params.rack_types) {
        return Err("rack types must be between 1 and 10".into());
    }
    let base = GeneratorConfig::default().with_rack_types(params.rack_types);
    Ok(GeneratorConfig {
        num_positions: params.positions,
        demand_range: scaled(base.demand_range, params.positions),
        placement_limit_range: scaled(base.placement_limit_range, params.positions),
        seed: params.seed,
        ..base
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn load(instance: &str) -> Result<ProblemInstance, String> {
    instance_from_json(instance).map_err(|e| e.to_string())
}

pub fn generate_layout(params: &str) -> Result<String, String> {
    let params: LayoutParams = serde_json::from_str(params).map_err(|e| e.to_string())?;
    let inst = generate_instance(&config_for(&params)?, params.seed).map_err(|e| e.to_string())?;
    let leaf_scope = (0..inst.num_positions)
        .map(|p| {
            (0..inst.num_scopes())
                .rev()
                .find(|&s| inst.scope_membership[(p, s)])
                .unwrap_or(0)
        })
        .collect();
    to_json(&Layout {
        instance: instance_to_json(&inst).map_err(|e| e.to_string())?,
        num_positions: inst.num_positions,
        num_rack_types: inst.num_rack_types,
        demands: inst.demands.clone(),
        leaf_scope,
        prior: inst.prior_assignment.occupants(),
    })
}

/// `order` is a JSON array of rack types; `null` means the identity order.
pub fn solve_layout(instance: &str, order: &str) -> Result<String, String> {
    let inst = load(instance)?;
    let order: Option<Vec<usize>> = serde_json::from_str(order).map_err(|e| e.to_string())?;
    let order = order.unwrap_or_else(|| identity_order(inst.num_rack_types));
    let solution = solve_ordered(&inst, &order, HeuristicConfig::default()).map_err(|e| e.to_string())?;
    let report = constraint_report(&inst, &solution.assignment).map_err(|e| e.to_string())?;
    let occupants = solution.assignment.occupants();
    let moved = occupants
        .iter()
        .zip(inst.prior_assignment.occupants())
        .filter(|&(a, b)| *a != b)
        .count();
    to_json(&Placement {
        order: solution.order,
        occupants,
        moved,
        placement_excess: report.g3_excess,
        breakdown: solution.breakdown,
    })
}

pub fn sweep_orders(instance: &str, samples: usize, seed: u64) -> Result<String, String> {
    let inst = load(instance)?;
    if !(1..=500).contains(&samples) {
        return Err("samples must be between 1 and 500".into());
    }
    let stats = random_order_baseline(&inst, samples, seed, HeuristicConfig::default()).map_err(|e| e.to_string())?;
    let best = stats
        .samples
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least one sample");
    to_json(&Sweep {
        objectives: stats.samples.iter().map(|s| s.objective).collect(),
        orders: stats.samples.iter().map(|s| s.order.clone()).collect(),
        best_order: best.order.clone(),
        mean: stats.mean,
        min: stats.min,
        max: stats.max,
    })
}

#[wasm_bindgen]
pub fn generate(params: &str) -> Result<String, JsValue> {
    generate_layout(params).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn solve(instance: &str, order: &str) -> Result<String, JsValue> {
    solve_layout(instance, order).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sweep(instance: &str, samples: usize, seed: u64) -> Result<String, JsValue> {
    sweep_orders(instance, samples, seed).map_err(|e| JsValue::from_str(&e))
}
