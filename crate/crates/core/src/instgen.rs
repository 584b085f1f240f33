//! Synthetic instance generation for the three-level data-center layout.
//!
//! Positions are split into contiguous, equally sized blocks per level
//! (data centers, suites, main switchboards) so that every block nests in
//! exactly one block of the level above.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Assignment, ProblemInstance, SpreadRequirement};
use crate::rng::{self, tags};

/// Resources offered by each of the ten reference rack types (rows) over ten
/// resource types (columns).
pub const REFERENCE_RESOURCES: [[u8; 10]; 10] = [
    [0, 0, 0, 0, 0, 1, 1, 0, 1, 0],
    [0, 1, 0, 0, 1, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 0, 1, 0, 1, 0],
    [0, 1, 1, 0, 0, 0, 1, 0, 0, 1],
    [0, 1, 0, 1, 0, 0, 0, 0, 1, 0],
    [0, 0, 1, 1, 1, 0, 1, 0, 1, 0],
    [1, 0, 1, 1, 0, 0, 0, 0, 0, 0],
    [1, 1, 0, 1, 0, 0, 1, 0, 0, 0],
    [0, 0, 0, 0, 1, 0, 0, 0, 1, 0],
    [1, 1, 0, 0, 0, 0, 0, 0, 0, 1],
];

/// Probability that a position previously held each reference rack type;
/// the final entry is the empty position.
pub const REFERENCE_PRIOR_PROBABILITIES: [f64; 11] = [
    0.033, 0.014, 0.030, 0.010, 0.009, 0.102, 0.029, 0.204, 0.018, 0.051, 0.5,
];

/// Spread requirement with the scope group given as a hierarchy level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpreadTemplate {
    pub resource_type: usize,
    pub rack_group: Vec<usize>,
    /// Zero-based level; the requirement spans every scope of that level.
    pub level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T> Range<T> {
    pub const fn new(min: T, max: T) -> Self {
        Self { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_positions: usize,
    pub num_rack_types: usize,
    pub num_resources: usize,
    /// Scope count per level, outermost first.
    pub scope_counts: Vec<usize>,
    pub demand_range: Range<i64>,
    pub placement_limit_range: Range<i64>,
    /// Limit range per level, same order as `scope_counts`.
    pub limit_ranges: Vec<Range<f64>>,
    /// `|K| + 1` entries; the last is the empty position.
    pub prior_probabilities: Vec<f64>,
    /// `|K| x |R|`.
    pub resource_matrix: Matrix<f64>,
    pub movement_weights: Vec<f64>,
    pub beta_spread: f64,
    pub beta_limit: f64,
    pub gamma_placement: f64,
    pub spread_templates: Vec<SpreadTemplate>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let resources = REFERENCE_RESOURCES
            .iter()
            .map(|row| row.iter().map(|&v| f64::from(v)).collect())
            .collect();
        Self {
            num_positions: 1000,
            num_rack_types: 10,
            num_resources: 10,
            scope_counts: vec![2, 10, 50],
            demand_range: Range::new(20, 60),
            placement_limit_range: Range::new(800, 1000),
            limit_ranges: vec![Range::new(3.0, 6.0), Range::new(30.0, 50.0), Range::new(90.0, 110.0)],
            prior_probabilities: REFERENCE_PRIOR_PROBABILITIES.to_vec(),
            resource_matrix: Matrix::from_rows(resources).expect("rectangular"),
            movement_weights: vec![1.0; 10],
            beta_spread: WeightPreset::Balanced.weights().1,
            beta_limit: WeightPreset::Balanced.weights().2,
            gamma_placement: WeightPreset::Balanced.weights().3,
            spread_templates: default_spread_templates(),
            seed: 0,
        }
    }
}

/// Named objective weight sets.
///
/// `Balanced` brings movement, weighted spread and weighted limit penalty to
/// similar magnitudes on the default layout. `Uniform` puts a weight of 10 on
/// both secondary terms; the limit penalty then dominates and is nearly
/// constant across feasible layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPreset {
    Balanced,
    Uniform,
}

impl WeightPreset {
    /// `(M, β₁, β₂, γ)`.
    pub fn weights(self) -> (f64, f64, f64, f64) {
        match self {
            WeightPreset::Balanced => (1.0, 50.0, 0.2, 100.0),
            WeightPreset::Uniform => (1.0, 10.0, 10.0, 100.0),
        }
    }
}

pub fn default_spread_templates() -> Vec<SpreadTemplate> {
    vec![
        SpreadTemplate {
            resource_type: 0,
            rack_group: vec![6, 7, 9],
            level: 0,
        },
        SpreadTemplate {
            resource_type: 4,
            rack_group: vec![1, 2, 5, 8],
            level: 1,
        },
        SpreadTemplate {
            resource_type: 6,
            rack_group: vec![0, 2, 3, 5, 7],
            level: 1,
        },
        SpreadTemplate {
            resource_type: 8,
            rack_group: vec![0, 2, 4, 5, 8],
            level: 2,
        },
    ]
}

impl GeneratorConfig {
    /// Default layout with fewer positions; scope counts are kept.
    pub fn with_positions(num_positions: usize) -> Self {
        Self {
            num_positions,
            ..Self::default()
        }
    }

    /// Large configuration: the reference rack types tiled `factor` times,
    /// with the prior probabilities of each rack type split evenly across
    /// its copies.
    pub fn tiled(num_positions: usize, factor: usize, scope_counts: Vec<usize>) -> Self {
        let base = Self::default();
        let nk = 10 * factor;
        let rows: Vec<Vec<f64>> = (0..nk).map(|k| base.resource_matrix.row(k % 10).to_vec()).collect();
        let mut probs: Vec<f64> = (0..nk)
            .map(|k| REFERENCE_PRIOR_PROBABILITIES[k % 10] / factor as f64)
            .collect();
        probs.push(REFERENCE_PRIOR_PROBABILITIES[10]);
        let spread_templates = base
            .spread_templates
            .iter()
            .map(|t| SpreadTemplate {
                resource_type: t.resource_type,
                rack_group: (0..factor)
                    .flat_map(|c| t.rack_group.iter().map(move |&k| k + 10 * c))
                    .collect(),
                level: t.level,
            })
            .collect();
        Self {
            num_positions,
            num_rack_types: nk,
            scope_counts,
            prior_probabilities: probs,
            resource_matrix: Matrix::from_rows(rows).expect("rectangular"),
            movement_weights: vec![1.0; nk],
            spread_templates,
            ..base
        }
    }

    pub fn with_weights(mut self, preset: WeightPreset) -> Self {
        let (m, b1, b2, g) = preset.weights();
        self.movement_weights = vec![m; self.num_rack_types];
        self.beta_spread = b1;
        self.beta_limit = b2;
        self.gamma_placement = g;
        self
    }

    /// Keeps only the first `k` reference rack types. Their prior
    /// probabilities are unchanged; the remainder goes to the empty position.
    /// Templates lose the dropped types and vanish if fewer than one remains.
    pub fn with_rack_types(mut self, k: usize) -> Self {
        let k = k.min(self.num_rack_types);
        let rows: Vec<Vec<f64>> = (0..k).map(|i| self.resource_matrix.row(i).to_vec()).collect();
        self.resource_matrix = if k == 0 {
            Matrix::filled(0, self.num_resources, 0.0)
        } else {
            Matrix::from_rows(rows).expect("rectangular")
        };
        let mut probs: Vec<f64> = self.prior_probabilities[..k].to_vec();
        probs.push(1.0 - probs.iter().sum::<f64>());
        self.prior_probabilities = probs;
        self.movement_weights.truncate(k);
        self.spread_templates = self
            .spread_templates
            .into_iter()
            .filter_map(|mut t| {
                t.rack_group.retain(|&r| r < k);
                (!t.rack_group.is_empty()).then_some(t)
            })
            .collect();
        self.num_rack_types = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scope_counts.is_empty() {
            return bad("at least one scope level is required".into());
        }
        let mut outer = 1;
        for (level, &count) in self.scope_counts.iter().enumerate() {
            if count == 0 || !self.num_positions.is_multiple_of(count) {
                return bad(format!(
                    "level {level}: {count} scopes do not divide {} positions",
                    self.num_positions
                ));
            }
            if count % outer != 0 {
                return bad(format!(
                    "level {level}: {count} scopes cannot nest inside {outer} parent scopes"
                ));
            }
            outer = count;
        }
        if self.limit_ranges.len() != self.scope_counts.len() {
            return bad("one limit range per scope level is required".into());
        }
        if self.limit_ranges.iter().any(|r| !(r.min >= 0.0 && r.min <= r.max)) {
            return bad("limit ranges must satisfy 0 <= min <= max".into());
        }
        if !(0 <= self.demand_range.min && self.demand_range.min <= self.demand_range.max) {
            return bad("demand range must satisfy 0 <= min <= max".into());
        }
        if !(0 <= self.placement_limit_range.min && self.placement_limit_range.min <= self.placement_limit_range.max) {
            return bad("placement limit range must satisfy 0 <= min <= max".into());
        }
        if self.prior_probabilities.len() != self.num_rack_types + 1 {
            return bad(format!(
                "{} prior probabilities, expected {}",
                self.prior_probabilities.len(),
                self.num_rack_types + 1
            ));
        }
        if self.prior_probabilities.iter().any(|&p| !(p >= 0.0)) {
            return bad("prior probabilities must be non-negative".into());
        }
        let total: f64 = self.prior_probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("prior probabilities sum to {total}, expected 1"));
        }
        if self.resource_matrix.rows() != self.num_rack_types || self.resource_matrix.cols() != self.num_resources {
            return bad("resource matrix shape must be num_rack_types x num_resources".into());
        }
        if self.movement_weights.len() != self.num_rack_types {
            return bad("one movement weight per rack type is required".into());
        }
        for t in &self.spread_templates {
            if t.level >= self.scope_counts.len() || t.resource_type >= self.num_resources {
                return bad(format!("spread template {t:?} is out of range"));
            }
            if t.rack_group.iter().any(|&k| k >= self.num_rack_types) {
                return bad(format!("spread template {t:?} names an unknown rack type"));
            }
        }
        Ok(())
    }
}

/// Scope membership plus, per scope, its level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeHierarchy {
    pub membership: Matrix<bool>,
    pub levels: Vec<usize>,
    /// First scope id of each level.
    pub level_offsets: Vec<usize>,
}

impl ScopeHierarchy {
    /// Scope ids a position belongs to, one per level.
    pub fn scopes_of(&self, p: usize) -> Vec<usize> {
        (0..self.membership.cols())
            .filter(|&s| self.membership[(p, s)])
            .collect()
    }

    pub fn level_scopes(&self, level: usize) -> std::ops::Range<usize> {
        let start = self.level_offsets[level];
        let end = self.level_offsets.get(level + 1).copied().unwrap_or(self.levels.len());
        start..end
    }
}

pub fn build_scope_hierarchy(config: &GeneratorConfig) -> Result<ScopeHierarchy> {
    config.validate()?;
    let np = config.num_positions;
    let total: usize = config.scope_counts.iter().sum();
    let mut membership = Matrix::filled(np, total, false);
    let mut levels = Vec::with_capacity(total);
    let mut level_offsets = Vec::with_capacity(config.scope_counts.len());
    let mut offset = 0;
    for (level, &count) in config.scope_counts.iter().enumerate() {
        level_offsets.push(offset);
        let size = np / count;
        for p in 0..np {
            membership[(p, offset + p / size)] = true;
        }
        levels.extend(std::iter::repeat_n(level, count));
        offset += count;
    }
    Ok(ScopeHierarchy {
        membership,
        levels,
        level_offsets,
    })
}

/// Draws the previous mapping: every position independently picks a rack
/// type or stays empty.
pub fn sample_prior_mapping(config: &GeneratorConfig, seed: u64) -> Result<Assignment> {
    config.validate()?;
    let mut rng = rng::stream_rng(rng::derive_seed(seed, tags::PRIOR), 0);
    let nk = config.num_rack_types;
    let mut cumulative = Vec::with_capacity(nk + 1);
    let mut acc = 0.0;
    for &p in &config.prior_probabilities {
        acc += p;
        cumulative.push(acc);
    }
    let mut occupants = Vec::with_capacity(config.num_positions);
    for _ in 0..config.num_positions {
        let u: f64 = rng.random::<f64>() * acc;
        let category = cumulative.iter().position(|&c| u < c).unwrap_or(nk);
        occupants.push((category < nk).then_some(category));
    }
    Ok(Assignment::from_occupants(nk, &occupants))
}

pub fn generate_instance(config: &GeneratorConfig, seed: u64) -> Result<ProblemInstance> {
    config.validate()?;
    let hierarchy = build_scope_hierarchy(config)?;
    let (nk, nr) = (config.num_rack_types, config.num_resources);

    let mut demand_rng = rng::stream_rng(rng::derive_seed(seed, tags::DEMANDS), 0);
    let mut demands: Vec<i64> = (0..nk)
        .map(|_| demand_rng.random_range(config.demand_range.min..=config.demand_range.max))
        .collect();
    clip_total_demand(&mut demands, config.num_positions as i64);

    let mut q_rng = rng::stream_rng(rng::derive_seed(seed, tags::PLACEMENT), 0);
    let placement_limit = q_rng.random_range(config.placement_limit_range.min..=config.placement_limit_range.max);

    let mut limit_rng = rng::stream_rng(rng::derive_seed(seed, tags::LIMITS), 0);
    let ns = hierarchy.levels.len();
    let mut scope_limits = Matrix::filled(ns, nr, 0.0);
    for s in 0..ns {
        let range = config.limit_ranges[hierarchy.levels[s]];
        for r in 0..nr {
            scope_limits[(s, r)] = if range.min == range.max {
                range.min
            } else {
                limit_rng.random_range(range.min..range.max)
            };
        }
    }

    let spread_requirements = config
        .spread_templates
        .iter()
        .map(|t| SpreadRequirement {
            resource_type: t.resource_type,
            rack_group: t.rack_group.clone(),
            scope_group: hierarchy.level_scopes(t.level).collect(),
        })
        .collect();

    let inst = ProblemInstance {
        num_positions: config.num_positions,
        num_rack_types: nk,
        num_resources: nr,
        resource_matrix: config.resource_matrix.clone(),
        scope_membership: hierarchy.membership,
        scope_limits,
        demands,
        placement_limit,
        movement_weights: config.movement_weights.clone(),
        spread_requirements,
        prior_assignment: sample_prior_mapping(config, seed)?,
        beta_spread: config.beta_spread,
        beta_limit: config.beta_limit,
        gamma_placement: config.gamma_placement,
        seed: Some(seed),
    };
    inst.ensure_valid()?;
    Ok(inst)
}

/// Seed of instance `index` in a batch generated from `seed`.
pub fn batch_seed(seed: u64, index: u64) -> u64 {
    rng::derive_seed(seed, index.wrapping_add(1 << 32))
}

/// Instances `0..count` of a batch, each reproducible on its own.
pub fn generate_batch(config: &GeneratorConfig, seed: u64, count: usize) -> Result<Vec<ProblemInstance>> {
    (0..count as u64)
        .map(|i| generate_instance(config, batch_seed(seed, i)))
        .collect()
}

/// Lowers the largest demands one at a time until the total fits.
fn clip_total_demand(demands: &mut [i64], capacity: i64) {
    let mut total: i64 = demands.iter().sum();
    while total > capacity {
        let (k, _) = demands
            .iter()
            .enumerate()
            .max_by_key(|&(k, &d)| (d, std::cmp::Reverse(k)))
            .expect("non-empty when total exceeds capacity");
        demands[k] -= 1;
        total -= 1;
    }
}
