//! Utility, augmented objective and its gradient with respect to a (relaxed)
//! assignment.
//!
//! The objective is a fixed computational graph:
//!
//! ```text
//! X ──► per-scope usage  SᵀXR ──► ζ(usage − L)        ──┐
//!   ├─► spread utilization u_i ──► std(u_i)           ──┼─► f
//!   ├─► removals max(0, X̄ − X) ──► weighted movement  ──┤
//!   └─► type counts ──► max(0, Σ max(0, Δ_k) − q)     ──┘
//! ```
//!
//! The gradient is a hand-written reverse sweep over that graph. Hinge kinks
//! (`max(0, z)` at `z = 0`) get derivative 0, and a zero-variance spread group
//! contributes no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Assignment, ProblemInstance, SpreadRequirement};

/// Penalty applied to `usage − limit` per scope and resource.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitPenalty {
    /// `ln(1 + e^z)`
    #[default]
    Softplus,
    /// `max(0, z)`
    Hinge,
}

impl LimitPenalty {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            LimitPenalty::Softplus => softplus(z),
            LimitPenalty::Hinge => z.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            LimitPenalty::Softplus => sigmoid(z),
            LimitPenalty::Hinge => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Population standard deviation (divides by n).
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// d std / d u_s for every entry; all zero when the variance is exactly zero.
fn population_std_grad(values: &[f64], out: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = population_std(values);
    for (o, v) in out.iter_mut().zip(values) {
        *o = if std == 0.0 { 0.0 } else { (v - mean) / (n * std) };
    }
}

/// All six scalar terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    /// Weighted removals relative to the prior mapping.
    pub movement: f64,
    /// Sum of spread metrics over all requirements (unweighted).
    pub spread: f64,
    /// Sum of per-cell limit penalties (unweighted).
    pub limit_penalty: f64,
    /// `max(0, new placements − q)`.
    pub placement_excess: f64,
    /// `movement + β₁·spread + β₂·limit_penalty`.
    pub utility: f64,
    /// `utility + γ·placement_excess`; the quantity the heuristic descends.
    pub augmented: f64,
}

/// `∂f/∂x_{p,k}` for every position and rack type.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub values: Matrix<f64>,
}

impl GradientField {
    pub fn get(&self, p: usize, k: usize) -> f64 {
        self.values[(p, k)]
    }
}

/// Precomputed scope lookups for one instance.
#[derive(Debug, Clone)]
pub struct ScopeIndex {
    offsets: Vec<usize>,
    scopes: Vec<usize>,
    /// Per requirement, scope id → index within its scope group.
    spread_local: Vec<Vec<Option<usize>>>,
    /// Per rack type, the requirements whose group contains it.
    type_requirements: Vec<Vec<usize>>,
}

impl ScopeIndex {
    pub fn new(inst: &ProblemInstance) -> Self {
        let ns = inst.num_scopes();
        let mut offsets = Vec::with_capacity(inst.num_positions + 1);
        let mut scopes = Vec::new();
        offsets.push(0);
        for p in 0..inst.num_positions {
            let row = inst.scope_membership.row(p);
            scopes.extend((0..ns).filter(|&s| row[s]));
            offsets.push(scopes.len());
        }
        let spread_local = inst
            .spread_requirements
            .iter()
            .map(|req| {
                let mut local = vec![None; ns];
                for (i, &s) in req.scope_group.iter().enumerate() {
                    local[s] = Some(i);
                }
                local
            })
            .collect();
        let mut type_requirements = vec![Vec::new(); inst.num_rack_types];
        for (i, req) in inst.spread_requirements.iter().enumerate() {
            for &k in &req.rack_group {
                if !type_requirements[k].contains(&i) {
                    type_requirements[k].push(i);
                }
            }
        }
        Self {
            offsets,
            scopes,
            spread_local,
            type_requirements,
        }
    }

    #[inline]
    pub fn scopes_of(&self, p: usize) -> &[usize] {
        &self.scopes[self.offsets[p]..self.offsets[p + 1]]
    }

    #[inline]
    pub fn local_scope(&self, req: usize, s: usize) -> Option<usize> {
        self.spread_local[req][s]
    }

    pub fn requirements_of(&self, k: usize) -> &[usize] {
        &self.type_requirements[k]
    }
}

/// Intermediate node values of the objective graph for one assignment.
///
/// The heuristic keeps one of these up to date incrementally; everything the
/// objective and its gradient need is derivable from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `|S| x |R|` resource usage per scope.
    pub usage: Matrix<f64>,
    /// Per requirement, utilization of each scope in its group.
    pub spread_util: Vec<Vec<f64>>,
    /// Per-type sum of the assignment column.
    pub counts: Vec<f64>,
    /// Per-type sum of the prior assignment column.
    pub prior_counts: Vec<f64>,
    /// `Σ M_k max(0, x̄ − x)`.
    pub movement: f64,
}

/// Reverse-sweep adjoints at the scope level.
#[derive(Debug, Clone)]
pub struct ScopeAdjoints {
    /// `β₂ ζ'(usage − L)` per scope and resource.
    pub usage: Matrix<f64>,
    /// `β₁ ∂std/∂u` per requirement and group scope.
    pub spread: Vec<Vec<f64>>,
    /// Per-type derivative of the γ-weighted placement hinge.
    pub placement: Vec<f64>,
}

/// Objective evaluator bound to one instance.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    inst: &'a ProblemInstance,
    penalty: LimitPenalty,
    index: ScopeIndex,
}

impl<'a> Objective<'a> {
    pub fn new(inst: &'a ProblemInstance) -> Self {
        Self {
            inst,
            penalty: LimitPenalty::Softplus,
            index: ScopeIndex::new(inst),
        }
    }

    pub fn with_penalty(mut self, penalty: LimitPenalty) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn instance(&self) -> &'a ProblemInstance {
        self.inst
    }

    pub fn penalty(&self) -> LimitPenalty {
        self.penalty
    }

    pub fn index(&self) -> &ScopeIndex {
        &self.index
    }

    /// Forward pass over the dense assignment.
    pub fn evaluate(&self, x: &Assignment) -> Result<Evaluation> {
        let inst = self.inst;
        inst.check_assignment_dims(x)?;
        let (nk, nr) = (inst.num_rack_types, inst.num_resources);
        let mut usage = Matrix::filled(inst.num_scopes(), nr, 0.0);
        let mut spread_util: Vec<Vec<f64>> = inst
            .spread_requirements
            .iter()
            .map(|r| vec![0.0; r.scope_group.len()])
            .collect();
        let mut counts = vec![0.0; nk];
        let mut prior_counts = vec![0.0; nk];
        let mut movement = 0.0;
        let mut contrib = vec![0.0; nr];
        let prior = &inst.prior_assignment;

        for p in 0..inst.num_positions {
            let row = x.row(p);
            let prow = prior.row(p);
            contrib.iter_mut().for_each(|c| *c = 0.0);
            let mut any = false;
            for k in 0..nk {
                let v = row[k];
                counts[k] += v;
                prior_counts[k] += prow[k];
                let removed = prow[k] - v;
                if removed > 0.0 {
                    movement += inst.movement_weights[k] * removed;
                }
                if v != 0.0 {
                    any = true;
                    for (c, &amount) in contrib.iter_mut().zip(inst.resource_matrix.row(k)) {
                        *c += v * amount;
                    }
                }
            }
            if !any {
                continue;
            }
            for &s in self.index.scopes_of(p) {
                for (u, &c) in usage.row_mut(s).iter_mut().zip(&contrib) {
                    *u += c;
                }
            }
            for (i, req) in inst.spread_requirements.iter().enumerate() {
                let amount = spread_contribution(inst, req, row);
                if amount == 0.0 {
                    continue;
                }
                for &s in self.index.scopes_of(p) {
                    if let Some(local) = self.index.local_scope(i, s) {
                        spread_util[i][local] += amount;
                    }
                }
            }
        }
        Ok(Evaluation {
            usage,
            spread_util,
            counts,
            prior_counts,
            movement,
        })
    }

    /// Per-cell penalty `ζ(usage − L)`.
    pub fn penalty_cells(&self, eval: &Evaluation) -> Matrix<f64> {
        let mut cells = eval.usage.clone();
        for (c, &l) in cells.as_mut_slice().iter_mut().zip(self.inst.scope_limits.as_slice()) {
            *c = self.penalty.value(*c - l);
        }
        cells
    }

    pub fn new_placements(&self, eval: &Evaluation) -> f64 {
        eval.counts
            .iter()
            .zip(&eval.prior_counts)
            .map(|(c, p)| (c - p).max(0.0))
            .sum()
    }

    pub fn breakdown(&self, eval: &Evaluation) -> ObjectiveBreakdown {
        let inst = self.inst;
        let spread: f64 = eval.spread_util.iter().map(|u| population_std(u)).sum();
        let limit_penalty: f64 = self.penalty_cells(eval).as_slice().iter().sum();
        let placement_excess = (self.new_placements(eval) - inst.placement_limit as f64).max(0.0);
        let utility = eval.movement + inst.beta_spread * spread + inst.beta_limit * limit_penalty;
        ObjectiveBreakdown {
            movement: eval.movement,
            spread,
            limit_penalty,
            placement_excess,
            utility,
            augmented: utility + inst.gamma_placement * placement_excess,
        }
    }

    pub fn total_utility(&self, x: &Assignment) -> Result<ObjectiveBreakdown> {
        Ok(self.breakdown(&self.evaluate(x)?))
    }

    /// Reverse sweep from `f` down to scope-level nodes.
    pub fn scope_adjoints(&self, eval: &Evaluation) -> ScopeAdjoints {
        let inst = self.inst;
        let mut usage = eval.usage.clone();
        for (a, &l) in usage.as_mut_slice().iter_mut().zip(inst.scope_limits.as_slice()) {
            *a = inst.beta_limit * self.penalty.derivative(*a - l);
        }
        let spread = eval
            .spread_util
            .iter()
            .map(|u| {
                let mut g = vec![0.0; u.len()];
                population_std_grad(u, &mut g);
                g.iter_mut().for_each(|v| *v *= inst.beta_spread);
                g
            })
            .collect();
        let excess = self.new_placements(eval) - inst.placement_limit as f64;
        let placement = eval
            .counts
            .iter()
            .zip(&eval.prior_counts)
            .map(|(c, p)| {
                if excess > 0.0 && c - p > 0.0 {
                    inst.gamma_placement
                } else {
                    0.0
                }
            })
            .collect();
        ScopeAdjoints {
            usage,
            spread,
            placement,
        }
    }

    /// Adjoint of `x_{p,k}` through the scope nodes, for every scope `s`:
    /// the value added to `∂f/∂x_{p,k}` for each scope `s` containing `p`.
    pub fn column_scope_coefficients(&self, adj: &ScopeAdjoints, k: usize, out: &mut [f64]) {
        let inst = self.inst;
        let rk = inst.resource_matrix.row(k);
        for (s, o) in out.iter_mut().enumerate() {
            *o = adj.usage.row(s).iter().zip(rk).map(|(a, r)| a * r).sum();
        }
        for &i in self.index.requirements_of(k) {
            let req = &inst.spread_requirements[i];
            let amount = rk[req.resource_type];
            if amount == 0.0 {
                continue;
            }
            for (local, &s) in req.scope_group.iter().enumerate() {
                out[s] += adj.spread[i][local] * amount;
            }
        }
    }

    /// Full gradient field `∂f/∂X`.
    pub fn gradient(&self, x: &Assignment) -> Result<GradientField> {
        let inst = self.inst;
        for p in 0..x.num_positions() {
            if let Some(k) = x.row(p).iter().position(|v| v.is_nan()) {
                return Err(Error::NonFinite {
                    position: p,
                    rack_type: k,
                });
            }
        }
        let eval = self.evaluate(x)?;
        let adj = self.scope_adjoints(&eval);
        let (np, nk) = (inst.num_positions, inst.num_rack_types);
        let mut values = Matrix::filled(np, nk, 0.0);
        let mut coef = vec![0.0; inst.num_scopes()];
        for k in 0..nk {
            self.column_scope_coefficients(&adj, k, &mut coef);
            let m = inst.movement_weights[k];
            for p in 0..np {
                let mut g = adj.placement[k];
                for &s in self.index.scopes_of(p) {
                    g += coef[s];
                }
                if inst.prior_assignment.get(p, k) - x.get(p, k) > 0.0 {
                    g -= m;
                }
                values[(p, k)] = g;
            }
        }
        Ok(GradientField { values })
    }
}

/// Amount of the requirement's resource contributed by one assignment row.
#[inline]
pub(crate) fn spread_contribution(inst: &ProblemInstance, req: &SpreadRequirement, row: &[f64]) -> f64 {
    req.rack_group
        .iter()
        .map(|&k| row[k] * inst.resource_matrix[(k, req.resource_type)])
        .sum()
}

/// `Σ M_k max(0, x̄ − x)`.
pub fn movement_cost(inst: &ProblemInstance, x: &Assignment) -> Result<f64> {
    Ok(Objective::new(inst).evaluate(x)?.movement)
}

/// Population standard deviation of the requirement's per-scope utilization.
pub fn spread_metric(inst: &ProblemInstance, x: &Assignment, req: &SpreadRequirement) -> Result<f64> {
    inst.check_assignment_dims(x)?;
    Ok(population_std(&spread_utilization(inst, x, req)))
}

/// Per-scope utilization `u_s` for one requirement, in scope-group order.
pub fn spread_utilization(inst: &ProblemInstance, x: &Assignment, req: &SpreadRequirement) -> Vec<f64> {
    req.scope_group
        .iter()
        .map(|&s| {
            (0..inst.num_positions)
                .filter(|&p| inst.scope_membership[(p, s)])
                .map(|p| spread_contribution(inst, req, x.row(p)))
                .sum()
        })
        .collect()
}

/// Total softplus limit penalty and the per-(scope, resource) cells.
pub fn limit_penalty(inst: &ProblemInstance, x: &Assignment) -> Result<(f64, Matrix<f64>)> {
    let obj = Objective::new(inst);
    let cells = obj.penalty_cells(&obj.evaluate(x)?);
    Ok((cells.as_slice().iter().sum(), cells))
}

pub fn total_utility(inst: &ProblemInstance, x: &Assignment) -> Result<ObjectiveBreakdown> {
    Objective::new(inst).total_utility(x)
}

/// Gradient of the augmented objective while solving `free_type` with the
/// columns in `frozen_types` fixed. Frozen columns are still filled in.
pub fn gradient(
    inst: &ProblemInstance,
    x: &Assignment,
    free_type: usize,
    frozen_types: &[usize],
) -> Result<GradientField> {
    if free_type >= inst.num_rack_types {
        return Err(Error::Dimension(format!("rack type {free_type} out of range")));
    }
    if frozen_types.contains(&free_type) {
        return Err(Error::AlreadySolved(free_type));
    }
    Objective::new(inst).gradient(x)
}

/// Largest `|analytic − central FD| / max(1, |analytic|)` over all entries.
///
/// Callers keep the point away from hinge kinks; the check itself does not.
pub fn finite_difference_check(inst: &ProblemInstance, x: &Assignment, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let obj = Objective::new(inst);
    let analytic = obj.gradient(x)?;
    let mut probe = x.to_relaxed();
    let mut worst: f64 = 0.0;
    for p in 0..inst.num_positions {
        for k in 0..inst.num_rack_types {
            let v = x.get(p, k);
            probe.set(p, k, v + step)?;
            let hi = obj.total_utility(&probe)?.augmented;
            probe.set(p, k, v - step)?;
            let lo = obj.total_utility(&probe)?.augmented;
            probe.set(p, k, v)?;
            let fd = (hi - lo) / (2.0 * step);
            let a = analytic.get(p, k);
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::t1;

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(-20.0) - 2.061_153_620_314_381e-9).abs() < 1e-20);
        assert!((softplus(3.0) - 3.048_587_351_573_742).abs() < 1e-12);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn movement_examples() {
        let mut inst = t1();
        let x = Assignment::from_placements(4, 2, &[(0, 1), (3, 0)]).unwrap();
        assert_eq!(movement_cost(&inst, &x).unwrap(), 0.0);
        inst.prior_assignment = Assignment::from_placements(4, 2, &[(0, 0), (1, 0)]).unwrap();
        assert_eq!(movement_cost(&inst, &inst.prior_assignment.clone()).unwrap(), 0.0);
        let moved = Assignment::from_placements(4, 2, &[(1, 0), (2, 0)]).unwrap();
        assert_eq!(movement_cost(&inst, &moved).unwrap(), 1.0);
    }

    #[test]
    fn std_examples() {
        assert_eq!(population_std(&[2.0, 2.0, 2.0]), 0.0);
        assert_eq!(population_std(&[0.0, 4.0]), 2.0);
    }

    #[test]
    fn t1_same_scope_spread_is_one() {
        let inst = t1();
        let x = Assignment::from_placements(4, 2, &[(0, 0), (1, 1)]).unwrap();
        let req = &inst.spread_requirements[0];
        assert_eq!(spread_utilization(&inst, &x, req), vec![2.0, 0.0]);
        assert_eq!(spread_metric(&inst, &x, req).unwrap(), 1.0);
    }

    #[test]
    fn penalty_examples() {
        let mut inst = t1();
        // usage = limit everywhere: one rack per scope, limit 1.
        inst.scope_limits = Matrix::from_rows(vec![vec![1.0], vec![1.0]]).unwrap();
        let x = Assignment::from_placements(4, 2, &[(0, 0), (2, 1)]).unwrap();
        let (total, cells) = limit_penalty(&inst, &x).unwrap();
        assert!((total - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(cells.rows(), 2);

        // single scope, single resource, usage 5, limit 2
        let mut one = t1();
        one.num_positions = 5;
        one.num_rack_types = 1;
        one.resource_matrix = Matrix::from_rows(vec![vec![1.0]]).unwrap();
        one.scope_membership = Matrix::filled(5, 1, true);
        one.scope_limits = Matrix::from_rows(vec![vec![2.0]]).unwrap();
        one.demands = vec![5];
        one.movement_weights = vec![1.0];
        one.spread_requirements.clear();
        one.prior_assignment = Assignment::empty(5, 1);
        let full = Assignment::from_placements(5, 1, &(0..5).map(|p| (p, 0)).collect::<Vec<_>>()).unwrap();
        let (total, _) = limit_penalty(&one, &full).unwrap();
        assert!((total - 3.048_587_351_573_742).abs() < 1e-12);
    }

    #[test]
    fn empty_assignment_breakdown() {
        let mut inst = t1();
        inst.scope_limits = Matrix::from_rows(vec![vec![50.0], vec![70.0]]).unwrap();
        let b = total_utility(&inst, &Assignment::empty(4, 2)).unwrap();
        assert_eq!(b.movement, 0.0);
        assert_eq!(b.spread, 0.0);
        assert!((b.limit_penalty - (softplus(-50.0) + softplus(-70.0))).abs() < 1e-30);
        assert_eq!(b.utility, b.movement + b.spread + b.limit_penalty);
    }

    #[test]
    fn placement_hinge_adds_gamma() {
        let inst = t1();
        let x = Assignment::from_placements(4, 2, &[(0, 0), (1, 0), (2, 1)]).unwrap();
        let b = total_utility(&inst, &x).unwrap();
        assert_eq!(b.placement_excess, 1.0);
        assert_eq!(b.augmented, b.utility + 10.0);
    }

    #[test]
    fn balanced_spread_has_zero_spread_gradient() {
        let mut inst = t1();
        inst.beta_limit = 0.0;
        let x = Assignment::from_placements(4, 2, &[(0, 0), (2, 1)]).unwrap();
        let g = Objective::new(&inst).gradient(&x.to_relaxed()).unwrap();
        for p in 0..4 {
            for k in 0..2 {
                assert_eq!(g.get(p, k), 0.0);
            }
        }
    }

    #[test]
    fn movement_gradient_inside_removal_region() {
        let mut inst = t1();
        inst.beta_spread = 0.0;
        inst.beta_limit = 0.0;
        inst.movement_weights = vec![2.0, 1.0];
        inst.prior_assignment = Assignment::from_placements(4, 2, &[(1, 0)]).unwrap();
        let mut m = Matrix::filled(4, 2, 0.0);
        m[(1, 0)] = 0.5;
        let g = gradient(&inst, &Assignment::relaxed(m), 0, &[]).unwrap();
        assert_eq!(g.get(1, 0), -2.0);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn gradient_rejects_nan_and_frozen_free_type() {
        let inst = t1();
        let mut m = Matrix::filled(4, 2, 0.0);
        m[(2, 1)] = f64::NAN;
        assert!(matches!(
            gradient(&inst, &Assignment::relaxed(m), 0, &[]),
            Err(Error::NonFinite {
                position: 2,
                rack_type: 1
            })
        ));
        assert!(gradient(&inst, &Assignment::empty(4, 2), 1, &[1]).is_err());
    }

    #[test]
    fn hinge_penalty_switch() {
        let inst = t1();
        let x = Assignment::from_placements(4, 2, &[(0, 0), (1, 1)]).unwrap();
        let b = Objective::new(&inst)
            .with_penalty(LimitPenalty::Hinge)
            .total_utility(&x)
            .unwrap();
        // usage [2, 0] against limits [2, 2]: no overage.
        assert_eq!(b.limit_penalty, 0.0);
    }
}
