//! Problem data model and the three placement constraints.
//!
//! A [`ProblemInstance`] is immutable once built. Positions hold at most one
//! rack (g1), every rack type must reach its demanded count (g2), and the
//! number of newly placed racks is capped by the placement limit (g3).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Row-sum slack tolerated for relaxed assignments.
pub const RELAXED_ROW_TOLERANCE: f64 = 1e-9;

/// A fault-tolerance requirement: resource `resource_type` contributed by the
/// rack types in `rack_group` should be evenly spread over the scopes in
/// `scope_group`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpreadRequirement {
    pub resource_type: usize,
    pub rack_group: Vec<usize>,
    pub scope_group: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    Binary,
    Relaxed,
}

/// Position-to-rack-type mapping, stored densely as `|P| x |K|` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    entries: Matrix<f64>,
    mode: AssignmentMode,
}

impl Assignment {
    pub fn empty(num_positions: usize, num_rack_types: usize) -> Self {
        Self {
            entries: Matrix::filled(num_positions, num_rack_types, 0.0),
            mode: AssignmentMode::Binary,
        }
    }

    /// Binary assignment from `(position, rack_type)` pairs.
    pub fn from_placements(num_positions: usize, num_rack_types: usize, placements: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(num_positions, num_rack_types);
        for &(p, k) in placements {
            if p >= num_positions || k >= num_rack_types {
                return Err(Error::Dimension(format!(
                    "placement ({p}, {k}) outside {num_positions}x{num_rack_types}"
                )));
            }
            a.entries[(p, k)] = 1.0;
        }
        Ok(a)
    }

    /// Binary assignment from a per-position occupant list.
    pub fn from_occupants(num_rack_types: usize, occupants: &[Option<usize>]) -> Self {
        let mut a = Self::empty(occupants.len(), num_rack_types);
        for (p, occ) in occupants.iter().enumerate() {
            if let Some(k) = *occ {
                a.entries[(p, k)] = 1.0;
            }
        }
        a
    }

    pub fn relaxed(entries: Matrix<f64>) -> Self {
        Self {
            entries,
            mode: AssignmentMode::Relaxed,
        }
    }

    pub fn to_relaxed(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            mode: AssignmentMode::Relaxed,
        }
    }

    pub fn num_positions(&self) -> usize {
        self.entries.rows()
    }

    pub fn num_rack_types(&self) -> usize {
        self.entries.cols()
    }

    pub fn mode(&self) -> AssignmentMode {
        self.mode
    }

    pub fn entries(&self) -> &Matrix<f64> {
        &self.entries
    }

    #[inline]
    pub fn get(&self, p: usize, k: usize) -> f64 {
        self.entries[(p, k)]
    }

    /// Sets an entry. In binary mode only 0 and 1 are accepted.
    pub fn set(&mut self, p: usize, k: usize, value: f64) -> Result<()> {
        if self.mode == AssignmentMode::Binary && value != 0.0 && value != 1.0 {
            return Err(Error::Mode { expected: "relaxed" });
        }
        self.entries[(p, k)] = value;
        Ok(())
    }

    pub fn row(&self, p: usize) -> &[f64] {
        self.entries.row(p)
    }

    pub fn row_sum(&self, p: usize) -> f64 {
        self.entries.row(p).iter().sum()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.num_rack_types()];
        for p in 0..self.num_positions() {
            for (s, &v) in sums.iter_mut().zip(self.entries.row(p)) {
                *s += v;
            }
        }
        sums
    }

    /// Per-type rack counts of a binary assignment.
    pub fn counts(&self) -> Vec<u64> {
        self.column_sums().into_iter().map(|c| c.round() as u64).collect()
    }

    /// Sparse `(position, rack_type)` list of non-zero entries in row-major order.
    pub fn placements(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for p in 0..self.num_positions() {
            for (k, &v) in self.entries.row(p).iter().enumerate() {
                if v != 0.0 {
                    out.push((p, k));
                }
            }
        }
        out
    }

    /// Occupant of each position; `None` for vacant rows. Binary mode only,
    /// and the first non-zero column wins when a row violates g1.
    pub fn occupants(&self) -> Vec<Option<usize>> {
        (0..self.num_positions())
            .map(|p| self.entries.row(p).iter().position(|&v| v != 0.0))
            .collect()
    }

    pub fn require_binary(&self) -> Result<()> {
        match self.mode {
            AssignmentMode::Binary => Ok(()),
            AssignmentMode::Relaxed => Err(Error::Mode { expected: "binary" }),
        }
    }

    /// Checks the mode invariants: binary entries are 0/1 and row sums stay
    /// within 1 (plus tolerance for relaxed mode).
    pub fn check_invariants(&self) -> Result<()> {
        let limit = match self.mode {
            AssignmentMode::Binary => 1.0,
            AssignmentMode::Relaxed => 1.0 + RELAXED_ROW_TOLERANCE,
        };
        for p in 0..self.num_positions() {
            for (k, &v) in self.entries.row(p).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        position: p,
                        rack_type: k,
                    });
                }
                let ok = match self.mode {
                    AssignmentMode::Binary => v == 0.0 || v == 1.0,
                    AssignmentMode::Relaxed => (0.0..=1.0).contains(&v),
                };
                if !ok {
                    return Err(Error::InvalidInstance(format!(
                        "assignment entry ({p}, {k}) = {v} out of range"
                    )));
                }
            }
            if self.row_sum(p) > limit {
                return Err(Error::InvalidInstance(format!("assignment row {p} sums above 1")));
            }
        }
        Ok(())
    }
}

/// Immutable description of one placement problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub num_positions: usize,
    pub num_rack_types: usize,
    pub num_resources: usize,
    /// `|K| x |R|` resource amount per rack.
    pub resource_matrix: Matrix<f64>,
    /// `|P| x |S|`, true when position p belongs to scope s.
    pub scope_membership: Matrix<bool>,
    /// `|S| x |R|` per-scope resource limits.
    pub scope_limits: Matrix<f64>,
    pub demands: Vec<i64>,
    pub placement_limit: i64,
    pub movement_weights: Vec<f64>,
    pub spread_requirements: Vec<SpreadRequirement>,
    pub prior_assignment: Assignment,
    pub beta_spread: f64,
    pub beta_limit: f64,
    pub gamma_placement: f64,
    /// Generator seed, when the instance was sampled.
    pub seed: Option<u64>,
}

/// One failed instance invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Field and index, e.g. `demands[0]`.
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ProblemInstance {
    pub fn num_scopes(&self) -> usize {
        self.scope_membership.cols()
    }

    pub fn prior_counts(&self) -> Vec<u64> {
        self.prior_assignment.counts()
    }

    /// Returns every invariant violation; an empty list means the instance is
    /// well formed.
    pub fn validate(&self) -> Vec<Violation> {
        validate_instance(self)
    }

    /// Like [`validate`](Self::validate), but as a `Result`.
    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
            Err(Error::InvalidInstance(msg.join("; ")))
        }
    }

    pub(crate) fn check_assignment_dims(&self, a: &Assignment) -> Result<()> {
        if a.num_positions() != self.num_positions || a.num_rack_types() != self.num_rack_types {
            return Err(Error::Dimension(format!(
                "assignment is {}x{}, instance expects {}x{}",
                a.num_positions(),
                a.num_rack_types(),
                self.num_positions,
                self.num_rack_types
            )));
        }
        Ok(())
    }
}

pub fn validate_instance(inst: &ProblemInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let (np, nk, nr) = (inst.num_positions, inst.num_rack_types, inst.num_resources);
    let ns = inst.num_scopes();

    let mut dims = |field: &str, got: (usize, usize), want: (usize, usize)| {
        if got != want {
            out.push(Violation::new(
                field,
                format!("shape {}x{}, expected {}x{}", got.0, got.1, want.0, want.1),
            ));
            false
        } else {
            true
        }
    };
    let r_ok = dims(
        "resource_matrix",
        (inst.resource_matrix.rows(), inst.resource_matrix.cols()),
        (nk, nr),
    );
    let s_ok = dims(
        "scope_membership",
        (inst.scope_membership.rows(), inst.scope_membership.cols()),
        (np, ns),
    );
    let l_ok = dims(
        "scope_limits",
        (inst.scope_limits.rows(), inst.scope_limits.cols()),
        (ns, nr),
    );
    let x_ok = dims(
        "prior_assignment",
        (
            inst.prior_assignment.num_positions(),
            inst.prior_assignment.num_rack_types(),
        ),
        (np, nk),
    );
    if inst.demands.len() != nk {
        out.push(Violation::new(
            "demands",
            format!("length {}, expected {nk}", inst.demands.len()),
        ));
    }
    if inst.movement_weights.len() != nk {
        out.push(Violation::new(
            "movement_weights",
            format!("length {}, expected {nk}", inst.movement_weights.len()),
        ));
    }

    let bad = |v: f64| !v.is_finite() || v < 0.0;
    if r_ok {
        for k in 0..nk {
            for r in 0..nr {
                if bad(inst.resource_matrix[(k, r)]) {
                    out.push(Violation::new(
                        format!("resource_matrix[{k}][{r}]"),
                        "must be finite and non-negative",
                    ));
                }
            }
        }
    }
    if l_ok {
        for s in 0..ns {
            for r in 0..nr {
                if bad(inst.scope_limits[(s, r)]) {
                    out.push(Violation::new(
                        format!("scope_limits[{s}][{r}]"),
                        "must be finite and non-negative",
                    ));
                }
            }
        }
    }
    for (k, &d) in inst.demands.iter().enumerate() {
        if d < 0 {
            out.push(Violation::new(format!("demands[{k}]"), format!("negative demand {d}")));
        }
    }
    for (k, &m) in inst.movement_weights.iter().enumerate() {
        if bad(m) {
            out.push(Violation::new(
                format!("movement_weights[{k}]"),
                "must be finite and non-negative",
            ));
        }
    }
    if inst.placement_limit < 0 {
        out.push(Violation::new("placement_limit", "must be non-negative"));
    }
    for (name, v) in [
        ("beta_spread", inst.beta_spread),
        ("beta_limit", inst.beta_limit),
        ("gamma_placement", inst.gamma_placement),
    ] {
        if bad(v) {
            out.push(Violation::new(name, "must be finite and non-negative"));
        }
    }

    if x_ok {
        let prior = &inst.prior_assignment;
        for p in 0..np {
            let row = prior.row(p);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                out.push(Violation::new(
                    format!("prior_assignment[{p}]"),
                    "entries must lie in [0, 1]",
                ));
            }
            let sum: f64 = row.iter().sum();
            if sum > 1.0 {
                out.push(Violation::new(
                    format!("prior_assignment[{p}]"),
                    format!("row sums to {sum}, at most one rack per position"),
                ));
            }
        }
    }

    for (i, req) in inst.spread_requirements.iter().enumerate() {
        let field = |what: &str| format!("spread_requirements[{i}].{what}");
        if req.resource_type >= nr {
            out.push(Violation::new(
                field("resource_type"),
                format!("index {} out of range", req.resource_type),
            ));
        }
        if req.rack_group.is_empty() {
            out.push(Violation::new(field("rack_group"), "must be non-empty"));
        }
        if let Some(&k) = req.rack_group.iter().find(|&&k| k >= nk) {
            out.push(Violation::new(
                field("rack_group"),
                format!("rack type {k} out of range"),
            ));
        }
        if req.scope_group.len() < 2 {
            out.push(Violation::new(field("scope_group"), "needs at least two scopes"));
        }
        let distinct: BTreeSet<usize> = req.scope_group.iter().copied().collect();
        if distinct.len() != req.scope_group.len() {
            out.push(Violation::new(field("scope_group"), "scopes must be distinct"));
        }
        if let Some(&s) = req.scope_group.iter().find(|&&s| s >= ns) {
            out.push(Violation::new(
                field("scope_group"),
                format!("scope {s} is not a column of scope_membership"),
            ));
        } else if s_ok {
            'pos: for p in 0..np {
                let mut seen = None;
                for &s in &req.scope_group {
                    if inst.scope_membership[(p, s)] {
                        if let Some(first) = seen {
                            out.push(Violation::new(
                                field("scope_group"),
                                format!("scopes {first} and {s} share position {p}"),
                            ));
                            break 'pos;
                        }
                        seen = Some(s);
                    }
                }
            }
        }
    }
    out
}

/// Per-constraint summary of an assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub g1_violations: Vec<usize>,
    pub g2_shortfalls: Vec<u64>,
    pub g3_excess: u64,
}

impl ConstraintReport {
    pub fn is_feasible(&self) -> bool {
        self.g1_violations.is_empty() && self.g2_shortfalls.iter().all(|&s| s == 0) && self.g3_excess == 0
    }
}

/// Positions holding more than one rack.
pub fn check_g1(assignment: &Assignment) -> Result<Vec<usize>> {
    assignment.require_binary()?;
    Ok((0..assignment.num_positions())
        .filter(|&p| assignment.row_sum(p) > 1.0)
        .collect())
}

/// Per-type demand shortfall `max(0, d_k - count_k)`.
pub fn check_g2(inst: &ProblemInstance, assignment: &Assignment) -> Result<Vec<u64>> {
    assignment.require_binary()?;
    inst.check_assignment_dims(assignment)?;
    Ok(assignment
        .counts()
        .iter()
        .zip(&inst.demands)
        .map(|(&c, &d)| (d - c as i64).max(0) as u64)
        .collect())
}

/// Number of new placements minus the placement limit; positive means violated.
pub fn check_g3(inst: &ProblemInstance, assignment: &Assignment) -> Result<i64> {
    assignment.require_binary()?;
    inst.check_assignment_dims(assignment)?;
    let new: i64 = assignment
        .counts()
        .iter()
        .zip(inst.prior_counts())
        .map(|(&c, prior)| (c as i64 - prior as i64).max(0))
        .sum();
    Ok(new - inst.placement_limit)
}

pub fn constraint_report(inst: &ProblemInstance, assignment: &Assignment) -> Result<ConstraintReport> {
    Ok(ConstraintReport {
        g1_violations: check_g1(assignment)?,
        g2_shortfalls: check_g2(inst, assignment)?,
        g3_excess: check_g3(inst, assignment)?.max(0) as u64,
    })
}
