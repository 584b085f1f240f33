//! Versioned JSON documents for instances, assignments and objective
//! breakdowns.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Assignment, ProblemInstance, SpreadRequirement};
use crate::objective::ObjectiveBreakdown;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentDoc {
    pub schema_version: u64,
    pub num_positions: usize,
    pub num_rack_types: usize,
    /// `(position, rack_type)` pairs of occupied entries.
    pub placements: Vec<(usize, usize)>,
}

impl AssignmentDoc {
    pub fn from_assignment(a: &Assignment) -> Result<Self> {
        a.require_binary()?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            num_positions: a.num_positions(),
            num_rack_types: a.num_rack_types(),
            placements: a.placements(),
        })
    }

    pub fn into_assignment(self) -> Result<Assignment> {
        check_version(self.schema_version)?;
        Assignment::from_placements(self.num_positions, self.num_rack_types, &self.placements)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub schema_version: u64,
    pub num_positions: usize,
    pub num_rack_types: usize,
    pub num_resources: usize,
    pub resource_matrix: Matrix<f64>,
    pub scope_membership: Matrix<bool>,
    pub scope_limits: Matrix<f64>,
    pub demands: Vec<i64>,
    pub placement_limit: i64,
    pub movement_weights: Vec<f64>,
    pub spread_requirements: Vec<SpreadRequirement>,
    pub prior_assignment: AssignmentDoc,
    pub beta_spread: f64,
    pub beta_limit: f64,
    pub gamma_placement: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl InstanceDoc {
    pub fn from_instance(inst: &ProblemInstance) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            num_positions: inst.num_positions,
            num_rack_types: inst.num_rack_types,
            num_resources: inst.num_resources,
            resource_matrix: inst.resource_matrix.clone(),
            scope_membership: inst.scope_membership.clone(),
            scope_limits: inst.scope_limits.clone(),
            demands: inst.demands.clone(),
            placement_limit: inst.placement_limit,
            movement_weights: inst.movement_weights.clone(),
            spread_requirements: inst.spread_requirements.clone(),
            prior_assignment: AssignmentDoc::from_assignment(&inst.prior_assignment)?,
            beta_spread: inst.beta_spread,
            beta_limit: inst.beta_limit,
            gamma_placement: inst.gamma_placement,
            seed: inst.seed,
        })
    }

    pub fn into_instance(self) -> Result<ProblemInstance> {
        check_version(self.schema_version)?;
        let (np, nk, nr) = (self.num_positions, self.num_rack_types, self.num_resources);
        let shape = |name: &str, rows: usize, cols: usize, want: (usize, usize)| {
            // An empty matrix carries no column count.
            if rows == want.0 && (cols == want.1 || rows == 0) {
                Ok(())
            } else {
                Err(Error::Dimension(format!(
                    "{name} is {rows}x{cols}, expected {}x{}",
                    want.0, want.1
                )))
            }
        };
        shape(
            "resource_matrix",
            self.resource_matrix.rows(),
            self.resource_matrix.cols(),
            (nk, nr),
        )?;
        let ns = self.scope_membership.cols();
        shape("scope_membership", self.scope_membership.rows(), ns, (np, ns))?;
        shape(
            "scope_limits",
            self.scope_limits.rows(),
            self.scope_limits.cols(),
            (ns, nr),
        )?;
        if self.demands.len() != nk || self.movement_weights.len() != nk {
            return Err(Error::Dimension(format!(
                "demands and movement_weights need {nk} entries"
            )));
        }
        if (
            self.prior_assignment.num_positions,
            self.prior_assignment.num_rack_types,
        ) != (np, nk)
        {
            return Err(Error::Dimension("prior_assignment shape differs from instance".into()));
        }
        let resource_matrix = fix_empty(self.resource_matrix, nk, nr);
        let scope_limits = fix_empty(self.scope_limits, ns, nr);
        Ok(ProblemInstance {
            num_positions: np,
            num_rack_types: nk,
            num_resources: nr,
            resource_matrix,
            scope_membership: self.scope_membership,
            scope_limits,
            demands: self.demands,
            placement_limit: self.placement_limit,
            movement_weights: self.movement_weights,
            spread_requirements: self.spread_requirements,
            prior_assignment: self.prior_assignment.into_assignment()?,
            beta_spread: self.beta_spread,
            beta_limit: self.beta_limit,
            gamma_placement: self.gamma_placement,
            seed: self.seed,
        })
    }
}

fn fix_empty(m: Matrix<f64>, rows: usize, cols: usize) -> Matrix<f64> {
    if m.rows() == 0 {
        Matrix::filled(rows, cols, 0.0)
    } else {
        m
    }
}

fn check_version(found: u64) -> Result<()> {
    if found == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        })
    }
}

/// Reads `schema_version` first so that a version mismatch is reported as
/// such rather than as a field error.
fn parse_versioned<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) => check_version(v)?,
        None => {
            return Err(Error::Parse(serde_json::Error::io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "missing schema_version",
            ))))
        }
    }
    Ok(serde_json::from_value(value)?)
}

pub fn instance_to_json(inst: &ProblemInstance) -> Result<String> {
    Ok(serde_json::to_string(&InstanceDoc::from_instance(inst)?)?)
}

pub fn instance_from_json(text: &str) -> Result<ProblemInstance> {
    parse_versioned::<InstanceDoc>(text)?.into_instance()
}

pub fn assignment_to_json(a: &Assignment) -> Result<String> {
    Ok(serde_json::to_string(&AssignmentDoc::from_assignment(a)?)?)
}

pub fn assignment_from_json(text: &str) -> Result<Assignment> {
    parse_versioned::<AssignmentDoc>(text)?.into_assignment()
}

pub fn save_instance(path: impl AsRef<Path>, inst: &ProblemInstance) -> Result<()> {
    fs::write(path, instance_to_json(inst)?)?;
    Ok(())
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<ProblemInstance> {
    let path = path.as_ref();
    instance_from_json(&fs::read_to_string(path)?).map_err(|e| e.context(path.display().to_string()))
}

pub fn save_assignment(path: impl AsRef<Path>, a: &Assignment) -> Result<()> {
    fs::write(path, assignment_to_json(a)?)?;
    Ok(())
}

pub fn load_assignment(path: impl AsRef<Path>) -> Result<Assignment> {
    let path = path.as_ref();
    assignment_from_json(&fs::read_to_string(path)?).map_err(|e| e.context(path.display().to_string()))
}

pub fn breakdown_to_json(b: &ObjectiveBreakdown) -> Result<String> {
    Ok(serde_json::to_string_pretty(b)?)
}

/// Per-cell penalty matrix as CSV: one row per scope, one column per resource.
pub fn penalty_cells_csv(cells: &Matrix<f64>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("scope".to_string())
        .chain((0..cells.cols()).map(|r| format!("resource_{r}")))
        .collect();
    w.write_record(&header)?;
    for s in 0..cells.rows() {
        let row: Vec<String> = std::iter::once(s.to_string())
            .chain(cells.row(s).iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
