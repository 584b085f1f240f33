//! Small hand-built instances used by tests, examples and the CLI.

use crate::matrix::Matrix;
use crate::model::{Assignment, ProblemInstance, SpreadRequirement};

/// The canonical tiny instance: 4 positions in two scopes of two, 2 rack
/// types with one unit of a single resource each, one rack of each type
/// demanded, nothing placed yet.
pub fn t1() -> ProblemInstance {
    let mut scopes = Matrix::filled(4, 2, false);
    for p in 0..4 {
        scopes[(p, p / 2)] = true;
    }
    ProblemInstance {
        num_positions: 4,
        num_rack_types: 2,
        num_resources: 1,
        resource_matrix: Matrix::from_rows(vec![vec![1.0], vec![1.0]]).unwrap(),
        scope_membership: scopes,
        scope_limits: Matrix::from_rows(vec![vec![2.0], vec![2.0]]).unwrap(),
        demands: vec![1, 1],
        placement_limit: 2,
        movement_weights: vec![1.0, 1.0],
        spread_requirements: vec![SpreadRequirement {
            resource_type: 0,
            rack_group: vec![0, 1],
            scope_group: vec![0, 1],
        }],
        prior_assignment: Assignment::empty(4, 2),
        beta_spread: 1.0,
        beta_limit: 1.0,
        gamma_placement: 10.0,
        seed: None,
    }
}

/// JSON document of [`t1`] as shipped in `fixtures/t1.json`.
pub const T1_JSON: &str = include_str!("../fixtures/t1.json");
