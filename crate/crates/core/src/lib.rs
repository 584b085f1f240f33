//! Rack placement optimization for heterogeneous data centers.
//!
//! The solver places racks one rack type at a time with a gradient-guided
//! local search ([`heuristic`]); the order in which types are solved is picked
//! by a learned attention policy ([`ordering`]). [`instgen`] produces
//! synthetic three-level data-center instances, [`oracle`] solves tiny ones
//! exactly, and [`bench`] runs experiments and writes reports.

pub mod bench;
pub mod error;
pub mod fixtures;
pub mod heuristic;
pub mod instgen;
pub mod io;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod ordering;
pub mod rng;

pub use error::{Error, Result};
pub use heuristic::{Heuristic, HeuristicConfig, Solution};
pub use matrix::Matrix;
pub use model::{Assignment, AssignmentMode, ProblemInstance, SpreadRequirement};
pub use objective::{Objective, ObjectiveBreakdown};
