//! Exhaustive solver for tiny instances.
//!
//! Enumerates every binary assignment with exactly `d_k` racks of each type
//! and at most one rack per position: types in ascending order, each type's
//! positions as ascending combinations of the still-free positions. No
//! bounding, no pruning beyond the size guard.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{check_g1, Assignment, ProblemInstance};
use crate::objective::Objective;

pub const SEARCH_SPACE_LIMIT: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    #[serde(skip)]
    pub optimal_assignment: Assignment,
    pub optimal_value: f64,
    pub search_space_size: u128,
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// `Π_k C(remaining, d_k)`, saturating.
pub fn search_space_size(inst: &ProblemInstance) -> u128 {
    let mut remaining = inst.num_positions as u128;
    let mut size: u128 = 1;
    for &d in &inst.demands {
        let d = d.max(0) as u128;
        size = size.saturating_mul(binomial(remaining, d));
        remaining = remaining.saturating_sub(d);
    }
    size
}

struct Search<'a> {
    obj: Objective<'a>,
    occupants: Vec<Option<usize>>,
    best: Option<(f64, Vec<Option<usize>>)>,
    visited: u128,
}

impl Search<'_> {
    fn place_type(&mut self, k: usize) -> Result<()> {
        let inst = self.obj.instance();
        if k == inst.num_rack_types {
            self.visited += 1;
            let x = Assignment::from_occupants(inst.num_rack_types, &self.occupants);
            let value = self.obj.total_utility(&x)?.augmented;
            if self.best.as_ref().is_none_or(|(b, _)| value < *b) {
                self.best = Some((value, self.occupants.clone()));
            }
            return Ok(());
        }
        let free: Vec<usize> = (0..inst.num_positions)
            .filter(|&p| self.occupants[p].is_none())
            .collect();
        let need = inst.demands[k] as usize;
        let mut combo: Vec<usize> = (0..need).collect();
        loop {
            for &i in &combo {
                self.occupants[free[i]] = Some(k);
            }
            self.place_type(k + 1)?;
            for &i in &combo {
                self.occupants[free[i]] = None;
            }
            if !next_combination(&mut combo, free.len()) {
                return Ok(());
            }
        }
    }
}

/// Advances `combo` to the next ascending combination of `0..n`.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

pub fn brute_force_solve(inst: &ProblemInstance) -> Result<OracleResult> {
    inst.ensure_valid()?;
    let total: i64 = inst.demands.iter().sum();
    if total > inst.num_positions as i64 {
        return Err(Error::Infeasible {
            rack_type: inst.demands.len().saturating_sub(1),
            needed: total as usize,
            available: inst.num_positions,
        });
    }
    let size = search_space_size(inst);
    if size > SEARCH_SPACE_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            size,
            limit: SEARCH_SPACE_LIMIT,
        });
    }
    let mut search = Search {
        obj: Objective::new(inst),
        occupants: vec![None; inst.num_positions],
        best: None,
        visited: 0,
    };
    search.place_type(0)?;
    debug_assert_eq!(search.visited, size);
    let (value, occupants) = search.best.expect("at least one candidate");
    Ok(OracleResult {
        optimal_assignment: Assignment::from_occupants(inst.num_rack_types, &occupants),
        optimal_value: value,
        search_space_size: search.visited,
    })
}

/// `(f(x) − f*) / max(1, |f*|)` for an assignment with exact per-type counts.
pub fn optimality_gap(inst: &ProblemInstance, x: &Assignment) -> Result<f64> {
    let optimum = brute_force_solve(inst)?;
    gap_against(inst, x, optimum.optimal_value)
}

/// Gap against a known optimum value.
pub fn gap_against(inst: &ProblemInstance, x: &Assignment, optimal_value: f64) -> Result<f64> {
    if !check_g1(x)?.is_empty() {
        return Err(Error::InvalidInstance(
            "assignment violates one-rack-per-position".into(),
        ));
    }
    let counts = x.counts();
    if counts.iter().zip(&inst.demands).any(|(&c, &d)| c as i64 != d) {
        return Err(Error::InvalidInstance(
            "gap is defined only for assignments with exact per-type counts".into(),
        ));
    }
    let value = Objective::new(inst).total_utility(x)?.augmented;
    let gap = (value - optimal_value) / optimal_value.abs().max(1.0);
    // Equal-valued assignments may differ in the last bits of the sum.
    Ok(if gap < 0.0 && gap > -1e-12 { 0.0 } else { gap })
}
