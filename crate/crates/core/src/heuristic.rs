//! Gradient-guided placement, one rack type at a time.
//!
//! For the rack type being solved, single flips are applied until its count
//! equals the demand: additions go to the vacant position with the most
//! negative partial derivative, removals take the position of that type with
//! the most positive one. The gradient is re-evaluated after every flip.
//! Then a fixed number of remove-worst/add-best swap rounds polish the
//! placement. Columns of already solved types are never touched again.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Assignment, ProblemInstance};
use crate::objective::{Evaluation, LimitPenalty, Objective, ObjectiveBreakdown};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "seed")]
pub enum TieBreak {
    LowestIndex,
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapAcceptance {
    /// Revert a swap that strictly increases the augmented objective.
    NonIncreasing,
    /// Keep every swap.
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    pub adjustment_rounds: usize,
    pub tie_break: TieBreak,
    pub swap_acceptance: SwapAcceptance,
    pub penalty: LimitPenalty,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            adjustment_rounds: 2,
            tie_break: TieBreak::LowestIndex,
            swap_acceptance: SwapAcceptance::NonIncreasing,
            penalty: LimitPenalty::Softplus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipKind {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub position: usize,
    pub rack_type: usize,
    pub kind: FlipKind,
    /// Occupant of the position right before the flip.
    pub previous: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubproblemReport {
    pub rack_type: usize,
    /// Demand-driven flips, in order.
    pub flips: Vec<Flip>,
    /// Flips performed by swap rounds, including reverted ones.
    pub swap_flips: Vec<Flip>,
    pub swaps_accepted: usize,
    pub swaps_reverted: usize,
    /// Augmented objective after each accepted (or kept) swap round.
    pub swap_objectives: Vec<f64>,
}

/// Working state shared by the subproblems of one ordered solve.
#[derive(Debug, Clone)]
pub struct SubproblemState {
    occupants: Vec<Option<usize>>,
    eval: Evaluation,
    solved_types: Vec<usize>,
    tie_rng: Option<ChaCha8Rng>,
}

impl SubproblemState {
    pub fn occupants(&self) -> &[Option<usize>] {
        &self.occupants
    }

    pub fn solved_types(&self) -> &[usize] {
        &self.solved_types
    }

    pub fn evaluation(&self) -> &Evaluation {
        &self.eval
    }

    pub fn count(&self, k: usize) -> usize {
        self.eval.counts[k].round() as usize
    }

    pub fn assignment(&self, num_rack_types: usize) -> Assignment {
        Assignment::from_occupants(num_rack_types, &self.occupants)
    }
}

/// Result of one ordered solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub order: Vec<usize>,
    pub assignment: Assignment,
    pub breakdown: ObjectiveBreakdown,
}

/// Heuristic solver bound to one instance.
#[derive(Debug, Clone)]
pub struct Heuristic<'a> {
    obj: Objective<'a>,
    prior_occupants: Vec<Option<usize>>,
    config: HeuristicConfig,
}

impl<'a> Heuristic<'a> {
    pub fn new(inst: &'a ProblemInstance, config: HeuristicConfig) -> Result<Self> {
        inst.ensure_valid()?;
        Ok(Self {
            obj: Objective::new(inst).with_penalty(config.penalty),
            prior_occupants: inst.prior_assignment.occupants(),
            config,
        })
    }

    pub fn instance(&self) -> &'a ProblemInstance {
        self.obj.instance()
    }

    pub fn objective(&self) -> &Objective<'a> {
        &self.obj
    }

    pub fn config(&self) -> &HeuristicConfig {
        &self.config
    }

    /// Fresh state starting from the prior mapping.
    pub fn start(&self) -> SubproblemState {
        let inst = self.instance();
        let eval = self
            .obj
            .evaluate(&inst.prior_assignment)
            .expect("validated instance has consistent dimensions");
        let tie_rng = match self.config.tie_break {
            TieBreak::LowestIndex => None,
            TieBreak::Seeded(seed) => Some(rng::stream_rng(rng::derive_seed(seed, rng::tags::TIE_BREAK), 0)),
        };
        SubproblemState {
            occupants: self.prior_occupants.clone(),
            eval,
            solved_types: Vec::new(),
            tie_rng,
        }
    }

    fn augmented(&self, state: &SubproblemState) -> f64 {
        self.obj.breakdown(&state.eval).augmented
    }

    /// Applies one flip and updates the objective graph incrementally.
    fn apply(&self, state: &mut SubproblemState, p: usize, k: usize, kind: FlipKind) -> Flip {
        let inst = self.instance();
        let previous = state.occupants[p];
        let sign = match kind {
            FlipKind::Add => {
                debug_assert!(previous.is_none());
                state.occupants[p] = Some(k);
                1.0
            }
            FlipKind::Remove => {
                debug_assert_eq!(previous, Some(k));
                state.occupants[p] = None;
                -1.0
            }
        };
        let eval = &mut state.eval;
        eval.counts[k] += sign;
        if self.prior_occupants[p] == Some(k) {
            eval.movement -= sign * inst.movement_weights[k];
        }
        let rk = inst.resource_matrix.row(k);
        let index = self.obj.index();
        for &s in index.scopes_of(p) {
            for (u, &r) in eval.usage.row_mut(s).iter_mut().zip(rk) {
                *u += sign * r;
            }
        }
        for &i in index.requirements_of(k) {
            let amount = rk[inst.spread_requirements[i].resource_type];
            if amount == 0.0 {
                continue;
            }
            for &s in index.scopes_of(p) {
                if let Some(local) = index.local_scope(i, s) {
                    eval.spread_util[i][local] += sign * amount;
                }
            }
        }
        Flip {
            position: p,
            rack_type: k,
            kind,
            previous,
        }
    }

    /// Picks the candidate with the best partial derivative for column `k`.
    /// Additions consider vacant positions and minimize; removals consider
    /// positions holding `k` and maximize.
    fn select(&self, state: &mut SubproblemState, k: usize, kind: FlipKind, coef: &mut [f64]) -> Option<usize> {
        let inst = self.instance();
        let adj = self.obj.scope_adjoints(&state.eval);
        self.obj.column_scope_coefficients(&adj, k, coef);
        let base = adj.placement[k];
        let m = inst.movement_weights[k];
        let index = self.obj.index();

        let mut best = f64::INFINITY;
        let mut ties: Vec<usize> = Vec::new();
        for (p, occ) in state.occupants.iter().enumerate() {
            let eligible = match kind {
                FlipKind::Add => occ.is_none(),
                FlipKind::Remove => *occ == Some(k),
            };
            if !eligible {
                continue;
            }
            let mut g = base;
            for &s in index.scopes_of(p) {
                g += coef[s];
            }
            if self.prior_occupants[p] == Some(k) && *occ != Some(k) {
                g -= m;
            }
            // Minimize g for additions, −g for removals.
            let score = match kind {
                FlipKind::Add => g,
                FlipKind::Remove => -g,
            };
            if score < best {
                best = score;
                ties.clear();
                ties.push(p);
            } else if score == best && state.tie_rng.is_some() {
                ties.push(p);
            }
        }
        match (ties.len(), state.tie_rng.as_mut()) {
            (0, _) => None,
            (1, _) | (_, None) => Some(ties[0]),
            (n, Some(rng)) => Some(ties[rng.random_range(0..n)]),
        }
    }

    /// Solves rack type `k` on the working state.
    pub fn solve_subproblem(&self, state: &mut SubproblemState, k: usize) -> Result<SubproblemReport> {
        let inst = self.instance();
        if k >= inst.num_rack_types {
            return Err(Error::Dimension(format!("rack type {k} out of range")));
        }
        if state.solved_types.contains(&k) {
            return Err(Error::AlreadySolved(k));
        }
        let demand = inst.demands[k] as usize;
        let current = state.count(k);
        let vacant = state.occupants.iter().filter(|o| o.is_none()).count();
        if demand > current + vacant {
            return Err(Error::Infeasible {
                rack_type: k,
                needed: demand - current,
                available: vacant,
            });
        }

        let mut report = SubproblemReport {
            rack_type: k,
            ..Default::default()
        };
        let mut coef = vec![0.0; inst.num_scopes()];
        let kind = if demand > current {
            FlipKind::Add
        } else {
            FlipKind::Remove
        };
        for _ in 0..demand.abs_diff(current) {
            let p = self
                .select(state, k, kind, &mut coef)
                .expect("feasibility checked above");
            report.flips.push(self.apply(state, p, k, kind));
        }

        for _ in 0..self.config.adjustment_rounds {
            if state.count(k) == 0 {
                break;
            }
            let before = self.augmented(state);
            let out = self
                .select(state, k, FlipKind::Remove, &mut coef)
                .expect("type k has at least one position");
            let removed = self.apply(state, out, k, FlipKind::Remove);
            let into = self
                .select(state, k, FlipKind::Add, &mut coef)
                .expect("the freed position is vacant");
            let added = self.apply(state, into, k, FlipKind::Add);
            report.swap_flips.extend([removed, added]);
            let after = self.augmented(state);
            if self.config.swap_acceptance == SwapAcceptance::NonIncreasing && after > before {
                self.apply(state, into, k, FlipKind::Remove);
                self.apply(state, out, k, FlipKind::Add);
                report.swaps_reverted += 1;
            } else {
                report.swaps_accepted += 1;
                report.swap_objectives.push(after);
            }
        }
        state.solved_types.push(k);
        Ok(report)
    }

    /// Solves every rack type in `order`, starting from the prior mapping.
    pub fn solve_ordered(&self, order: &[usize]) -> Result<Solution> {
        Ok(self.solve_ordered_traced(order)?.0)
    }

    /// Like [`solve_ordered`](Self::solve_ordered), also returning the
    /// per-type reports.
    pub fn solve_ordered_traced(&self, order: &[usize]) -> Result<(Solution, Vec<SubproblemReport>)> {
        let inst = self.instance();
        check_permutation(order, inst.num_rack_types)?;
        let mut state = self.start();
        let mut reports = Vec::with_capacity(order.len());
        for &k in order {
            reports.push(self.solve_subproblem(&mut state, k)?);
        }
        let assignment = state.assignment(inst.num_rack_types);
        let breakdown = self.obj.total_utility(&assignment)?;
        Ok((
            Solution {
                order: order.to_vec(),
                assignment,
                breakdown,
            },
            reports,
        ))
    }
}

pub fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::InvalidOrder(format!(
            "expected {n} rack types, got {}",
            order.len()
        )));
    }
    for &k in order {
        if k >= n || std::mem::replace(&mut seen[k], true) {
            return Err(Error::InvalidOrder(format!("{order:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Identity order `0, 1, …, |K|−1`.
pub fn identity_order(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn solve_ordered(inst: &ProblemInstance, order: &[usize], config: HeuristicConfig) -> Result<Solution> {
    Heuristic::new(inst, config)?.solve_ordered(order)
}
