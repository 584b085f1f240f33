use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use rackopt::heuristic::{Heuristic, SwapAcceptance};
use rackopt::instgen::{generate_instance, GeneratorConfig, Range, SpreadTemplate};
use rackopt::model::constraint_report;
use rackopt::objective::{finite_difference_check, population_std, Objective};
use rackopt::rng::stream_rng;
use rackopt::{oracle, Assignment, Error, HeuristicConfig, Matrix, ProblemInstance};

fn small_instance(num_types: usize, seed: u64) -> ProblemInstance {
    let config = GeneratorConfig {
        num_positions: 100,
        demand_range: Range::new(2, 10),
        placement_limit_range: Range::new(10, 40),
        ..GeneratorConfig::default().with_rack_types(num_types)
    };
    generate_instance(&config, seed).unwrap()
}

fn tiny_instance(num_positions: usize, seed: u64) -> ProblemInstance {
    let config = GeneratorConfig {
        num_positions,
        scope_counts: vec![2],
        limit_ranges: vec![Range::new(1.0, 3.0)],
        demand_range: Range::new(0, 2),
        placement_limit_range: Range::new(1, 3),
        prior_probabilities: vec![0.25, 0.25, 0.5],
        spread_templates: vec![SpreadTemplate {
            resource_type: 5,
            rack_group: vec![0, 1],
            level: 0,
        }],
        ..GeneratorConfig::default().with_rack_types(2)
    };
    generate_instance(&config, seed).unwrap()
}

fn random_layout(inst: &ProblemInstance, seed: u64) -> Vec<Option<usize>> {
    let mut rng = stream_rng(seed, 0);
    (0..inst.num_positions)
        .map(|_| {
            let k = rng.random_range(0..=inst.num_rack_types);
            (k < inst.num_rack_types).then_some(k)
        })
        .collect()
}

fn random_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 1));
    order
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn breakdown_decomposes(types in 1usize..5, seed in any::<u64>()) {
        let inst = small_instance(types, seed);
        let x = Assignment::from_occupants(types, &random_layout(&inst, seed));
        let b = Objective::new(&inst).total_utility(&x).unwrap();
        let utility = b.movement + inst.beta_spread * b.spread + inst.beta_limit * b.limit_penalty;
        prop_assert!(close(b.utility, utility));
        prop_assert!(close(b.augmented, utility + inst.gamma_placement * b.placement_excess));
    }

    #[test]
    fn std_is_shift_invariant_and_scales(values in prop::collection::vec(-1e3f64..1e3, 1..20), shift in -1e3f64..1e3, factor in -10f64..10.0) {
        let s = population_std(&values);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = values.iter().map(|v| v * factor).collect();
        prop_assert!((population_std(&shifted) - s).abs() <= 1e-9 * (1.0 + s + shift.abs()));
        prop_assert!((population_std(&scaled) - factor.abs() * s).abs() <= 1e-9 * (1.0 + s) * (1.0 + factor.abs()));
    }

    #[test]
    fn adding_a_rack_never_lowers_the_limit_penalty(types in 1usize..5, seed in any::<u64>()) {
        let inst = small_instance(types, seed);
        let mut layout = random_layout(&inst, seed);
        let obj = Objective::new(&inst);
        let before = obj.total_utility(&Assignment::from_occupants(types, &layout)).unwrap().limit_penalty;
        if let Some(p) = layout.iter().position(Option::is_none) {
            layout[p] = Some(seed as usize % types);
            let after = obj.total_utility(&Assignment::from_occupants(types, &layout)).unwrap().limit_penalty;
            prop_assert!(after >= before);
        }
    }

    #[test]
    fn swapping_equivalent_positions_keeps_the_objective(types in 1usize..5, seed in any::<u64>()) {
        let inst = small_instance(types, seed);
        let mut layout = random_layout(&inst, seed);
        let prior = inst.prior_assignment.occupants();
        let same_scopes = |p: usize, q: usize| {
            (0..inst.num_scopes()).all(|s| inst.scope_membership[(p, s)] == inst.scope_membership[(q, s)])
        };
        let pair = (0..inst.num_positions)
            .flat_map(|p| (p + 1..inst.num_positions).map(move |q| (p, q)))
            .find(|&(p, q)| prior[p] == prior[q] && same_scopes(p, q) && layout[p] != layout[q]);
        if let Some((p, q)) = pair {
            let obj = Objective::new(&inst);
            let before = obj.total_utility(&Assignment::from_occupants(types, &layout)).unwrap().augmented;
            layout.swap(p, q);
            let after = obj.total_utility(&Assignment::from_occupants(types, &layout)).unwrap().augmented;
            prop_assert!(close(before, after));
        }
    }

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut inst = small_instance(3, seed);
        // Keep the placement hinge away from its kink.
        inst.placement_limit = 1000;
        let mut rng = stream_rng(seed, 2);
        let values = (0..inst.num_positions * 3).map(|_| rng.random_range(0.01..0.3)).collect();
        let x = Assignment::relaxed(Matrix::from_vec(inst.num_positions, 3, values).unwrap());
        prop_assert!(finite_difference_check(&inst, &x, 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn heuristic_invariants(types in 1usize..5, seed in any::<u64>(), unconditional in any::<bool>()) {
        let inst = small_instance(types, seed);
        let config = HeuristicConfig {
            swap_acceptance: if unconditional { SwapAcceptance::Unconditional } else { SwapAcceptance::NonIncreasing },
            ..HeuristicConfig::default()
        };
        let heuristic = Heuristic::new(&inst, config).unwrap();
        let order = random_order(types, seed);
        let (sol, reports) = heuristic.solve_ordered_traced(&order).unwrap();

        let report = constraint_report(&inst, &sol.assignment).unwrap();
        prop_assert!(report.g1_violations.is_empty());
        let counts = sol.assignment.counts();
        prop_assert!(counts.iter().zip(&inst.demands).all(|(&c, &d)| c as i64 == d));

        // Types solved earlier are never touched again.
        for (i, r) in reports.iter().enumerate() {
            for f in r.flips.iter().chain(&r.swap_flips) {
                prop_assert!(f.previous.is_none_or(|k| !order[..i].contains(&k)));
                prop_assert_eq!(f.rack_type, order[i]);
            }
            if !unconditional {
                prop_assert!(r.swap_objectives.windows(2).all(|w| w[1] <= w[0]));
            }
        }

        let full = Objective::new(&inst).total_utility(&sol.assignment).unwrap();
        prop_assert!((full.augmented - sol.breakdown.augmented).abs() <= 1e-9 * full.augmented.abs().max(1.0));
        prop_assert_eq!(heuristic.solve_ordered(&order).unwrap(), sol);
    }

    #[test]
    fn heuristic_never_beats_the_oracle(np in prop::sample::select(vec![4usize, 6, 8]), seed in any::<u64>()) {
        let inst = tiny_instance(np, seed);
        let exact = oracle::brute_force_solve(&inst).unwrap();
        let obj = Objective::new(&inst);
        prop_assert!(close(obj.total_utility(&exact.optimal_assignment).unwrap().augmented, exact.optimal_value));
        for order in [[0, 1], [1, 0]] {
            match Heuristic::new(&inst, HeuristicConfig::default()).unwrap().solve_ordered(&order) {
                Ok(sol) => {
                    let value = obj.total_utility(&sol.assignment).unwrap().augmented;
                    prop_assert!(value >= exact.optimal_value);
                }
                Err(Error::Infeasible { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
