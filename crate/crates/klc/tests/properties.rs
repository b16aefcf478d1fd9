//! Randomized invariants over the solvers: agreement with brute-force
//! oracles, optimality of the computed control, log-domain hygiene, counting
//! numbers, and descent of the variational objective.

use proptest::prelude::*;

use klc::blocks::{self, BlocksConfig};
use klc::chain::{
    backward_pass, bellman_dp_oracle, build_potentials, enumerate_oracle, kl_control_cost,
    optimal_trajectory_distribution, solve, ChainProblem,
};
use klc::cvm::{DoubleLoop, DoubleLoopOptions, RegionGraph};
use klc::factored::{FactorGraph, FgFactor, FgVariable};
use klc::table::Table;

// ---------------------------------------------------------------------------
// chains

#[derive(Debug, Clone)]
struct RawChain {
    num_states: usize,
    horizon: usize,
    rows: Vec<Vec<f64>>,
    row_mass: Vec<f64>,
    costs: Vec<Vec<f64>>,
    start: usize,
}

impl RawChain {
    fn build(&self) -> ChainProblem {
        let n = self.num_states;
        let mut kernels = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let mut k = vec![0.0; n * n];
            for x in 0..n {
                let row = &self.rows[t * n + x];
                let sum: f64 = row.iter().sum();
                let scale = self.row_mass[t * n + x] / sum;
                for y in 0..n {
                    k[x * n + y] = row[y] * scale;
                }
            }
            kernels.push(k);
        }
        ChainProblem::new(n, self.horizon, kernels, self.costs.clone()).unwrap()
    }
}

fn cost_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        6 => 0.0f64..3.0,
        1 => Just(f64::INFINITY),
    ]
}

fn raw_chain(max_states: usize, max_horizon: usize, allow_inf: bool) -> BoxedStrategy<RawChain> {
    (1..=max_states, 1..=max_horizon)
        .prop_flat_map(move |(n, t)| {
            let cost = if allow_inf {
                cost_value().boxed()
            } else {
                (0.0f64..3.0).boxed()
            };
            (
                Just(n),
                Just(t),
                prop::collection::vec(prop::collection::vec(0.05f64..1.0, n), t * n),
                prop::collection::vec(0.35f64..=1.0, t * n),
                prop::collection::vec(prop::collection::vec(cost, n), t + 1),
                0..n,
            )
        })
        .prop_map(|(num_states, horizon, rows, row_mass, costs, start)| RawChain {
            num_states,
            horizon,
            rows,
            row_mass,
            costs,
            start,
        })
        .boxed()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_pass_agrees_with_trajectory_enumeration(raw in raw_chain(5, 5, true)) {
        let problem = raw.build();
        let potentials = build_potentials(&problem);
        let messages = backward_pass(&potentials);
        match (messages.log_z(raw.start), enumerate_oracle(&problem, raw.start, None)) {
            (Ok(lz), Ok(oracle)) => {
                prop_assert!((lz - oracle.log_z).abs() < 1e-10,
                    "message log Z {lz} vs enumerated {}", oracle.log_z);
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "methods disagree on feasibility: {a:?} vs {}", b.is_ok()),
        }
    }

    #[test]
    fn bellman_recursion_matches_the_message_cost(raw in raw_chain(5, 5, true)) {
        let problem = raw.build();
        let messages = backward_pass(&build_potentials(&problem));
        let j = bellman_dp_oracle(&problem);
        for x in 0..raw.num_states {
            match messages.log_z(x) {
                Ok(lz) => prop_assert!((j[0][x] - (-lz)).abs() < 1e-10,
                    "J({x},0) = {} vs -log Z = {}", j[0][x], -lz),
                Err(_) => prop_assert!(j[0][x] == f64::INFINITY),
            }
        }
    }

    #[test]
    fn messages_stay_clean_in_log_space(raw in raw_chain(5, 5, true)) {
        let problem = raw.build();
        let messages = backward_pass(&build_potentials(&problem));
        for t in 0..=raw.horizon {
            for x in 0..raw.num_states {
                let m = messages.log_message(t, x);
                prop_assert!(!m.is_nan(), "NaN message at ({t}, {x})");
                prop_assert!(m != f64::INFINITY, "+inf message at ({t}, {x})");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // The solved control is the cost minimizer: mixing any perturbation into
    // the optimal trajectory distribution never lowers the KL control cost.
    #[test]
    fn optimal_control_minimizes_the_cost(
        raw in raw_chain(3, 3, false),
        shift in prop::collection::vec(0.0f64..1.0, 8),
        eps in 0.01f64..0.3,
    ) {
        let problem = raw.build();
        let solution = solve(&problem, raw.start).unwrap();
        let optimal = optimal_trajectory_distribution(&problem, raw.start, None).unwrap();
        let base = kl_control_cost(&optimal, &problem, raw.start).unwrap();
        prop_assert!((base - solution.optimal_cost).abs() < 1e-9,
            "cost of the optimal table {base} vs -log Z {}", solution.optimal_cost);

        // random reweighting, kept strictly positive on the full support
        let mut perturbed: Vec<f64> = optimal
            .iter()
            .enumerate()
            .map(|(i, &p)| p + eps * shift[i % shift.len()] / optimal.len() as f64)
            .collect();
        let total: f64 = perturbed.iter().sum();
        for p in &mut perturbed {
            *p /= total;
        }
        let worse = kl_control_cost(&perturbed, &problem, raw.start).unwrap();
        prop_assert!(worse >= base - 1e-12, "perturbed {worse} < optimal {base}");
    }
}

// ---------------------------------------------------------------------------
// blocks world

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Every row of every flattened kernel preserves the block count and
    // carries mass legal_moves / (3 n).
    #[test]
    fn flattened_moves_conserve_blocks(
        n in 2usize..=4,
        m in 1usize..=3,
        horizon in 1usize..=3,
        seed_loc in 0usize..4,
    ) {
        let mut initial = vec![0usize; n];
        initial[seed_loc % n] = m;
        let config = BlocksConfig {
            locations: n,
            blocks: m,
            horizon,
            lambda: 5.0,
            initial,
        };
        let flat = blocks::flat_model(&config).unwrap();
        let states = flat.index_map.num_states();
        let chain = &flat.chain;
        for x in 0..states {
            let from = flat.index_map.assignment(x);
            prop_assert_eq!(from.iter().sum::<usize>(), m);
            let mut legal = 0usize;
            for k in 0..n {
                for l in [-1i64, 0, 1] {
                    if blocks::apply_move(&from, k, l, n, m).is_some() {
                        legal += 1;
                    }
                }
            }
            let mut mass = 0.0;
            for y in 0..states {
                let q = chain.q(0, x, y);
                if q > 0.0 {
                    let to = flat.index_map.assignment(y);
                    prop_assert_eq!(to.iter().sum::<usize>(), m);
                }
                mass += q;
            }
            let expected = legal as f64 / (3.0 * n as f64);
            prop_assert!((mass - expected).abs() < 1e-12,
                "state {from:?}: row mass {mass}, {legal} legal moves");
        }
    }
}

// ---------------------------------------------------------------------------
// region graphs and the double loop

fn random_factor_graph() -> impl Strategy<Value = FactorGraph> {
    (2usize..=5)
        .prop_flat_map(|nv| {
            let extra_scope = prop::collection::vec(0..nv, 2..=3);
            (
                Just(nv),
                prop::collection::vec(2usize..=3, nv),
                prop::collection::vec(extra_scope, 0..=2),
                prop::collection::vec(0.05f64..1.0, 256),
            )
        })
        .prop_map(|(nv, cards, extra_scopes, values)| {
            let variables: Vec<FgVariable> = (0..nv)
                .map(|i| FgVariable {
                    base: "v".into(),
                    slice: i,
                    cardinality: cards[i],
                })
                .collect();
            let mut next_value = {
                let mut it = values.into_iter().cycle();
                move || it.next().unwrap()
            };
            let mut factors = Vec::new();
            let mut add_factor = |scope: Vec<usize>, tag: usize| {
                let scope_cards: Vec<usize> = scope.iter().map(|&v| cards[v]).collect();
                let len: usize = scope_cards.iter().product();
                let data: Vec<f64> = (0..len).map(|_| next_value().ln()).collect();
                let mut table = Table::constant(scope.clone(), scope_cards, 0.0).unwrap();
                table.data_mut().copy_from_slice(&data);
                factors.push(FgFactor {
                    name: format!("f{tag}"),
                    table,
                });
            };
            // a covering chain keeps every variable hosted
            for i in 0..nv - 1 {
                add_factor(vec![i, i + 1], i);
            }
            for (j, scope) in extra_scopes.into_iter().enumerate() {
                let mut scope: Vec<usize> = scope;
                scope.sort_unstable();
                scope.dedup();
                add_factor(scope, nv + j);
            }
            FactorGraph { variables, factors }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // On every constructible region graph the counting numbers of the
    // regions containing any fixed subset sum to one.
    #[test]
    fn counting_numbers_sum_to_one_over_covers(fg in random_factor_graph()) {
        let rg = RegionGraph::from_factor_graph(&fg).unwrap();
        prop_assert!(rg.counting_identity_holds());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // The outer loop only ever lowers the free energy (it minimizes a convex
    // upper bound that touches at the current point).
    #[test]
    fn free_energy_trace_is_non_increasing(fg in random_factor_graph()) {
        let rg = RegionGraph::from_factor_graph(&fg).unwrap();
        let options = DoubleLoopOptions {
            max_outer: 40,
            outer_tolerance: 1e-10,
            ..DoubleLoopOptions::default()
        };
        let mut dl = DoubleLoop::new(rg, options).unwrap();
        let run = dl.run().unwrap();
        for w in run.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "free energy rose: {} -> {}", w[0], w[1]);
        }
    }
}

// ---------------------------------------------------------------------------
// tables

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Marginalizing any subset of variables preserves the total log-sum.
    #[test]
    fn marginalization_preserves_total_mass(
        cards in prop::collection::vec(2usize..=4, 1..=4),
        values in prop::collection::vec(-4.0f64..4.0, 256),
        keep_mask in prop::collection::vec(any::<bool>(), 4),
    ) {
        let vars: Vec<usize> = (0..cards.len()).collect();
        let mut table = Table::constant(vars.clone(), cards.clone(), 0.0).unwrap();
        for (i, slot) in table.data_mut().iter_mut().enumerate() {
            *slot = values[i % values.len()];
        }
        let keep: Vec<usize> = vars
            .iter()
            .copied()
            .filter(|&v| keep_mask[v])
            .collect();
        let reduced = table.marginalize_lse(&keep).unwrap();
        prop_assert!((reduced.log_sum() - table.log_sum()).abs() < 1e-9);
    }
}
