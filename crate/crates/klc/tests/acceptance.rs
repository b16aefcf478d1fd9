//! Acceptance checks for the whole crate, one numbered check per test.
//! Each test prints a single PASS/FAIL line (visible with --nocapture, and in
//! the failure report otherwise) and panics when its check is not met.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use klc::blocks::{self, BlocksConfig, BlocksSolver, MoveOverride};
use klc::chain::{
    backward_pass, bellman_dp_oracle, build_potentials, enumerate_oracle, kl_control_cost,
    optimal_marginals, optimal_trajectory_distribution, solve, ChainProblem,
};
use klc::cvm::{DoubleLoop, DoubleLoopOptions, RegionGraph};
use klc::factored::{FactorGraph, FgFactor, FgVariable};
use klc::harness::{
    self, compare_manifests, enumerate_variable_marginals, load_problem, run_problem, Payload,
    RunFlags,
};
use klc::pathint::{
    expected_cost, log_transition_density, mc_optimal_cost, one_d_quadratic_cost,
    u_matrix_exponent, ContinuousDynamics, ControlSchedule, Drift, PathProblem, StateCost,
};
use klc::table::Table;

fn report(name: &str, ok: bool, detail: &str) {
    println!("acceptance {name}: {} — {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance {name} failed: {detail}");
}

fn problems_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("problems")
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("klc-acceptance-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Random sub-stochastic chain with occasional forbidden states.
fn random_chain(rng: &mut ChaCha12Rng, max_n: usize, max_t: usize, allow_inf: bool) -> ChainProblem {
    let n = rng.gen_range(1..=max_n);
    let horizon = rng.gen_range(1..=max_t);
    let mut kernels = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut k = vec![0.0; n * n];
        for x in 0..n {
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            let mass = if rng.gen_bool(0.3) {
                rng.gen_range(0.4..1.0)
            } else {
                1.0
            };
            for y in 0..n {
                k[x * n + y] = row[y] / sum * mass;
            }
        }
        kernels.push(k);
    }
    let costs = (0..=horizon)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if allow_inf && rng.gen_bool(0.1) {
                        f64::INFINITY
                    } else {
                        rng.gen_range(0.0..3.0)
                    }
                })
                .collect()
        })
        .collect();
    ChainProblem::new(n, horizon, kernels, costs).unwrap()
}

#[test]
fn acceptance_01_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(1001);
    let mut compared = 0usize;
    let mut attempts = 0usize;
    let mut worst = 0.0f64;
    while compared < 50 {
        attempts += 1;
        assert!(attempts < 500, "random instances keep coming out infeasible");
        let problem = random_chain(&mut rng, 5, 5, true);
        let start = rng.gen_range(0..problem.num_states());
        let potentials = build_potentials(&problem);
        let messages = backward_pass(&potentials);
        match (
            messages.log_z(start),
            enumerate_oracle(&problem, start, None),
        ) {
            (Ok(lz), Ok(oracle)) => {
                worst = worst.max((lz - oracle.log_z).abs());
                let marginals = optimal_marginals(&messages, &potentials, start).unwrap();
                for (ours, theirs) in marginals.iter().zip(&oracle.marginals) {
                    for (a, b) in ours.iter().zip(theirs) {
                        worst = worst.max((a - b).abs());
                    }
                }
                compared += 1;
            }
            (Err(_), Err(_)) => {}
            (a, b) => panic!(
                "feasibility disagreement: messages {a:?}, enumeration ok = {}",
                b.is_ok()
            ),
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "01 (oracle equivalence)",
        worst < 1e-10 && elapsed < 10.0,
        &format!("{compared} instances, worst deviation {worst:.2e}, {elapsed:.2}s"),
    );
}

#[test]
fn acceptance_02_bellman_equivalence() {
    let mut rng = ChaCha12Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..50 {
        let problem = random_chain(&mut rng, 5, 5, true);
        let _ = rng.gen_range(0..problem.num_states());
        let messages = backward_pass(&build_potentials(&problem));
        let j = bellman_dp_oracle(&problem);
        for x in 0..problem.num_states() {
            match messages.log_z(x) {
                Ok(lz) => {
                    worst = worst.max((j[0][x] - (-lz)).abs());
                    checked += 1;
                }
                Err(_) => assert_eq!(
                    j[0][x],
                    f64::INFINITY,
                    "value recursion thinks start {x} is feasible"
                ),
            }
        }
    }
    report(
        "02 (value-recursion equivalence)",
        worst < 1e-10,
        &format!("{checked} start states, worst |J - (-log Z)| = {worst:.2e}"),
    );
}

#[test]
fn acceptance_03_minimality() {
    let mut rng = ChaCha12Rng::seed_from_u64(3003);
    let mut worst_slack = f64::INFINITY;
    for _ in 0..10 {
        let problem = random_chain(&mut rng, 3, 3, false);
        let start = rng.gen_range(0..problem.num_states());
        let solution = solve(&problem, start).unwrap();
        let optimal = optimal_trajectory_distribution(&problem, start, None).unwrap();
        let base = kl_control_cost(&optimal, &problem, start).unwrap();
        assert!(
            (base - solution.optimal_cost).abs() < 1e-9,
            "optimal table costs {base}, solver says {}",
            solution.optimal_cost
        );
        for _ in 0..20 {
            let eps: f64 = rng.gen_range(0.01..0.5);
            let mut perturbed: Vec<f64> = optimal
                .iter()
                .map(|&p| p + eps * rng.gen_range(0.0..1.0) / optimal.len() as f64)
                .collect();
            let total: f64 = perturbed.iter().sum();
            for p in &mut perturbed {
                *p /= total;
            }
            let cost = kl_control_cost(&perturbed, &problem, start).unwrap();
            worst_slack = worst_slack.min(cost - base);
        }
    }
    report(
        "03 (minimality of the optimal control)",
        worst_slack >= -1e-12,
        &format!("10 instances x 20 perturbations, smallest slack {worst_slack:.2e}"),
    );
}

#[test]
fn acceptance_04_blocks_exact_strong_pressure() {
    let started = Instant::now();
    let pf = load_problem(&problems_dir().join("blocks_n4m8_T10_lam10.toml"), true).unwrap();
    let Payload::Blocks { config } = &pf.payload else {
        panic!("expected a blocks problem");
    };
    let flat = blocks::flat_model(config).unwrap();
    assert_eq!(flat.index_map.num_states(), 165, "reachable joint states");

    let plan = blocks::plan(config, BlocksSolver::Exact, None).unwrap();
    let first = &plan.selectors[0];
    assert_eq!(first.slice, 1);

    let mut checks: Vec<(bool, String)> = Vec::new();
    for (label, value) in [("p(k=1)", first.k[0]), ("p(k=3)", first.k[2])] {
        let delta = (value - 0.5).abs();
        checks.push((delta <= 1e-6, format!("{label} = {value:.8} (|delta| = {delta:.2e})")));
    }
    for (label, value) in [("p(l=-1)", first.l[0]), ("p(l=+1)", first.l[2])] {
        let delta = (value - 0.5).abs();
        checks.push((delta <= 1e-6, format!("{label} = {value:.8} (|delta| = {delta:.2e})")));
    }
    let mut late_peaked = true;
    for sel in plan.selectors.iter().filter(|s| s.slice > 8) {
        let argmax = sel
            .l
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        late_peaked &= argmax == 1;
    }
    checks.push((late_peaked, "stay is the mode after step 8".into()));
    let elapsed = started.elapsed().as_secs_f64();
    checks.push((elapsed < 300.0, format!("{elapsed:.1}s")));

    let ok = checks.iter().all(|(ok, _)| *ok);
    let detail = checks
        .iter()
        .map(|(ok, d)| format!("{}{d}", if *ok { "" } else { "NOT MET: " }))
        .collect::<Vec<_>>()
        .join("; ");
    // The 1e-6 window around 0.5 is not met by exact inference on this
    // model: staying put keeps positive probability at every finite
    // pressure, so the first-move posterior sits at 0.4998 / 0.4995, a
    // 2.5e-4 deviation. The remaining checks hold.
    report("04 (blocks, strong entropy pressure)", ok, &detail);
}

#[test]
fn acceptance_05_blocks_exact_weak_pressure() {
    let pf = load_problem(&problems_dir().join("blocks_n4m8_T10_lam2.toml"), true).unwrap();
    let Payload::Blocks { config } = &pf.payload else {
        panic!("expected a blocks problem");
    };
    let plan = blocks::plan(config, BlocksSolver::Exact, None).unwrap();
    let first = &plan.selectors[0];
    let argmax = first
        .l
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    report(
        "05 (blocks, weak entropy pressure)",
        argmax == 1,
        &format!(
            "first-move direction posterior {:?} peaks at stay",
            first.l.iter().map(|p| (p * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn acceptance_06_rollout() {
    let config = BlocksConfig {
        locations: 4,
        blocks: 8,
        horizon: 10,
        lambda: 10.0,
        initial: vec![4, 0, 4, 0],
    };
    // symmetry-breaking first move: pull one block off the second pile
    let trace = blocks::receding_horizon_rollout(
        &config,
        BlocksSolver::Exact,
        Some(MoveOverride {
            stack: 3,
            direction: -1,
        }),
        None,
        None,
    )
    .unwrap();
    let single_stack = trace.final_state.iter().filter(|&&h| h > 0).count() == 1;
    let eight = trace.moves_made == 8 && single_stack;

    let weak = BlocksConfig {
        lambda: 2.0,
        ..config.clone()
    };
    let weak_trace =
        blocks::receding_horizon_rollout(&weak, BlocksSolver::Exact, None, None, None).unwrap();

    let short = BlocksConfig {
        horizon: 4,
        ..config.clone()
    };
    let short_trace =
        blocks::receding_horizon_rollout(&short, BlocksSolver::Exact, None, None, None).unwrap();

    report(
        "06 (receding-horizon rollout)",
        eight && weak_trace.moves_made == 0 && short_trace.moves_made == 0,
        &format!(
            "forced start: {} moves to {:?}; weak pressure: {} moves; short horizon: {} moves",
            trace.moves_made, trace.final_state, weak_trace.moves_made, short_trace.moves_made
        ),
    );
}

/// Every region graph the test suite builds, in one place.
fn suite_region_graphs() -> Vec<(String, RegionGraph)> {
    let mut graphs = Vec::new();
    for (n, m, t, lambda) in [(4, 2, 3, 10.0), (4, 4, 2, 10.0), (6, 2, 2, 5.0), (4, 8, 10, 10.0)] {
        let config = BlocksConfig::symmetric(n, m, t, lambda).unwrap();
        let fg = blocks::factor_graph(&config).unwrap();
        graphs.push((
            format!("blocks n={n} m={m} T={t}"),
            RegionGraph::from_factor_graph(&fg).unwrap(),
        ));
    }
    let committed = std::fs::read_to_string(problems_dir().join("factored_chain.fg")).unwrap();
    let fg = klc::factored::factor_graph_from_text(&committed).unwrap();
    graphs.push(("committed chain graph".into(), RegionGraph::from_factor_graph(&fg).unwrap()));
    for seed in 0..6u64 {
        let fg = random_factor_graph(seed);
        graphs.push((format!("random graph {seed}"), RegionGraph::from_factor_graph(&fg).unwrap()));
    }
    graphs
}

fn random_factor_graph(seed: u64) -> FactorGraph {
    let mut rng = ChaCha12Rng::seed_from_u64(7000 + seed);
    let nv = rng.gen_range(3..=5);
    let cards: Vec<usize> = (0..nv).map(|_| rng.gen_range(2..=3)).collect();
    let variables: Vec<FgVariable> = (0..nv)
        .map(|i| FgVariable {
            base: "v".into(),
            slice: i,
            cardinality: cards[i],
        })
        .collect();
    let mut factors = Vec::new();
    let mut add = |scope: Vec<usize>, rng: &mut ChaCha12Rng, tag: usize| {
        let scope_cards: Vec<usize> = scope.iter().map(|&v| cards[v]).collect();
        let len: usize = scope_cards.iter().product();
        let mut table = Table::constant(scope, scope_cards, 0.0).unwrap();
        for slot in table.data_mut().iter_mut().take(len) {
            *slot = rng.gen_range(0.05f64..1.0).ln();
        }
        factors.push(FgFactor {
            name: format!("f{tag}"),
            table,
        });
    };
    for i in 0..nv - 1 {
        add(vec![i, i + 1], &mut rng, i);
    }
    for j in 0..rng.gen_range(0..=2usize) {
        let mut scope: Vec<usize> = (0..nv).collect();
        for _ in 0..nv.saturating_sub(rng.gen_range(2..=3)) {
            scope.remove(rng.gen_range(0..scope.len()));
        }
        add(scope, &mut rng, nv + j);
    }
    FactorGraph { variables, factors }
}

#[test]
fn acceptance_07_counting_numbers() {
    let graphs = suite_region_graphs();
    let mut all = true;
    for (name, rg) in &graphs {
        if !rg.counting_identity_holds() {
            all = false;
            println!("counting identity broken on {name}");
        }
    }
    report(
        "07 (counting-number identity)",
        all,
        &format!("holds exactly on all {} region graphs", graphs.len()),
    );
}

#[test]
fn acceptance_08_double_loop_descent() {
    let mut instances: Vec<(String, FactorGraph)> = Vec::new();
    let committed = std::fs::read_to_string(problems_dir().join("factored_chain.fg")).unwrap();
    instances.push((
        "committed chain graph".into(),
        klc::factored::factor_graph_from_text(&committed).unwrap(),
    ));
    for seed in 0..4u64 {
        instances.push((format!("random graph {seed}"), random_factor_graph(seed)));
    }
    for (n, m, t) in [(4usize, 2usize, 3usize), (4, 4, 2)] {
        let config = BlocksConfig::symmetric(n, m, t, 10.0).unwrap();
        instances.push((
            format!("blocks n={n} m={m} T={t}"),
            blocks::factor_graph(&config).unwrap(),
        ));
    }

    let mut monotone = true;
    let mut worst_f = 0.0f64;
    let mut worst_belief = 0.0f64;
    let mut chain_graphs = 0usize;
    for (name, fg) in &instances {
        let rg = RegionGraph::from_factor_graph(fg).unwrap();
        // chain-structured graphs are solved exactly, so they get a tight
        // stopping rule; everything else runs at the stock configuration
        let is_chain = fg
            .factors
            .iter()
            .all(|f| f.table.vars().len() <= 2)
            && fg
                .factors
                .iter()
                .filter(|f| f.table.vars().len() == 2)
                .enumerate()
                .all(|(i, f)| f.table.vars() == [i, i + 1]);
        let options = if is_chain {
            DoubleLoopOptions {
                outer_tolerance: 1e-13,
                ..DoubleLoopOptions::default()
            }
        } else {
            DoubleLoopOptions::default()
        };
        let mut dl = DoubleLoop::new(rg, options).unwrap();
        let run = dl.run().unwrap();
        for w in run.trace.windows(2) {
            if w[1] > w[0] + 1e-12 {
                monotone = false;
                println!("trace rose on {name}: {} -> {}", w[0], w[1]);
            }
        }
        if is_chain {
            chain_graphs += 1;
            assert!(run.converged, "{name} did not converge");
            let (log_z, exact) = enumerate_variable_marginals(fg).unwrap();
            worst_f = worst_f.max((run.free_energy - (-log_z)).abs());
            for (v, reference) in exact.iter().enumerate() {
                let belief = dl.var_marginal(v).unwrap();
                for (a, b) in belief.iter().zip(reference) {
                    worst_belief = worst_belief.max((a - b).abs());
                }
            }
        }
    }
    report(
        "08 (double-loop descent and exactness on chains)",
        monotone && worst_f < 1e-6 && worst_belief < 1e-6,
        &format!(
            "{} instances monotone; {chain_graphs} chain graphs: |F + log Z| <= {worst_f:.2e}, \
             belief error <= {worst_belief:.2e}",
            instances.len()
        ),
    );
}

#[test]
fn acceptance_09_benchmark_accuracy() {
    let started = Instant::now();
    let bounds = [
        ("blocks_n4m2_T11.toml", 0.05),
        ("blocks_n4m4_T11.toml", 0.15),
        ("blocks_n6m2_T11.toml", 0.05),
    ];
    let mut ok = true;
    let mut details = Vec::new();
    for (file, bound) in bounds {
        let pf = load_problem(&problems_dir().join(file), true).unwrap();
        let dir = scratch_dir(&format!("bench-{file}"));
        let exact_dir = dir.join("exact");
        let cvm_dir = dir.join("cvm");
        let exact_flags = RunFlags {
            solver: Some("exact".into()),
            ..RunFlags::default()
        };
        let m_exact = run_problem(&pf, &exact_dir, &exact_flags).unwrap();
        assert_eq!(m_exact.status, harness::RunStatus::Ok);
        let m_cvm = run_problem(&pf, &cvm_dir, &RunFlags::default()).unwrap();
        assert_eq!(m_cvm.status, harness::RunStatus::Ok, "{file}: {:?}", m_cvm.diagnostic);
        let cmp = compare_manifests(
            &exact_dir.join(harness::MANIFEST_FILE),
            &cvm_dir.join(harness::MANIFEST_FILE),
        )
        .unwrap();
        let this_ok = cmp.max_error_first_slice <= bound
            && cmp.max_error_all_slices >= cmp.max_error_first_slice;
        ok &= this_ok;
        details.push(format!(
            "{file}: first-slice {:.4} (bound {bound}), all-slice {:.4}{}",
            cmp.max_error_first_slice,
            cmp.max_error_all_slices,
            if this_ok { "" } else { " NOT MET" }
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
    let elapsed = started.elapsed().as_secs_f64();
    ok &= elapsed < 1800.0;
    details.push(format!("{elapsed:.1}s"));
    report("09 (variational accuracy on the benchmark trio)", ok, &details.join("; "));
}

#[test]
fn acceptance_10_path_integral() {
    // density-ratio identity on random triples
    let mut rng = ChaCha12Rng::seed_from_u64(4242);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(1..=3);
        let a: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut noise = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += a[i * d + k] * a[j * d + k];
                }
                noise[i * d + j] = s + if i == j { d as f64 } else { 0.0 };
            }
        }
        let drift: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let dynamics = ContinuousDynamics::new(d, Drift::Linear(drift), noise).unwrap();
        let sample = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        let (x, y, u) = (sample(&mut rng), sample(&mut rng), sample(&mut rng));
        let zero = vec![0.0; d];
        let lhs = u_matrix_exponent(&dynamics, &x, &y, &u, 0);
        let rhs = log_transition_density(&dynamics, &x, &y, &u, 0)
            - log_transition_density(&dynamics, &x, &y, &zero, 0);
        worst = worst.max((lhs - rhs).abs());
    }
    let identity_ok = worst < 1e-10;

    // the analytic control term is literally the quadratic form
    let dynamics = ContinuousDynamics::new(
        2,
        Drift::Zero,
        vec![1.3, 0.2, 0.2, 0.9],
    )
    .unwrap();
    let problem = PathProblem::new(dynamics, 3, StateCost::Zero).unwrap();
    let schedule = ControlSchedule::new(vec![
        vec![0.7, -0.3],
        vec![-0.1, 0.4],
        vec![0.2, 0.2],
    ]);
    let est = expected_cost(&problem, &schedule, &[0.0, 0.0], 10, 1, 1).unwrap();
    let reference: f64 = schedule
        .controls
        .iter()
        .map(|u| 0.5 * problem.dynamics.quad_form_inv(u))
        .sum();
    let exact_ok = est.control_cost == reference;

    // sampled optimal cost against the closed form
    let mc_started = Instant::now();
    let alpha = 1.0;
    let x0 = 0.5;
    let horizon = 10;
    let dynamics = ContinuousDynamics::new(1, Drift::Zero, vec![1.0]).unwrap();
    let problem = PathProblem::new(dynamics, horizon, StateCost::QuadraticTerminal { alpha }).unwrap();
    let est = mc_optimal_cost(&problem, &[x0], 100_000, 99, 4).unwrap();
    let closed = one_d_quadratic_cost(alpha, x0, horizon);
    let mc_elapsed = mc_started.elapsed().as_secs_f64();
    let mc_ok = (est.cost - closed).abs() < 3.0 * est.standard_error && mc_elapsed < 10.0;

    report(
        "10 (path-integral identities)",
        identity_ok && exact_ok && mc_ok,
        &format!(
            "identity deviation {worst:.2e}; control term exact: {exact_ok}; sampler {:.4} vs \
             closed form {closed:.4} (se {:.4}, {mc_elapsed:.1}s)",
            est.cost, est.standard_error
        ),
    );
}

/// Deliberately opt-in: plans on a state space of 41^8 joint configurations,
/// several minutes per step. Asserts only that the variational planner keeps
/// the block count conserved and every chosen move legal over 3 steps.
#[test]
#[ignore = "large demonstration instance; run explicitly with --ignored"]
fn acceptance_11_large_instance_demo() {
    let pf = load_problem(&problems_dir().join("blocks_n8m40_T80.toml"), true).unwrap();
    let Payload::Blocks { config } = &pf.payload else {
        panic!("expected a blocks problem");
    };
    let trace = blocks::receding_horizon_rollout(
        config,
        BlocksSolver::Cvm,
        None,
        Some(3),
        Some(pf.solver.cvm.clone()),
    )
    .unwrap();
    assert!(!trace.steps.is_empty());
    let mut previous = trace.initial.clone();
    let mut ok = true;
    for step in &trace.steps {
        let conserved = step.state.iter().sum::<usize>() == config.blocks;
        let legal = match step.direction {
            0 => step.state == previous,
            d => blocks::apply_move(
                &previous,
                step.stack - 1,
                d,
                config.locations,
                config.blocks,
            )
            .map(|next| next == step.state)
            .unwrap_or(false),
        };
        ok &= conserved && legal;
        previous = step.state.clone();
    }
    report(
        "11 (large-instance demo)",
        ok,
        &format!("{} planned steps conserve blocks and stay legal", trace.steps.len()),
    );
}
