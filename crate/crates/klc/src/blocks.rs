//! Blocks-world planning domain: `m` blocks stacked on a ring of `n`
//! locations. The uncontrolled dynamics pick a location `k` uniformly and a
//! direction `l` in `{-1, 0, +1}` uniformly, then move the top block at `k`
//! one location along `l`; moves from an empty stack or onto a full one are
//! illegal and lose their mixture mass. The cost charges the entropy of the
//! block distribution, so control piles everything onto one stack.
//!
//! The module builds the factored model, solves it exactly through
//! flattening or approximately through the variational engine, and runs
//! receding-horizon rollouts driven by the inferred first move.

use crate::chain;
use crate::cvm::{CvmRun, DoubleLoop, DoubleLoopOptions, RegionGraph};
use crate::error::{Error, Result};
use crate::factored::{
    self, assemble, AuxiliarySpec, ComponentKernel, ComponentSpec, CostFactor, FactoredProblem,
    FactorGraph, FlattenedProblem,
};

/// Direction values in selector order.
pub const L_VALUES: [i64; 3] = [-1, 0, 1];

#[derive(Debug, Clone)]
pub struct BlocksConfig {
    /// Ring size `n`.
    pub locations: usize,
    /// Total block count `m`.
    pub blocks: usize,
    /// Number of transitions `T`; slices run `0..=T`.
    pub horizon: usize,
    /// Entropy cost weight.
    pub lambda: f64,
    /// Initial stack heights, one per location, summing to `blocks`.
    pub initial: Vec<usize>,
}

impl BlocksConfig {
    /// The symmetric instance family: `m/2` blocks on two maximally separated
    /// stacks (locations `1` and `1 + n/2`, 1-based).
    pub fn symmetric(locations: usize, blocks: usize, horizon: usize, lambda: f64) -> Result<Self> {
        if locations < 2 || blocks % 2 != 0 {
            return Err(Error::Domain(
                "symmetric instances need >= 2 locations and an even block count".into(),
            ));
        }
        let mut initial = vec![0usize; locations];
        initial[0] = blocks / 2;
        initial[locations / 2] = blocks / 2;
        let cfg = BlocksConfig {
            locations,
            blocks,
            horizon,
            lambda,
            initial,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations < 2 {
            return Err(Error::Domain("need at least two locations".into()));
        }
        if self.blocks == 0 {
            return Err(Error::Domain("need at least one block".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Domain("horizon must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Domain("lambda must be nonnegative".into()));
        }
        if self.initial.len() != self.locations {
            return Err(Error::Shape(format!(
                "initial state has {} entries for {} locations",
                self.initial.len(),
                self.locations
            )));
        }
        if self.initial.iter().any(|&h| h > self.blocks) {
            return Err(Error::Domain("initial stack exceeds the block count".into()));
        }
        if self.initial.iter().sum::<usize>() != self.blocks {
            return Err(Error::Domain(format!(
                "initial heights sum to {}, expected {}",
                self.initial.iter().sum::<usize>(),
                self.blocks
            )));
        }
        Ok(())
    }
}

/// Entropy cost `R(x) = -lambda * sum_i (x_i/m) log(x_i/m)`; zero exactly
/// when all blocks sit on one stack.
pub fn entropy_cost(heights: &[usize], lambda: f64, blocks: usize) -> f64 {
    let m = blocks as f64;
    let mut r = 0.0;
    for &h in heights {
        if h > 0 {
            let p = h as f64 / m;
            r -= lambda * p * p.ln();
        }
    }
    r
}

/// Apply move `(k, l)` (`k` 0-based here); `None` when illegal. `l = 0` is
/// always legal and leaves the state unchanged.
pub fn apply_move(
    heights: &[usize],
    k: usize,
    l: i64,
    locations: usize,
    blocks: usize,
) -> Option<Vec<usize>> {
    if l == 0 {
        return Some(heights.to_vec());
    }
    let j = (k as i64 + l).rem_euclid(locations as i64) as usize;
    if heights[k] == 0 || heights[j] == blocks {
        return None;
    }
    let mut out = heights.to_vec();
    out[k] -= 1;
    out[j] += 1;
    Some(out)
}

/// Deterministic per-location height change implied by `(k, l)`:
/// `-1` at the source, `+1` at the destination, `0` elsewhere or when `l = 0`.
fn height_shift(i: usize, k: usize, l: i64, locations: usize) -> i64 {
    if l == 0 {
        return 0;
    }
    if i == k {
        return -1;
    }
    if i == (k as i64 + l).rem_euclid(locations as i64) as usize {
        return 1;
    }
    0
}

fn shift_index(s: i64) -> usize {
    (s + 1) as usize
}

/// Factored model: auxiliaries `k`, `l` and deterministic per-location shift
/// selectors `s_i`; location components move by their shift, with illegal
/// moves losing mass; per-location entropy costs at every slice.
pub fn build_model(config: &BlocksConfig) -> Result<FactoredProblem> {
    config.validate()?;
    let n = config.locations;
    let m = config.blocks;
    let mut auxiliaries = vec![
        AuxiliarySpec {
            name: "k".into(),
            cardinality: n,
            parents: vec![],
            table: vec![1.0 / n as f64; n],
        },
        AuxiliarySpec {
            name: "l".into(),
            cardinality: 3,
            parents: vec![],
            table: vec![1.0 / 3.0; 3],
        },
    ];
    for i in 0..n {
        let mut table = vec![0.0f64; n * 3 * 3];
        for k in 0..n {
            for (li, &l) in L_VALUES.iter().enumerate() {
                let s = height_shift(i, k, l, n);
                table[(k * 3 + li) * 3 + shift_index(s)] = 1.0;
            }
        }
        auxiliaries.push(AuxiliarySpec {
            name: format!("s{i}"),
            cardinality: 3,
            parents: vec!["k".into(), "l".into()],
            table,
        });
    }
    let card = m + 1;
    let mut components = Vec::with_capacity(n);
    for i in 0..n {
        // (s_i, prev, next): next = prev + shift, empty row when out of range
        let mut table = vec![0.0f64; 3 * card * card];
        for (si, &s) in [-1i64, 0, 1].iter().enumerate() {
            for prev in 0..card {
                let next = prev as i64 + s;
                if (0..card as i64).contains(&next) {
                    table[(si * card + prev) * card + next as usize] = 1.0;
                }
            }
        }
        components.push(ComponentSpec {
            name: format!("x{i}"),
            cardinality: card,
            kernel: ComponentKernel::Mixture {
                selectors: vec![format!("s{i}")],
                table,
            },
        });
    }
    let mut factors = Vec::with_capacity(n);
    for i in 0..n {
        let mut cost = vec![0.0f64; card];
        for (h, slot) in cost.iter_mut().enumerate() {
            *slot = entropy_cost(&[h], config.lambda, m);
        }
        factors.push(CostFactor::every_slice(
            vec![format!("x{i}")],
            cost,
            config.horizon,
        ));
    }
    assemble(
        components,
        auxiliaries,
        factors,
        config.horizon,
        Some(config.initial.clone()),
    )
}

/// Posterior over the move variables for one transition, `joint[k][li]`
/// normalized over all `(k, l)`.
#[derive(Debug, Clone)]
pub struct SelectorMarginals {
    /// Transition into this slice (1-based).
    pub slice: usize,
    pub joint: Vec<Vec<f64>>,
    pub k: Vec<f64>,
    /// Indexed like [`L_VALUES`].
    pub l: Vec<f64>,
}

impl SelectorMarginals {
    fn from_joint(slice: usize, joint: Vec<Vec<f64>>) -> Self {
        let n = joint.len();
        let mut k = vec![0.0; n];
        let mut l = vec![0.0; 3];
        for (ki, row) in joint.iter().enumerate() {
            for (li, &v) in row.iter().enumerate() {
                k[ki] += v;
                l[li] += v;
            }
        }
        SelectorMarginals { slice, joint, k, l }
    }

    /// Joint maximizer with deterministic tie-breaking: smallest `k`, then
    /// `l` in the order `-1, 0, +1`, wins among values within `1e-15`.
    pub fn map_move(&self) -> (usize, i64) {
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for (ki, row) in self.joint.iter().enumerate() {
            for (li, &v) in row.iter().enumerate() {
                if v > best.2 + 1e-15 {
                    best = (ki, li, v);
                }
            }
        }
        (best.0, L_VALUES[best.1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlocksSolver {
    Exact,
    Cvm,
}

/// Everything a planning run produces.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub solver: BlocksSolver,
    /// `-log Z(x^0)`, including the start-slice cost.
    pub optimal_cost: f64,
    /// `location_marginals[t][i]` = distribution of stack `i`'s height at
    /// slice `t`, `t = 0..=T`.
    pub location_marginals: Vec<Vec<Vec<f64>>>,
    /// Move posteriors for transitions `1..=T`.
    pub selectors: Vec<SelectorMarginals>,
    /// `expected_heights[t][i]`.
    pub expected_heights: Vec<Vec<f64>>,
    /// Always true for the exact solver.
    pub converged: bool,
    /// Free energy after each outer step (variational solver only).
    pub free_energy_trace: Option<Vec<f64>>,
}

/// Solve a blocks instance. The exact path flattens to the reachable joint
/// states; the variational path unrolls the factor graph and runs the
/// double loop.
pub fn plan(
    config: &BlocksConfig,
    solver: BlocksSolver,
    cvm_options: Option<DoubleLoopOptions>,
) -> Result<PlanResult> {
    match solver {
        BlocksSolver::Exact => plan_exact(config),
        BlocksSolver::Cvm => plan_cvm(config, cvm_options.unwrap_or_default()).map(|r| r.0),
    }
}

fn expected_heights_of(marginals: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    marginals
        .iter()
        .map(|slice| {
            slice
                .iter()
                .map(|dist| {
                    dist.iter()
                        .enumerate()
                        .map(|(h, &p)| h as f64 * p)
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn plan_exact(config: &BlocksConfig) -> Result<PlanResult> {
    let model = build_model(config)?;
    let flat = factored::flatten(&model, None)?;
    let start = flat.index_map.state_index(&config.initial)?;
    let potentials = chain::build_potentials(&flat.chain);
    let messages = chain::backward_pass(&potentials);
    let optimal_cost = -messages.log_z(start)?;
    let flat_marginals = chain::optimal_marginals(&messages, &potentials, start)?;

    let n = config.locations;
    let card = config.blocks + 1;
    let num_states = flat.chain.num_states();
    let mut location_marginals = Vec::with_capacity(config.horizon + 1);
    for slice in &flat_marginals {
        let mut per_loc = vec![vec![0.0; card]; n];
        for (a, &p) in slice.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let heights = flat.index_map.assignment(a);
            for i in 0..n {
                per_loc[i][heights[i]] += p;
            }
        }
        location_marginals.push(per_loc);
    }

    let mut selectors = Vec::with_capacity(config.horizon);
    for t in 1..=config.horizon {
        let mut joint = vec![vec![0.0f64; 3]; n];
        let prev = &flat_marginals[t - 1];
        for a in 0..num_states {
            if prev[a] == 0.0 {
                continue;
            }
            let heights = flat.index_map.assignment(a);
            let step = chain::optimal_step_distribution(&messages, &potentials, a, t - 1)?;
            // group legal (k, l) by landing state: uniform q(k) q(l) means
            // the posterior splits the step mass equally within a group
            let mut groups: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
            for k in 0..n {
                for (li, &l) in L_VALUES.iter().enumerate() {
                    if let Some(next) = apply_move(&heights, k, l, n, config.blocks) {
                        let b = flat.index_map.state_index(&next)?;
                        match groups.iter_mut().find(|(g, _)| *g == b) {
                            Some((_, members)) => members.push((k, li)),
                            None => groups.push((b, vec![(k, li)])),
                        }
                    }
                }
            }
            for (b, members) in groups {
                let w = prev[a] * step[b];
                if w == 0.0 {
                    continue;
                }
                let share = w / members.len() as f64;
                for (k, li) in members {
                    joint[k][li] += share;
                }
            }
        }
        let total: f64 = joint.iter().flatten().sum();
        if total > 0.0 {
            for row in joint.iter_mut() {
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        selectors.push(SelectorMarginals::from_joint(t, joint));
    }

    let expected_heights = expected_heights_of(&location_marginals);
    Ok(PlanResult {
        solver: BlocksSolver::Exact,
        optimal_cost,
        location_marginals,
        selectors,
        expected_heights,
        converged: true,
        free_energy_trace: None,
    })
}

fn plan_cvm(
    config: &BlocksConfig,
    options: DoubleLoopOptions,
) -> Result<(PlanResult, CvmRun)> {
    let model = build_model(config)?;
    let fg = factored::export_factor_graph(&model)?;
    let rg = RegionGraph::from_factor_graph(&fg)?;
    let mut dl = DoubleLoop::new(rg, options)?;
    let run = dl.run()?;

    let n = config.locations;
    let card = config.blocks + 1;
    // the graph conditions on x^0, so its free energy approximates the
    // backward message term; the start-slice cost is the leftover constant
    let optimal_cost = run.free_energy + entropy_cost(&config.initial, config.lambda, config.blocks);

    let mut location_marginals = Vec::with_capacity(config.horizon + 1);
    let mut slice0 = vec![vec![0.0; card]; n];
    for i in 0..n {
        slice0[i][config.initial[i]] = 1.0;
    }
    location_marginals.push(slice0);
    for t in 1..=config.horizon {
        let mut per_loc = Vec::with_capacity(n);
        for i in 0..n {
            let v = fg
                .var_id(&format!("x{i}"), t)
                .ok_or_else(|| Error::Domain(format!("missing variable x{i}[{t}]")))?;
            per_loc.push(dl.var_marginal(v)?);
        }
        location_marginals.push(per_loc);
    }

    let mut selectors = Vec::with_capacity(config.horizon);
    for t in 1..=config.horizon {
        let kv = fg
            .var_id("k", t)
            .ok_or_else(|| Error::Domain(format!("missing variable k[{t}]")))?;
        let lv = fg
            .var_id("l", t)
            .ok_or_else(|| Error::Domain(format!("missing variable l[{t}]")))?;
        let pair = pair_belief(&dl, kv, lv)?;
        let mut joint = vec![vec![0.0f64; 3]; n];
        for k in 0..n {
            for li in 0..3 {
                joint[k][li] = pair.get(&[k, li]).exp();
            }
        }
        selectors.push(SelectorMarginals::from_joint(t, joint));
    }

    let expected_heights = expected_heights_of(&location_marginals);
    let plan = PlanResult {
        solver: BlocksSolver::Cvm,
        optimal_cost,
        location_marginals,
        selectors,
        expected_heights,
        converged: run.converged,
        free_energy_trace: Some(run.trace.clone()),
    };
    Ok((plan, run))
}

/// Normalized joint belief of a variable pair, read from the smallest region
/// containing both.
fn pair_belief(dl: &DoubleLoop, a: usize, b: usize) -> Result<crate::table::Table> {
    let rg = dl.region_graph();
    let mut best: Option<usize> = None;
    for (r, region) in rg.regions.iter().enumerate() {
        if region.scope.binary_search(&a).is_ok()
            && region.scope.binary_search(&b).is_ok()
            && best.is_none_or(|x| region.scope.len() < rg.regions[x].scope.len())
        {
            best = Some(r);
        }
    }
    let r = best.ok_or_else(|| {
        Error::Domain(format!("no region contains variables {a} and {b} jointly"))
    })?;
    let keep = if a < b { [a, b] } else { [b, a] };
    let mut m = dl.beliefs()[r].marginalize_lse(&keep)?;
    m.normalize();
    Ok(m)
}

/// Full plan plus the raw variational run (trace, violation) for callers
/// that inspect convergence.
pub fn plan_cvm_with_run(
    config: &BlocksConfig,
    options: DoubleLoopOptions,
) -> Result<(PlanResult, CvmRun)> {
    plan_cvm(config, options)
}

/// Export the unrolled factor graph of an instance.
pub fn factor_graph(config: &BlocksConfig) -> Result<FactorGraph> {
    build_model(config).and_then(|m| factored::export_factor_graph(&m))
}

/// Flatten an instance to its reachable joint chain.
pub fn flat_model(config: &BlocksConfig) -> Result<FlattenedProblem> {
    build_model(config).and_then(|m| factored::flatten(&m, None))
}

/// A forced first move, 1-based location.
#[derive(Debug, Clone, Copy)]
pub struct MoveOverride {
    pub stack: usize,
    pub direction: i64,
}

#[derive(Debug, Clone)]
pub struct RolloutStep {
    /// 1-based transition index.
    pub step: usize,
    /// 1-based source location of the chosen move.
    pub stack: usize,
    pub direction: i64,
    /// Heights after the move.
    pub state: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RolloutTrace {
    pub initial: Vec<usize>,
    pub steps: Vec<RolloutStep>,
    /// Number of steps whose direction was nonzero.
    pub moves_made: usize,
    pub final_state: Vec<usize>,
}

/// Receding-horizon rollout: at each step, re-solve from the realized state
/// over the remaining horizon, commit the maximum-posterior first move, and
/// stop early once the blocks form a single stack and the planner prefers to
/// stay. The optional override replaces the first decision (breaking the
/// symmetry of the optimal posterior, which splits evenly between the two
/// stacks).
pub fn receding_horizon_rollout(
    config: &BlocksConfig,
    solver: BlocksSolver,
    first_move: Option<MoveOverride>,
    max_steps: Option<usize>,
    cvm_options: Option<DoubleLoopOptions>,
) -> Result<RolloutTrace> {
    config.validate()?;
    let n = config.locations;
    let m = config.blocks;
    if let Some(ov) = &first_move {
        if ov.stack == 0 || ov.stack > n || !L_VALUES.contains(&ov.direction) {
            return Err(Error::Domain(format!(
                "override ({}, {}) is not a move on {n} locations",
                ov.stack, ov.direction
            )));
        }
        if apply_move(&config.initial, ov.stack - 1, ov.direction, n, m).is_none() {
            return Err(Error::Domain(format!(
                "override ({}, {}) is illegal from {:?}",
                ov.stack, ov.direction, config.initial
            )));
        }
    }
    let mut state = config.initial.clone();
    let mut steps: Vec<RolloutStep> = Vec::new();
    let limit = max_steps.unwrap_or(config.horizon).min(config.horizon);
    for t in 1..=limit {
        let remaining = config.horizon - (t - 1);
        let (k, l) = match (&first_move, t) {
            (Some(ov), 1) => (ov.stack - 1, ov.direction),
            _ => {
                let sub = BlocksConfig {
                    horizon: remaining,
                    initial: state.clone(),
                    ..config.clone()
                };
                let result = plan(&sub, solver, cvm_options.clone())?;
                result.selectors[0].map_move()
            }
        };
        let next = apply_move(&state, k, l, n, m).ok_or_else(|| {
            Error::Domain(format!(
                "planned move ({}, {l}) is illegal from {state:?}",
                k + 1
            ))
        })?;
        state = next;
        steps.push(RolloutStep {
            step: t,
            stack: k + 1,
            direction: l,
            state: state.clone(),
        });
        if entropy_cost(&state, config.lambda, m) == 0.0 {
            let left = config.horizon - t;
            if left == 0 {
                break;
            }
            let sub = BlocksConfig {
                horizon: left,
                initial: state.clone(),
                ..config.clone()
            };
            let check = plan(&sub, solver, cvm_options.clone())?;
            let l_map = check.selectors[0]
                .l
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if L_VALUES[l_map] == 0 {
                break;
            }
        }
    }
    let moves_made = steps.iter().filter(|s| s.direction != 0).count();
    Ok(RolloutTrace {
        initial: config.initial.clone(),
        moves_made,
        final_state: state,
        steps,
    })
}
