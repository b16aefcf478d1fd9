//! Exact control on flat finite-state Markov chains.
//!
//! A [`ChainProblem`] couples an uncontrolled per-step kernel `q^t(y|x)` with
//! a state cost `R(x,t)`. The optimal controlled trajectory distribution is
//! `p = psi / Z` where `psi` multiplies `q` by the exponentiated negative
//! costs; `-log Z` is the optimal cost. Everything here runs in log space:
//! `R = +inf` encodes forbidden states as exact zero potentials, and horizons
//! in the thousands cannot underflow.
//!
//! Kernels are validated as sub-stochastic (row sums at most 1). Ordinary
//! problems use exactly stochastic rows; rows summing below 1 model dynamics
//! that can lose mass to an implicit dead sink, which is how mixture models
//! with jointly-illegal moves flatten (see the blocks module).

use crate::error::{Error, Result};
use crate::logsumexp::{log_add, logsumexp};

const ROW_SUM_TOL: f64 = 1e-12;

/// Finite-state KL-control instance.
#[derive(Debug, Clone)]
pub struct ChainProblem {
    num_states: usize,
    horizon: usize,
    /// `horizon` kernels, each `N*N` row-major: `kernels[t][x*N + y] = q^t(y|x)`.
    kernels: Vec<Vec<f64>>,
    /// `horizon + 1` slices of `N` entries: `state_cost[t][x] = R(x,t)`;
    /// `+inf` forbids a state at that slice.
    state_cost: Vec<Vec<f64>>,
}

impl ChainProblem {
    pub fn new(
        num_states: usize,
        horizon: usize,
        kernels: Vec<Vec<f64>>,
        state_cost: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if num_states == 0 || horizon == 0 {
            return Err(Error::Domain("need at least one state and one step".into()));
        }
        if kernels.len() != horizon {
            return Err(Error::Shape(format!(
                "expected {} kernel slices, got {}",
                horizon,
                kernels.len()
            )));
        }
        if state_cost.len() != horizon + 1 {
            return Err(Error::Shape(format!(
                "expected {} cost slices, got {}",
                horizon + 1,
                state_cost.len()
            )));
        }
        for (t, k) in kernels.iter().enumerate() {
            if k.len() != num_states * num_states {
                return Err(Error::Shape(format!("kernel slice {t} has wrong size")));
            }
            for x in 0..num_states {
                let row = &k[x * num_states..(x + 1) * num_states];
                let mut sum = 0.0;
                for &v in row {
                    if v.is_nan() || v < 0.0 {
                        return Err(Error::Domain(format!(
                            "kernel slice {t} row {x} has a negative or NaN entry"
                        )));
                    }
                    sum += v;
                }
                if sum > 1.0 + ROW_SUM_TOL {
                    return Err(Error::Domain(format!(
                        "kernel slice {t} row {x} sums to {sum}, above 1"
                    )));
                }
            }
        }
        for (t, slice) in state_cost.iter().enumerate() {
            if slice.len() != num_states {
                return Err(Error::Shape(format!("cost slice {t} has wrong size")));
            }
            if slice.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
                return Err(Error::Domain(format!(
                    "cost slice {t} has a NaN or -inf entry"
                )));
            }
        }
        Ok(ChainProblem {
            num_states,
            horizon,
            kernels,
            state_cost,
        })
    }

    /// Same kernel at every step.
    pub fn time_homogeneous(
        num_states: usize,
        horizon: usize,
        kernel: Vec<f64>,
        state_cost: Vec<Vec<f64>>,
    ) -> Result<Self> {
        ChainProblem::new(
            num_states,
            horizon,
            vec![kernel; horizon],
            state_cost,
        )
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn kernel(&self, t: usize) -> &[f64] {
        &self.kernels[t]
    }

    pub fn q(&self, t: usize, x: usize, y: usize) -> f64 {
        self.kernels[t][x * self.num_states + y]
    }

    pub fn cost(&self, x: usize, t: usize) -> f64 {
        self.state_cost[t][x]
    }

    /// True when every kernel row sums to 1 within 1e-12 (no lost mass).
    pub fn is_stochastic(&self) -> bool {
        self.kernels.iter().all(|k| {
            (0..self.num_states).all(|x| {
                let s: f64 = k[x * self.num_states..(x + 1) * self.num_states]
                    .iter()
                    .sum();
                (s - 1.0).abs() <= ROW_SUM_TOL
            })
        })
    }
}

/// Pairwise potentials `psi^t(x,y) = q^t(y|x) exp(-R(y,t+1))`, stored in log
/// space, plus the start-slice cost kept out of the product.
#[derive(Debug, Clone)]
pub struct PairPotentialSet {
    num_states: usize,
    horizon: usize,
    log_psi: Vec<Vec<f64>>,
    initial_cost: Vec<f64>,
}

impl PairPotentialSet {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn log_psi(&self, t: usize, x: usize, y: usize) -> f64 {
        self.log_psi[t][x * self.num_states + y]
    }

    pub fn psi(&self, t: usize, x: usize, y: usize) -> f64 {
        self.log_psi(t, x, y).exp()
    }

    /// `R(x, 0)` per start state.
    pub fn initial_cost(&self) -> &[f64] {
        &self.initial_cost
    }
}

/// Backward messages `beta^t` and the per-start-state log partition sums.
#[derive(Debug, Clone)]
pub struct MessageSet {
    num_states: usize,
    horizon: usize,
    log_messages: Vec<Vec<f64>>,
    log_z: Vec<f64>,
}

impl MessageSet {
    pub fn log_message(&self, t: usize, x: usize) -> f64 {
        self.log_messages[t][x]
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// `log Z(x0)`, the negated optimal cost from `x0`; errors when no
    /// finite-cost trajectory leaves `x0`.
    pub fn log_z(&self, start: usize) -> Result<f64> {
        let v = self.log_z[start];
        if v == f64::NEG_INFINITY {
            Err(Error::NoFiniteCost(start))
        } else {
            Ok(v)
        }
    }

    /// Raw per-start-state `log Z` values (`-inf` where no trajectory is feasible).
    pub fn log_z_all(&self) -> &[f64] {
        &self.log_z
    }
}

/// Optimal control in explicit form.
#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub num_states: usize,
    pub horizon: usize,
    /// `step_distributions[t][x]` = `p(. | x^t = x)`, `None` off the reachable
    /// support (dead or forbidden states).
    pub step_distributions: Vec<Vec<Option<Vec<f64>>>>,
    /// `-log Z(start)`.
    pub optimal_cost: f64,
    /// `u^t_{xy} = log p/q` on the support of `q`; `None` where `q = 0`.
    pub control_matrix: Option<Vec<Vec<Option<f64>>>>,
}

/// `psi^t(x,y) = q^t(y|x) exp(-R(y,t+1))` for every step, in log space.
pub fn build_potentials(problem: &ChainProblem) -> PairPotentialSet {
    let n = problem.num_states;
    let mut log_psi = Vec::with_capacity(problem.horizon);
    for t in 0..problem.horizon {
        let mut slice = vec![f64::NEG_INFINITY; n * n];
        for x in 0..n {
            for y in 0..n {
                let q = problem.q(t, x, y);
                let r = problem.cost(y, t + 1);
                if q > 0.0 && r != f64::INFINITY {
                    slice[x * n + y] = q.ln() - r;
                }
            }
        }
        log_psi.push(slice);
    }
    PairPotentialSet {
        num_states: n,
        horizon: problem.horizon,
        log_psi,
        initial_cost: problem.state_cost[0].clone(),
    }
}

/// Backward recursion `beta^T = 1`, `beta^t(x) = sum_y psi^t(x,y) beta^{t+1}(y)`.
pub fn backward_pass(potentials: &PairPotentialSet) -> MessageSet {
    let n = potentials.num_states;
    let t_max = potentials.horizon;
    let mut log_messages = vec![vec![0.0; n]; t_max + 1];
    let mut scratch = vec![f64::NEG_INFINITY; n];
    for t in (0..t_max).rev() {
        for x in 0..n {
            for y in 0..n {
                scratch[y] = potentials.log_psi[t][x * n + y] + log_messages[t + 1][y];
            }
            log_messages[t][x] = logsumexp(&scratch);
        }
    }
    let log_z = (0..n)
        .map(|x| {
            let r0 = potentials.initial_cost[x];
            if r0 == f64::INFINITY {
                f64::NEG_INFINITY
            } else {
                log_messages[0][x] - r0
            }
        })
        .collect();
    MessageSet {
        num_states: n,
        horizon: t_max,
        log_messages,
        log_z,
    }
}

/// `p(y | x^t = state) ∝ psi^t(state, y) beta^{t+1}(y)`.
pub fn optimal_step_distribution(
    messages: &MessageSet,
    potentials: &PairPotentialSet,
    state: usize,
    time: usize,
) -> Result<Vec<f64>> {
    if time >= potentials.horizon {
        return Err(Error::Domain(format!(
            "time {time} out of range (horizon {})",
            potentials.horizon
        )));
    }
    let n = potentials.num_states;
    let mut logw: Vec<f64> = (0..n)
        .map(|y| potentials.log_psi[time][state * n + y] + messages.log_messages[time + 1][y])
        .collect();
    let z = logsumexp(&logw);
    if z == f64::NEG_INFINITY {
        return Err(Error::DeadState(format!(
            "state {state} at time {time} has no admissible successor"
        )));
    }
    for v in logw.iter_mut() {
        *v = (*v - z).exp();
    }
    Ok(logw)
}

/// Full solution from one start state: step distributions everywhere beta is
/// positive, the optimal cost, and (optionally filled later) the log-ratio
/// control matrix.
pub fn solve(problem: &ChainProblem, start: usize) -> Result<ControlSolution> {
    let potentials = build_potentials(problem);
    let messages = backward_pass(&potentials);
    let cost = -messages.log_z(start)?;
    let n = problem.num_states;
    let mut step_distributions = Vec::with_capacity(problem.horizon);
    for t in 0..problem.horizon {
        let mut slice = Vec::with_capacity(n);
        for x in 0..n {
            if messages.log_messages[t][x] == f64::NEG_INFINITY {
                slice.push(None);
            } else {
                slice.push(Some(optimal_step_distribution(
                    &messages,
                    &potentials,
                    x,
                    t,
                )?));
            }
        }
        step_distributions.push(slice);
    }
    Ok(ControlSolution {
        num_states: n,
        horizon: problem.horizon,
        step_distributions,
        optimal_cost: cost,
        control_matrix: None,
    })
}

/// Slice marginals of the optimal trajectory distribution from `start`
/// (slice 0 is the start delta), by forward composition of the optimal steps.
pub fn optimal_marginals(
    messages: &MessageSet,
    potentials: &PairPotentialSet,
    start: usize,
) -> Result<Vec<Vec<f64>>> {
    messages.log_z(start)?;
    let n = potentials.num_states;
    let mut out = Vec::with_capacity(potentials.horizon + 1);
    let mut cur = vec![0.0; n];
    cur[start] = 1.0;
    out.push(cur.clone());
    for t in 0..potentials.horizon {
        let mut next = vec![0.0; n];
        for x in 0..n {
            if cur[x] == 0.0 {
                continue;
            }
            let step = optimal_step_distribution(messages, potentials, x, t)?;
            for y in 0..n {
                next[y] += cur[x] * step[y];
            }
        }
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}

/// Independent dynamic-programming oracle: the value recursion
/// `J(x,T) = R(x,T)`, `J(x,t) = R(x,t) - log sum_y q^t(y|x) exp(-J(y,t+1))`.
/// `J(x,0)` must equal `-log Z(x)` from the message passing.
pub fn bellman_dp_oracle(problem: &ChainProblem) -> Vec<Vec<f64>> {
    let n = problem.num_states;
    let t_max = problem.horizon;
    let mut j = vec![vec![0.0; n]; t_max + 1];
    for x in 0..n {
        j[t_max][x] = problem.cost(x, t_max);
    }
    let mut scratch = vec![f64::NEG_INFINITY; n];
    for t in (0..t_max).rev() {
        for x in 0..n {
            for y in 0..n {
                let q = problem.q(t, x, y);
                scratch[y] = if q > 0.0 && j[t + 1][y] != f64::INFINITY {
                    q.ln() - j[t + 1][y]
                } else {
                    f64::NEG_INFINITY
                };
            }
            let soft = logsumexp(&scratch);
            j[t][x] = if soft == f64::NEG_INFINITY || problem.cost(x, t) == f64::INFINITY {
                f64::INFINITY
            } else {
                problem.cost(x, t) - soft
            };
        }
    }
    j
}

/// Brute-force ground truth: sums every trajectory explicitly.
pub struct EnumerationResult {
    pub z: f64,
    pub log_z: f64,
    /// `marginals[t][x]` of the optimal trajectory distribution.
    pub marginals: Vec<Vec<f64>>,
}

pub const DEFAULT_ENUMERATION_BUDGET: usize = 10_000_000;

/// Enumerate all `N^T` trajectories from `start`, accumulating the partition
/// sum and the per-slice marginals in log space. Errors when the path count
/// exceeds `budget`. Deterministic: fixed lexicographic order.
pub fn enumerate_oracle(
    problem: &ChainProblem,
    start: usize,
    budget: Option<usize>,
) -> Result<EnumerationResult> {
    let n = problem.num_states;
    let t_max = problem.horizon;
    let budget = budget.unwrap_or(DEFAULT_ENUMERATION_BUDGET);
    let mut paths: usize = 1;
    for _ in 0..t_max {
        paths = paths
            .checked_mul(n)
            .filter(|&p| p <= budget)
            .ok_or_else(|| {
                Error::Budget(format!(
                    "{n}^{t_max} trajectories exceed the enumeration budget {budget}"
                ))
            })?;
    }
    let r0 = problem.cost(start, 0);
    let mut log_z = f64::NEG_INFINITY;
    let mut log_cell = vec![vec![f64::NEG_INFINITY; n]; t_max + 1];
    let mut path = vec![0usize; t_max];
    for _ in 0..paths {
        // log weight of this trajectory
        let mut lw = -r0;
        let mut prev = start;
        for (t, &y) in path.iter().enumerate() {
            let q = problem.q(t, prev, y);
            let r = problem.cost(y, t + 1);
            if q == 0.0 || r == f64::INFINITY {
                lw = f64::NEG_INFINITY;
                break;
            }
            lw += q.ln() - r;
            prev = y;
        }
        if lw != f64::NEG_INFINITY {
            log_z = log_add(log_z, lw);
            log_cell[0][start] = log_add(log_cell[0][start], lw);
            for (t, &y) in path.iter().enumerate() {
                log_cell[t + 1][y] = log_add(log_cell[t + 1][y], lw);
            }
        }
        // lexicographic increment
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < n {
                break;
            }
            *slot = 0;
        }
    }
    if log_z == f64::NEG_INFINITY {
        return Err(Error::NoFiniteCost(start));
    }
    let marginals = log_cell
        .iter()
        .map(|slice| slice.iter().map(|&c| (c - log_z).exp()).collect())
        .collect();
    Ok(EnumerationResult {
        z: log_z.exp(),
        log_z,
        marginals,
    })
}

/// Expected cost `KL(p || q) + <sum_t R>` of an explicit trajectory
/// distribution `p(x^{1..T} | start)`, given as a flat table of length `N^T`
/// (lexicographic, `x^1` most significant). Includes the constant `R(start, 0)`.
pub fn kl_control_cost(
    trajectory_distribution: &[f64],
    problem: &ChainProblem,
    start: usize,
) -> Result<f64> {
    let n = problem.num_states;
    let t_max = problem.horizon;
    let mut expect: usize = 1;
    for _ in 0..t_max {
        expect = expect.checked_mul(n).ok_or_else(|| {
            Error::Budget("trajectory table too large to index".into())
        })?;
    }
    if trajectory_distribution.len() != expect {
        return Err(Error::Shape(format!(
            "trajectory table has {} entries, expected {}",
            trajectory_distribution.len(),
            expect
        )));
    }
    let total: f64 = trajectory_distribution.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Domain(format!(
            "trajectory distribution sums to {total}, not 1"
        )));
    }
    if trajectory_distribution.iter().any(|&p| p < 0.0 || p.is_nan()) {
        return Err(Error::Domain("negative or NaN trajectory probability".into()));
    }
    let r0 = problem.cost(start, 0);
    let mut cost = r0;
    let mut path = vec![0usize; t_max];
    for &p in trajectory_distribution {
        if p > 0.0 {
            // log psi along the path; -inf marks q-impossible or forbidden
            let mut log_psi = 0.0;
            let mut prev = start;
            for (t, &y) in path.iter().enumerate() {
                let q = problem.q(t, prev, y);
                if q == 0.0 {
                    return Err(Error::Support(format!(
                        "p places mass {p} on a transition with q = 0 at step {t}"
                    )));
                }
                let r = problem.cost(y, t + 1);
                log_psi += q.ln() - r;
                prev = y;
            }
            cost += p * (p.ln() - log_psi);
        }
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < n {
                break;
            }
            *slot = 0;
        }
    }
    Ok(cost)
}

/// Flat table of the optimal trajectory distribution `psi / Z` (same layout
/// as [`kl_control_cost`] expects). Small instances only.
pub fn optimal_trajectory_distribution(
    problem: &ChainProblem,
    start: usize,
    budget: Option<usize>,
) -> Result<Vec<f64>> {
    let n = problem.num_states;
    let t_max = problem.horizon;
    let budget = budget.unwrap_or(DEFAULT_ENUMERATION_BUDGET);
    let mut paths: usize = 1;
    for _ in 0..t_max {
        paths = paths
            .checked_mul(n)
            .filter(|&p| p <= budget)
            .ok_or_else(|| Error::Budget("trajectory table exceeds budget".into()))?;
    }
    let mut logw = vec![f64::NEG_INFINITY; paths];
    let mut path = vec![0usize; t_max];
    for slot in logw.iter_mut() {
        let mut lw = 0.0;
        let mut prev = start;
        for (t, &y) in path.iter().enumerate() {
            let q = problem.q(t, prev, y);
            let r = problem.cost(y, t + 1);
            if q == 0.0 || r == f64::INFINITY {
                lw = f64::NEG_INFINITY;
                break;
            }
            lw += q.ln() - r;
            prev = y;
        }
        *slot = lw;
        for s in path.iter_mut().rev() {
            *s += 1;
            if *s < n {
                break;
            }
            *s = 0;
        }
    }
    let z = logsumexp(&logw);
    if z == f64::NEG_INFINITY {
        return Err(Error::NoFiniteCost(start));
    }
    Ok(logw.into_iter().map(|lw| (lw - z).exp()).collect())
}

/// Log-ratio reparametrization `u^t_{xy} = log p^t(y|x) - log q^t(y|x)`,
/// defined on the support of `q` only; `None` elsewhere and on states without
/// a step distribution.
pub fn control_matrix(
    solution: &ControlSolution,
    problem: &ChainProblem,
) -> Vec<Vec<Option<f64>>> {
    let n = problem.num_states;
    let mut out = Vec::with_capacity(solution.horizon);
    for t in 0..solution.horizon {
        let mut slice = vec![None; n * n];
        for x in 0..n {
            if let Some(p) = &solution.step_distributions[t][x] {
                for y in 0..n {
                    let q = problem.q(t, x, y);
                    if q > 0.0 {
                        slice[x * n + y] = Some(if p[y] > 0.0 {
                            p[y].ln() - q.ln()
                        } else {
                            f64::NEG_INFINITY
                        });
                    }
                }
            }
        }
        out.push(slice);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2 states, 1 step, uniform kernel, R(.,1) = [0, ln 2].
    fn small_instance() -> ChainProblem {
        ChainProblem::new(
            2,
            1,
            vec![vec![0.5, 0.5, 0.5, 0.5]],
            vec![vec![0.0, 0.0], vec![0.0, (2.0f64).ln()]],
        )
        .unwrap()
    }

    #[test]
    fn potentials_two_state() {
        let ps = build_potentials(&small_instance());
        let expect = [[0.5, 0.25], [0.5, 0.25]];
        for x in 0..2 {
            for y in 0..2 {
                assert!((ps.psi(0, x, y) - expect[x][y]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn potentials_identity_when_cost_zero() {
        let p = ChainProblem::time_homogeneous(
            3,
            2,
            vec![0.2, 0.8, 0.0, 0.5, 0.25, 0.25, 0.0, 0.0, 1.0],
            vec![vec![0.0; 3]; 3],
        )
        .unwrap();
        let ps = build_potentials(&p);
        for t in 0..2 {
            for x in 0..3 {
                for y in 0..3 {
                    assert!((ps.psi(t, x, y) - p.q(t, x, y)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn backward_two_state() {
        let ps = build_potentials(&small_instance());
        let ms = backward_pass(&ps);
        let z = ms.log_z(0).unwrap().exp();
        assert!((z - 0.75).abs() < 1e-12);
        assert!((-ms.log_z(0).unwrap() - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn zero_cost_means_zero_log_z() {
        let p = ChainProblem::time_homogeneous(
            4,
            6,
            vec![0.25; 16],
            vec![vec![0.0; 4]; 7],
        )
        .unwrap();
        let ms = backward_pass(&build_potentials(&p));
        for x in 0..4 {
            assert!(ms.log_z(x).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn step_distribution_two_state() {
        let ps = build_potentials(&small_instance());
        let ms = backward_pass(&ps);
        let d = optimal_step_distribution(&ms, &ps, 0, 0).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_step_distribution_is_immediate_reward_softmin() {
        // uniform q, T = 1: the step law depends on the terminal cost only
        let n = 5;
        let costs = vec![0.3, 1.1, -0.4, 2.0, 0.0];
        let p = ChainProblem::new(
            n,
            1,
            vec![vec![1.0 / n as f64; n * n]],
            vec![vec![0.0; n], costs.clone()],
        )
        .unwrap();
        let ps = build_potentials(&p);
        let ms = backward_pass(&ps);
        let d = optimal_step_distribution(&ms, &ps, 2, 0).unwrap();
        let z: f64 = costs.iter().map(|r| (-r).exp()).sum();
        for y in 0..n {
            assert!((d[y] - (-costs[y]).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn bellman_matches_log_z() {
        let p = small_instance();
        let j = bellman_dp_oracle(&p);
        assert!((j[0][0] - 0.2876820724517809).abs() < 1e-12);
        let ms = backward_pass(&build_potentials(&p));
        assert!((j[0][0] + ms.log_z(0).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn bellman_zero_cost() {
        let p = ChainProblem::time_homogeneous(
            3,
            4,
            vec![1.0 / 3.0; 9],
            vec![vec![0.0; 3]; 5],
        )
        .unwrap();
        let j = bellman_dp_oracle(&p);
        for slice in &j {
            for &v in slice {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enumeration_two_state() {
        let r = enumerate_oracle(&small_instance(), 0, None).unwrap();
        assert!((r.z - 0.75).abs() < 1e-12);
    }

    #[test]
    fn enumeration_deterministic_kernel() {
        // permutation dynamics: a single trajectory exists
        let kernel = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let costs = vec![
            vec![0.1, 0.0, 0.0],
            vec![0.0, 0.7, 0.0],
            vec![0.0, 0.0, 0.2],
        ];
        let p = ChainProblem::time_homogeneous(3, 2, kernel, costs).unwrap();
        let r = enumerate_oracle(&p, 0, None).unwrap();
        assert!((r.log_z - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn enumeration_budget_enforced() {
        let p = ChainProblem::time_homogeneous(
            4,
            8,
            vec![1.0 / 16.0; 16],
            vec![vec![0.0; 4]; 9],
        )
        .unwrap();
        assert!(matches!(
            enumerate_oracle(&p, 0, Some(1000)),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn control_matrix_two_state() {
        let p = small_instance();
        let sol = solve(&p, 0).unwrap();
        let u = control_matrix(&sol, &p);
        let u00 = u[0][0].unwrap();
        let u01 = u[0][1].unwrap();
        assert!((u00 - (4.0 / 3.0f64).ln()).abs() < 1e-12);
        assert!((u01 - (2.0 / 3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn control_matrix_zero_when_uncontrolled() {
        let p = ChainProblem::time_homogeneous(
            3,
            3,
            vec![1.0 / 3.0; 9],
            vec![vec![0.0; 3]; 4],
        )
        .unwrap();
        let sol = solve(&p, 1).unwrap();
        let u = control_matrix(&sol, &p);
        for slice in &u {
            for v in slice.iter().flatten() {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_cost_of_optimum_is_neg_log_z() {
        let p = small_instance();
        let opt = optimal_trajectory_distribution(&p, 0, None).unwrap();
        let c = kl_control_cost(&opt, &p, 0).unwrap();
        let ms = backward_pass(&build_potentials(&p));
        assert!((c + ms.log_z(0).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn kl_cost_zero_for_free_dynamics() {
        // p = q path distribution, R = 0 -> KL(q||q) = 0
        let kernel = vec![0.3, 0.7, 0.6, 0.4];
        let p = ChainProblem::time_homogeneous(2, 2, kernel.clone(), vec![vec![0.0; 2]; 3])
            .unwrap();
        let mut table = vec![0.0; 4];
        for y1 in 0..2 {
            for y2 in 0..2 {
                table[y1 * 2 + y2] = kernel[y1] * kernel[y1 * 2 + y2];
            }
        }
        let c = kl_control_cost(&table, &p, 0).unwrap();
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn kl_cost_rejects_support_violation() {
        let kernel = vec![1.0, 0.0, 0.5, 0.5];
        let p = ChainProblem::time_homogeneous(2, 1, kernel, vec![vec![0.0; 2]; 2]).unwrap();
        let err = kl_control_cost(&[0.5, 0.5], &p, 0);
        assert!(matches!(err, Err(Error::Support(_))));
    }

    #[test]
    fn forbidden_states_are_exact_zeros() {
        let inf = f64::INFINITY;
        let p = ChainProblem::time_homogeneous(
            2,
            2,
            vec![0.5, 0.5, 0.5, 0.5],
            vec![vec![0.0, 0.0], vec![0.0, inf], vec![0.0, inf]],
        )
        .unwrap();
        let ps = build_potentials(&p);
        assert_eq!(ps.log_psi(0, 0, 1), f64::NEG_INFINITY);
        let ms = backward_pass(&ps);
        // only the all-zeros path survives: Z = 0.5 * 0.5
        assert!((ms.log_z(0).unwrap() - (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_super_stochastic_rows() {
        assert!(ChainProblem::time_homogeneous(
            2,
            1,
            vec![0.8, 0.5, 0.5, 0.5],
            vec![vec![0.0; 2]; 2]
        )
        .is_err());
    }

    #[test]
    fn accepts_substochastic_rows() {
        // lost mass behaves as an implicit sink
        let p = ChainProblem::time_homogeneous(
            2,
            2,
            vec![0.25, 0.25, 0.0, 0.5],
            vec![vec![0.0; 2]; 3],
        )
        .unwrap();
        let ms = backward_pass(&build_potentials(&p));
        let r = enumerate_oracle(&p, 0, None).unwrap();
        assert!((ms.log_z(0).unwrap() - r.log_z).abs() < 1e-12);
        let j = bellman_dp_oracle(&p);
        assert!((j[0][0] + r.log_z).abs() < 1e-12);
    }

    #[test]
    fn log_domain_survives_huge_costs() {
        let p = ChainProblem::time_homogeneous(
            3,
            30,
            vec![1.0 / 3.0; 9],
            vec![vec![1000.0, 2000.0, 1500.0]; 31],
        )
        .unwrap();
        let ms = backward_pass(&build_potentials(&p));
        let lz = ms.log_z(0).unwrap();
        assert!(lz.is_finite());
        let j = bellman_dp_oracle(&p);
        assert!((j[0][0] + lz).abs() < 1e-6 * lz.abs());
    }
}
