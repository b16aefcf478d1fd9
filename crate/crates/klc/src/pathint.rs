//! Discrete-time path-integral control: linear-Gaussian transitions where the
//! control shifts the mean. The KL between controlled and uncontrolled
//! transitions is the quadratic control energy, so the trajectory cost is
//! `sum_t 1/2 u^T nu^{-1} u + sum_t R(x^t, t)` and the optimal cost
//! `-log Z` can be estimated by forward sampling of the free dynamics.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::logsumexp::pairwise_sum;

const SYMMETRY_TOL: f64 = 1e-12;

/// Deterministic drift term `f(x, t)`.
#[derive(Clone)]
pub enum Drift {
    Zero,
    /// `x -> A x`, row-major `d x d`.
    Linear(Vec<f64>),
    Custom(Arc<dyn Fn(&[f64], usize) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for Drift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Drift::Zero => write!(f, "Drift::Zero"),
            Drift::Linear(a) => write!(f, "Drift::Linear({a:?})"),
            Drift::Custom(_) => write!(f, "Drift::Custom(..)"),
        }
    }
}

/// Transition model `x^{t+1} = x^t + f(x^t, t) + u^t + xi`,
/// `xi ~ N(0, nu)`.
#[derive(Debug, Clone)]
pub struct ContinuousDynamics {
    dimension: usize,
    drift: Drift,
    /// Row-major symmetric positive definite noise covariance.
    noise: Vec<f64>,
    /// Lower Cholesky factor of `noise`.
    chol: Vec<f64>,
}

impl ContinuousDynamics {
    pub fn new(dimension: usize, drift: Drift, noise: Vec<f64>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Domain("dimension must be positive".into()));
        }
        if noise.len() != dimension * dimension {
            return Err(Error::Shape(format!(
                "noise covariance has {} entries for dimension {dimension}",
                noise.len()
            )));
        }
        if let Drift::Linear(a) = &drift {
            if a.len() != dimension * dimension {
                return Err(Error::Shape("drift matrix has the wrong size".into()));
            }
        }
        for i in 0..dimension {
            for j in 0..i {
                if (noise[i * dimension + j] - noise[j * dimension + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::Domain(format!(
                        "noise covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let chol = cholesky(&noise, dimension)?;
        Ok(ContinuousDynamics {
            dimension,
            drift,
            noise,
            chol,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn drift_at(&self, x: &[f64], t: usize) -> Vec<f64> {
        match &self.drift {
            Drift::Zero => vec![0.0; self.dimension],
            Drift::Linear(a) => {
                let d = self.dimension;
                (0..d)
                    .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum())
                    .collect()
            }
            Drift::Custom(f) => {
                let out = f(x, t);
                debug_assert_eq!(out.len(), self.dimension);
                out
            }
        }
    }

    /// `nu^{-1} v` by forward/backward substitution on the Cholesky factor.
    pub fn solve_noise(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dimension;
        let l = &self.chol;
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = v[i];
            for j in 0..i {
                s -= l[i * d + j] * y[j];
            }
            y[i] = s / l[i * d + i];
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let mut s = y[i];
            for j in (i + 1)..d {
                s -= l[j * d + i] * x[j];
            }
            x[i] = s / l[i * d + i];
        }
        x
    }

    /// `v^T nu^{-1} v`.
    pub fn quad_form_inv(&self, v: &[f64]) -> f64 {
        let w = self.solve_noise(v);
        v.iter().zip(&w).map(|(a, b)| a * b).sum()
    }

    /// `log det nu` from the Cholesky factor.
    pub fn log_det_noise(&self) -> f64 {
        let d = self.dimension;
        (0..d).map(|i| 2.0 * self.chol[i * d + i].ln()).sum()
    }

    /// Draw `xi ~ N(0, nu)` as `L z`.
    fn sample_noise<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dimension;
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d)
            .map(|i| (0..=i).map(|j| self.chol[i * d + j] * z[j]).sum())
            .collect()
    }
}

fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Domain(format!(
                        "noise covariance is not positive definite (pivot {i})"
                    )));
                }
                l[i * d + j] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// State cost attached to time slices.
#[derive(Clone)]
pub enum StateCost {
    Zero,
    /// `1/2 alpha |x|^2` at the terminal slice only.
    QuadraticTerminal { alpha: f64 },
    Custom(Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for StateCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateCost::Zero => write!(f, "StateCost::Zero"),
            StateCost::QuadraticTerminal { alpha } => {
                write!(f, "StateCost::QuadraticTerminal {{ alpha: {alpha} }}")
            }
            StateCost::Custom(_) => write!(f, "StateCost::Custom(..)"),
        }
    }
}

/// A path-integral problem over `horizon` transitions.
#[derive(Debug, Clone)]
pub struct PathProblem {
    pub dynamics: ContinuousDynamics,
    pub horizon: usize,
    pub state_cost: StateCost,
}

impl PathProblem {
    pub fn new(dynamics: ContinuousDynamics, horizon: usize, state_cost: StateCost) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Domain("horizon must be positive".into()));
        }
        Ok(PathProblem {
            dynamics,
            horizon,
            state_cost,
        })
    }

    pub fn cost_at(&self, x: &[f64], t: usize) -> f64 {
        match &self.state_cost {
            StateCost::Zero => 0.0,
            StateCost::QuadraticTerminal { alpha } => {
                if t == self.horizon {
                    0.5 * alpha * x.iter().map(|v| v * v).sum::<f64>()
                } else {
                    0.0
                }
            }
            StateCost::Custom(f) => f(x, t),
        }
    }
}

/// Open-loop control schedule, one vector per transition.
#[derive(Debug, Clone)]
pub struct ControlSchedule {
    pub controls: Vec<Vec<f64>>,
}

impl ControlSchedule {
    pub fn new(controls: Vec<Vec<f64>>) -> Self {
        ControlSchedule { controls }
    }

    pub fn constant(u: Vec<f64>, horizon: usize) -> Self {
        ControlSchedule {
            controls: vec![u; horizon],
        }
    }

    fn validate(&self, problem: &PathProblem) -> Result<()> {
        if self.controls.len() != problem.horizon {
            return Err(Error::Shape(format!(
                "schedule has {} controls for horizon {}",
                self.controls.len(),
                problem.horizon
            )));
        }
        for u in &self.controls {
            if u.len() != problem.dynamics.dimension() {
                return Err(Error::Shape("control vector has the wrong dimension".into()));
            }
        }
        Ok(())
    }
}

/// Log-ratio of the controlled to the uncontrolled transition density:
/// `(y - x - f(x,t))^T nu^{-1} u - 1/2 u^T nu^{-1} u`. The quadratic control
/// energy is its expectation under the controlled transition.
pub fn u_matrix_exponent(
    dynamics: &ContinuousDynamics,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    t: usize,
) -> f64 {
    let f = dynamics.drift_at(x, t);
    let resid: Vec<f64> = y
        .iter()
        .zip(x)
        .zip(&f)
        .map(|((yi, xi), fi)| yi - xi - fi)
        .collect();
    let nu_inv_u = dynamics.solve_noise(u);
    let lin: f64 = resid.iter().zip(&nu_inv_u).map(|(r, w)| r * w).sum();
    let quad: f64 = u.iter().zip(&nu_inv_u).map(|(a, b)| a * b).sum();
    lin - 0.5 * quad
}

/// Log-density of `y` under the transition from `x` with control `u`.
pub fn log_transition_density(
    dynamics: &ContinuousDynamics,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    t: usize,
) -> f64 {
    let d = dynamics.dimension();
    let f = dynamics.drift_at(x, t);
    let resid: Vec<f64> = (0..d).map(|i| y[i] - x[i] - f[i] - u[i]).collect();
    let quad = dynamics.quad_form_inv(&resid);
    -0.5 * quad
        - 0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * dynamics.log_det_noise()
}

/// Cost estimate of a fixed control schedule: the exact quadratic control
/// term plus a Monte Carlo average of the state costs along controlled
/// trajectories.
#[derive(Debug, Clone)]
pub struct CostEstimate {
    pub control_cost: f64,
    pub state_cost: f64,
    pub total: f64,
    /// Standard error of the sampled state-cost mean.
    pub standard_error: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of the optimal cost `-log Z(x^0)`.
#[derive(Debug, Clone)]
pub struct OptimalCostEstimate {
    pub cost: f64,
    /// Delta-method standard error of `-log Z`.
    pub standard_error: f64,
    pub samples: usize,
}

fn spawn_threads(samples: usize, threads: usize) -> Vec<(usize, usize)> {
    let threads = threads.max(1).min(samples.max(1));
    let base = samples / threads;
    let extra = samples % threads;
    let mut out = Vec::with_capacity(threads);
    let mut start = 0;
    for i in 0..threads {
        let len = base + usize::from(i < extra);
        out.push((start, len));
        start += len;
    }
    out
}

/// Per-trajectory generator seeded on a common key with one stream per
/// trajectory index, so results do not depend on the thread partition.
fn trajectory_rng(seed: u64, index: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn simulate_state_cost(
    problem: &PathProblem,
    x0: &[f64],
    controls: Option<&[Vec<f64>]>,
    rng: &mut ChaCha12Rng,
) -> f64 {
    let d = problem.dynamics.dimension();
    let mut x = x0.to_vec();
    let mut total = 0.0;
    for t in 0..problem.horizon {
        let f = problem.dynamics.drift_at(&x, t);
        let xi = problem.dynamics.sample_noise(rng);
        for i in 0..d {
            x[i] += f[i] + xi[i];
            if let Some(us) = controls {
                x[i] += us[t][i];
            }
        }
        total += problem.cost_at(&x, t + 1);
    }
    total
}

/// Per-trajectory sums of the state costs `sum_{t>=1} R(x^t, t)` along
/// sampled trajectories, controlled when a schedule is given and free
/// otherwise. Trajectory `i` always uses generator stream `i`, so the result
/// is independent of the thread partition.
pub fn sample_path_costs(
    problem: &PathProblem,
    schedule: Option<&ControlSchedule>,
    x0: &[f64],
    samples: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    if let Some(s) = schedule {
        s.validate(problem)?;
    }
    if x0.len() != problem.dynamics.dimension() {
        return Err(Error::Shape("start state has the wrong dimension".into()));
    }
    if samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let controls = schedule.map(|s| s.controls.as_slice());
    let mut costs = vec![0.0f64; samples];
    run_partitioned(&mut costs, threads, |index, slot| {
        let mut rng = trajectory_rng(seed, index);
        *slot = simulate_state_cost(problem, x0, controls, &mut rng);
    });
    Ok(costs)
}

/// Expected cost of a schedule from `x0`:
/// `sum_t 1/2 u_t^T nu^{-1} u_t` exactly, plus the sampled mean of
/// `sum_{t>=1} R(x^t, t)`; the start-slice cost enters deterministically.
pub fn expected_cost(
    problem: &PathProblem,
    schedule: &ControlSchedule,
    x0: &[f64],
    samples: usize,
    seed: u64,
    threads: usize,
) -> Result<CostEstimate> {
    let costs = sample_path_costs(problem, Some(schedule), x0, samples, seed, threads)?;
    let control_cost: f64 = schedule
        .controls
        .iter()
        .map(|u| 0.5 * problem.dynamics.quad_form_inv(u))
        .sum();
    let mean = pairwise_sum(&costs) / samples as f64;
    let sq: Vec<f64> = costs.iter().map(|c| (c - mean) * (c - mean)).collect();
    let var = if samples > 1 {
        pairwise_sum(&sq) / (samples as f64 - 1.0)
    } else {
        0.0
    };
    let state_cost = problem.cost_at(x0, 0) + mean;
    Ok(CostEstimate {
        control_cost,
        state_cost,
        total: control_cost + state_cost,
        standard_error: (var / samples as f64).sqrt(),
        samples,
    })
}

/// Estimate `-log Z(x^0)` by sampling the free dynamics and averaging the
/// importance weights `exp(-path cost)`; the standard error comes from the
/// delta method, `sd(w) / (sqrt(n) mean(w))`.
pub fn mc_optimal_cost(
    problem: &PathProblem,
    x0: &[f64],
    samples: usize,
    seed: u64,
    threads: usize,
) -> Result<OptimalCostEstimate> {
    let costs = sample_path_costs(problem, None, x0, samples, seed, threads)?;
    let weights: Vec<f64> = costs.iter().map(|c| (-c).exp()).collect();
    let mean = pairwise_sum(&weights) / samples as f64;
    if !(mean > 0.0) {
        return Err(Error::Estimation(
            "every importance weight vanished; the free dynamics never reach \
             the rewarded region"
                .into(),
        ));
    }
    let sq: Vec<f64> = weights.iter().map(|w| (w - mean) * (w - mean)).collect();
    let var = if samples > 1 {
        pairwise_sum(&sq) / (samples as f64 - 1.0)
    } else {
        0.0
    };
    let se = var.sqrt() / (samples as f64).sqrt() / mean;
    Ok(OptimalCostEstimate {
        cost: problem.cost_at(x0, 0) - mean.ln(),
        standard_error: se,
        samples,
    })
}

/// Run `fill(index, &mut slot)` for every slot, partitioned across threads.
/// Each index gets its own generator stream, so any partition gives the same
/// result.
fn run_partitioned<F>(slots: &mut [f64], threads: usize, fill: F)
where
    F: Fn(usize, &mut f64) + Sync,
{
    let parts = spawn_threads(slots.len(), threads);
    if parts.len() <= 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            fill(i, slot);
        }
        return;
    }
    // split the slice into disjoint chunks matching the partition
    std::thread::scope(|scope| {
        let mut rest = slots;
        let mut offset = 0;
        for (start, len) in parts {
            debug_assert_eq!(start, offset);
            let (chunk, tail) = rest.split_at_mut(len);
            rest = tail;
            offset += len;
            let fill = &fill;
            scope.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    fill(start + j, slot);
                }
            });
        }
    });
}

/// Closed-form optimal cost of the one-dimensional problem with free
/// dynamics `x^{t+1} = x^t + xi`, unit noise, and terminal cost
/// `1/2 alpha x^2`: the terminal state is `N(x0, T)`, so
/// `-log Z = 1/2 log(1 + alpha T) + alpha x0^2 / (2 (1 + alpha T))`.
pub fn one_d_quadratic_cost(alpha: f64, x0: f64, horizon: usize) -> f64 {
    let t = horizon as f64;
    0.5 * (1.0 + alpha * t).ln() + alpha * x0 * x0 / (2.0 * (1.0 + alpha * t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spd(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
        // A A^T + d I
        let a: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += a[i * d + k] * a[j * d + k];
                }
                out[i * d + j] = s + if i == j { d as f64 } else { 0.0 };
            }
        }
        out
    }

    #[test]
    fn exponent_is_the_density_log_ratio() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..100 {
            let d = rng.gen_range(1..4);
            let noise = random_spd(&mut rng, d);
            let drift: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let dynamics = ContinuousDynamics::new(d, Drift::Linear(drift), noise).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let zero = vec![0.0; d];
            let lhs = u_matrix_exponent(&dynamics, &x, &y, &u, 0);
            let rhs = log_transition_density(&dynamics, &x, &y, &u, 0)
                - log_transition_density(&dynamics, &x, &y, &zero, 0);
            assert!((lhs - rhs).abs() < 1e-10, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn expected_cost_one_step_quadratic() {
        // constant control c over one step with terminal cost a x^2 / 2:
        // E = c^2/2 + a ((x0 + c)^2 + 1) / 2
        let dynamics = ContinuousDynamics::new(1, Drift::Zero, vec![1.0]).unwrap();
        let problem =
            PathProblem::new(dynamics, 1, StateCost::QuadraticTerminal { alpha: 0.7 }).unwrap();
        let c = 0.9;
        let x0 = [0.4];
        let schedule = ControlSchedule::constant(vec![c], 1);
        let est = expected_cost(&problem, &schedule, &x0, 200_000, 5, 4).unwrap();
        let expect_control = 0.5 * c * c;
        let expect_state = 0.5 * 0.7 * ((x0[0] + c) * (x0[0] + c) + 1.0);
        assert_eq!(est.control_cost, expect_control);
        assert!(
            (est.state_cost - expect_state).abs() < 4.0 * est.standard_error,
            "state {} expect {expect_state} se {}",
            est.state_cost,
            est.standard_error
        );
    }

    #[test]
    fn mc_matches_closed_form() {
        let alpha = 1.3;
        let x0 = 0.8;
        let horizon = 4;
        let dynamics = ContinuousDynamics::new(1, Drift::Zero, vec![1.0]).unwrap();
        let problem =
            PathProblem::new(dynamics, horizon, StateCost::QuadraticTerminal { alpha }).unwrap();
        let est = mc_optimal_cost(&problem, &[x0], 100_000, 7, 4).unwrap();
        let closed = one_d_quadratic_cost(alpha, x0, horizon);
        assert!(
            (est.cost - closed).abs() < 3.0 * est.standard_error,
            "mc {} closed {closed} se {}",
            est.cost,
            est.standard_error
        );
        assert!(est.standard_error < 0.02);
    }

    #[test]
    fn zero_cost_gives_exact_zero() {
        let dynamics = ContinuousDynamics::new(2, Drift::Zero, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let problem = PathProblem::new(dynamics, 3, StateCost::Zero).unwrap();
        let est = mc_optimal_cost(&problem, &[0.0, 0.0], 1000, 1, 2).unwrap();
        assert_eq!(est.cost, 0.0);
        assert_eq!(est.standard_error, 0.0);
    }

    #[test]
    fn thread_count_does_not_change_the_estimate() {
        let dynamics = ContinuousDynamics::new(1, Drift::Zero, vec![0.5]).unwrap();
        let problem =
            PathProblem::new(dynamics, 3, StateCost::QuadraticTerminal { alpha: 2.0 }).unwrap();
        let a = mc_optimal_cost(&problem, &[1.0], 10_000, 99, 1).unwrap();
        let b = mc_optimal_cost(&problem, &[1.0], 10_000, 99, 7).unwrap();
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.standard_error, b.standard_error);
    }

    #[test]
    fn error_shrinks_like_root_n() {
        let dynamics = ContinuousDynamics::new(1, Drift::Zero, vec![1.0]).unwrap();
        let problem =
            PathProblem::new(dynamics, 2, StateCost::QuadraticTerminal { alpha: 1.0 }).unwrap();
        let ns = [1_000usize, 10_000, 100_000];
        let ses: Vec<f64> = ns
            .iter()
            .map(|&n| {
                mc_optimal_cost(&problem, &[0.5], n, 3, 4)
                    .unwrap()
                    .standard_error
            })
            .collect();
        let slope = (ses[2].ln() - ses[0].ln()) / ((ns[2] as f64).ln() - (ns[0] as f64).ln());
        assert!(
            (-0.7..=-0.3).contains(&slope),
            "slope {slope}, ses {ses:?}"
        );
    }

    #[test]
    fn vanishing_weights_are_reported() {
        // a cost of +inf on every path kills all weights
        let dynamics = ContinuousDynamics::new(1, Drift::Zero, vec![1.0]).unwrap();
        let cost = StateCost::Custom(Arc::new(|_x: &[f64], _t: usize| f64::INFINITY));
        let problem = PathProblem::new(dynamics, 2, cost).unwrap();
        let err = mc_optimal_cost(&problem, &[0.0], 100, 1, 1);
        assert!(matches!(err, Err(Error::Estimation(_))));
    }

    #[test]
    fn rejects_bad_covariances() {
        assert!(ContinuousDynamics::new(2, Drift::Zero, vec![1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(ContinuousDynamics::new(2, Drift::Zero, vec![1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(ContinuousDynamics::new(1, Drift::Zero, vec![-1.0]).is_err());
    }

    #[test]
    fn drift_moves_the_mean() {
        // x' = x + 0.5 x + u: one step from x0=1 with u=0 has mean 1.5
        let dynamics = ContinuousDynamics::new(1, Drift::Linear(vec![0.5]), vec![1e-8]).unwrap();
        let problem = PathProblem::new(
            dynamics,
            1,
            StateCost::Custom(Arc::new(|x: &[f64], t: usize| {
                if t == 1 {
                    x[0]
                } else {
                    0.0
                }
            })),
        )
        .unwrap();
        let schedule = ControlSchedule::constant(vec![0.0], 1);
        let est = expected_cost(&problem, &schedule, &[1.0], 100, 11, 1).unwrap();
        assert!((est.state_cost - 1.5).abs() < 1e-3);
    }
}
