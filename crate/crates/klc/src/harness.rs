//! Experiment runner shared by the command-line front end: structured-text
//! problem files, solver dispatch, and persistent results.
//!
//! A problem file is TOML with a top-level `kind` (`chain`, `factored`,
//! `blocks`, or `path-integral`), an optional `[solver]` table, and one table
//! of kind-specific parameters. Every run writes its artifacts and a
//! `manifest.json` into an output directory, each file through a temp-then-
//! rename step so readers never see partial output. Marginal tables use one
//! CSV schema everywhere (`variable,slice,index,probability`) so any two runs
//! over the same variables can be compared.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{self, BlocksConfig, BlocksSolver, MoveOverride};
use crate::chain::{self, ChainProblem};
use crate::cvm::{DoubleLoop, DoubleLoopOptions, RegionGraph};
use crate::error::{Error, Result};
use crate::factored::{factor_graph_from_text, FactorGraph};
use crate::pathint::{
    expected_cost, mc_optimal_cost, sample_path_costs, ContinuousDynamics, ControlSchedule,
    Drift, PathProblem, StateCost,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MARGINALS_FILE: &str = "marginals.csv";

const ENUMERATION_BUDGET: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Chain,
    Factored,
    Blocks,
    PathIntegral,
}

impl ProblemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKind::Chain => "chain",
            ProblemKind::Factored => "factored",
            ProblemKind::Blocks => "blocks",
            ProblemKind::PathIntegral => "path-integral",
        }
    }
}

/// Solver selection from the `[solver]` table; the options only matter for
/// the variational solver.
#[derive(Debug, Clone)]
pub struct SolverSpec {
    pub name: String,
    pub cvm: DoubleLoopOptions,
}

/// Kind-specific payload, already validated and ready to solve.
#[derive(Debug, Clone)]
pub enum Payload {
    Chain {
        problem: ChainProblem,
        start: usize,
    },
    Factored {
        graph: FactorGraph,
    },
    Blocks {
        config: BlocksConfig,
    },
    PathIntegral {
        problem: PathProblem,
        start: Vec<f64>,
        samples: usize,
        control: Option<Vec<f64>>,
    },
}

/// A parsed problem file.
#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub kind: ProblemKind,
    pub seed: u64,
    pub solver: SolverSpec,
    pub payload: Payload,
    /// Unknown keys found in lenient mode, for the caller to surface.
    pub warnings: Vec<String>,
    /// `sha256:` hash of the file bytes.
    pub digest: String,
    pub source: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    NonConverged,
    Error,
}

impl RunStatus {
    /// Process exit code: 0 for success, 3 when an iterative solver stopped
    /// short of tolerance, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::NonConverged => 3,
            RunStatus::Error => 1,
        }
    }
}

/// What a run leaves behind next to its artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub input: String,
    pub input_digest: String,
    pub kind: String,
    pub solver: String,
    pub solver_options: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub status: RunStatus,
    pub diagnostic: Option<String>,
    pub optimal_cost: Option<f64>,
    pub standard_error: Option<f64>,
    /// File names relative to the manifest's directory; all exist by the
    /// time the manifest does.
    pub artifacts: Vec<String>,
    pub wall_seconds: f64,
    pub peak_memory_bytes: Option<u64>,
}

/// Command-line overrides threaded into a run.
#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub seed: Option<u64>,
    pub threads: usize,
    pub solver: Option<String>,
    /// Emit per-location graymap images (blocks runs).
    pub graymaps: bool,
    /// Dump per-trajectory costs (path-integral runs).
    pub dump_samples: bool,
    pub samples: Option<usize>,
}

// ---------------------------------------------------------------------------
// problem-file schema

enum Schema {
    Leaf,
    Table(&'static [(&'static str, Schema)]),
}

const SOLVER_SCHEMA: &[(&str, Schema)] = &[
    ("name", Schema::Leaf),
    ("max_outer", Schema::Leaf),
    ("outer_tolerance", Schema::Leaf),
    ("inner_iterations", Schema::Leaf),
    ("inner_tolerance", Schema::Leaf),
    ("damping", Schema::Leaf),
];

const CHAIN_SCHEMA: &[(&str, Schema)] = &[
    ("horizon", Schema::Leaf),
    ("start", Schema::Leaf),
    ("kernel", Schema::Leaf),
    ("kernels", Schema::Leaf),
    ("cost", Schema::Leaf),
];

const BLOCKS_SCHEMA: &[(&str, Schema)] = &[
    ("locations", Schema::Leaf),
    ("blocks", Schema::Leaf),
    ("horizon", Schema::Leaf),
    ("lambda", Schema::Leaf),
    ("initial", Schema::Leaf),
];

const FACTORED_SCHEMA: &[(&str, Schema)] = &[("graph", Schema::Leaf)];

const STATE_COST_SCHEMA: &[(&str, Schema)] = &[("kind", Schema::Leaf), ("alpha", Schema::Leaf)];

const PATH_SCHEMA: &[(&str, Schema)] = &[
    ("dimension", Schema::Leaf),
    ("horizon", Schema::Leaf),
    ("start", Schema::Leaf),
    ("noise", Schema::Leaf),
    ("drift", Schema::Leaf),
    ("state_cost", Schema::Table(STATE_COST_SCHEMA)),
    ("samples", Schema::Leaf),
    ("control", Schema::Leaf),
];

const TOP_SCHEMA: &[(&str, Schema)] = &[
    ("kind", Schema::Leaf),
    ("seed", Schema::Leaf),
    ("solver", Schema::Table(SOLVER_SCHEMA)),
    ("chain", Schema::Table(CHAIN_SCHEMA)),
    ("blocks", Schema::Table(BLOCKS_SCHEMA)),
    ("factored", Schema::Table(FACTORED_SCHEMA)),
    ("path-integral", Schema::Table(PATH_SCHEMA)),
];

fn collect_unknown_keys(
    table: &toml::map::Map<String, toml::Value>,
    schema: &'static [(&'static str, Schema)],
    prefix: &str,
    out: &mut Vec<String>,
) {
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match schema.iter().find(|(name, _)| name == key) {
            None => out.push(path),
            Some((_, Schema::Table(sub))) => {
                if let toml::Value::Table(inner) = value {
                    collect_unknown_keys(inner, sub, &path, out);
                }
            }
            Some((_, Schema::Leaf)) => {}
        }
    }
}

#[derive(Deserialize)]
struct RawProblem {
    kind: String,
    seed: Option<u64>,
    solver: Option<RawSolver>,
    chain: Option<RawChain>,
    blocks: Option<RawBlocks>,
    factored: Option<RawFactored>,
    #[serde(rename = "path-integral")]
    path_integral: Option<RawPath>,
}

#[derive(Deserialize)]
struct RawSolver {
    name: Option<String>,
    max_outer: Option<usize>,
    outer_tolerance: Option<f64>,
    inner_iterations: Option<usize>,
    inner_tolerance: Option<f64>,
    damping: Option<f64>,
}

#[derive(Deserialize)]
struct RawChain {
    horizon: usize,
    start: usize,
    kernel: Option<Vec<Vec<f64>>>,
    kernels: Option<Vec<Vec<Vec<f64>>>>,
    cost: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawBlocks {
    locations: usize,
    blocks: usize,
    horizon: usize,
    lambda: f64,
    initial: Option<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawFactored {
    graph: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawDrift {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Deserialize)]
struct RawStateCost {
    kind: String,
    alpha: Option<f64>,
}

#[derive(Deserialize)]
struct RawPath {
    dimension: usize,
    horizon: usize,
    start: Vec<f64>,
    noise: Vec<Vec<f64>>,
    drift: Option<RawDrift>,
    state_cost: Option<RawStateCost>,
    samples: Option<usize>,
    control: Option<Vec<f64>>,
}

fn flatten_square(rows: &[Vec<f64>], n: usize, what: &str) -> Result<Vec<f64>> {
    if rows.len() != n {
        return Err(Error::Shape(format!(
            "{what} has {} rows, expected {n}",
            rows.len()
        )));
    }
    let mut out = Vec::with_capacity(n * n);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Shape(format!(
                "{what} row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        out.extend_from_slice(row);
    }
    Ok(out)
}

fn default_solver_name(kind: ProblemKind) -> &'static str {
    match kind {
        ProblemKind::Chain => "exact",
        ProblemKind::Blocks => "exact",
        ProblemKind::Factored => "cvm",
        ProblemKind::PathIntegral => "monte-carlo",
    }
}

/// Parse and validate a problem file. In strict mode unknown keys are an
/// error; otherwise they are returned as warnings.
pub fn load_problem(path: &Path, strict: bool) -> Result<ProblemFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let digest = format!("sha256:{}", sha256_hex(text.as_bytes()));

    let value: toml::Value = text
        .parse()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut unknown = Vec::new();
    if let toml::Value::Table(table) = &value {
        collect_unknown_keys(table, TOP_SCHEMA, "", &mut unknown);
    }
    if strict && !unknown.is_empty() {
        return Err(Error::Parse(format!(
            "{}: unknown keys: {}",
            path.display(),
            unknown.join(", ")
        )));
    }
    let warnings: Vec<String> = unknown
        .into_iter()
        .map(|k| format!("unknown key `{k}`"))
        .collect();

    let raw: RawProblem = toml::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;

    let kind = match raw.kind.as_str() {
        "chain" => ProblemKind::Chain,
        "factored" => ProblemKind::Factored,
        "blocks" => ProblemKind::Blocks,
        "path-integral" => ProblemKind::PathIntegral,
        other => {
            return Err(Error::Parse(format!(
                "{}: unknown kind `{other}` (expected chain, factored, blocks, \
                 or path-integral)",
                path.display()
            )))
        }
    };

    let mut cvm = DoubleLoopOptions::default();
    let mut solver_name = default_solver_name(kind).to_string();
    if let Some(s) = &raw.solver {
        if let Some(name) = &s.name {
            solver_name = name.clone();
        }
        if let Some(v) = s.max_outer {
            cvm.max_outer = v;
        }
        if let Some(v) = s.outer_tolerance {
            cvm.outer_tolerance = v;
        }
        if let Some(v) = s.inner_iterations {
            cvm.inner_iterations = v;
        }
        if let Some(v) = s.inner_tolerance {
            cvm.inner_tolerance = v;
        }
        if let Some(v) = s.damping {
            cvm.damping = v;
        }
    }

    let missing = |table: &str| {
        Error::Parse(format!(
            "{}: kind `{}` needs a [{table}] table",
            path.display(),
            kind.as_str()
        ))
    };

    let payload = match kind {
        ProblemKind::Chain => {
            let c = raw.chain.ok_or_else(|| missing("chain"))?;
            let (num_states, kernels) = match (&c.kernel, &c.kernels) {
                (Some(k), None) => {
                    let n = k.len();
                    (n, vec![flatten_square(k, n, "kernel")?; c.horizon])
                }
                (None, Some(ks)) => {
                    let n = ks.first().map(|k| k.len()).unwrap_or(0);
                    let mut out = Vec::with_capacity(ks.len());
                    for (t, k) in ks.iter().enumerate() {
                        out.push(flatten_square(k, n, &format!("kernels[{t}]"))?);
                    }
                    (n, out)
                }
                _ => {
                    return Err(Error::Parse(format!(
                        "{}: give exactly one of `kernel` or `kernels`",
                        path.display()
                    )))
                }
            };
            let problem = ChainProblem::new(num_states, c.horizon, kernels, c.cost)?;
            if c.start >= num_states {
                return Err(Error::Domain(format!(
                    "start state {} out of range for {num_states} states",
                    c.start
                )));
            }
            Payload::Chain {
                problem,
                start: c.start,
            }
        }
        ProblemKind::Blocks => {
            let b = raw.blocks.ok_or_else(|| missing("blocks"))?;
            let config = match b.initial {
                None => BlocksConfig::symmetric(b.locations, b.blocks, b.horizon, b.lambda)?,
                Some(initial) => {
                    let config = BlocksConfig {
                        locations: b.locations,
                        blocks: b.blocks,
                        horizon: b.horizon,
                        lambda: b.lambda,
                        initial,
                    };
                    config.validate()?;
                    config
                }
            };
            Payload::Blocks { config }
        }
        ProblemKind::Factored => {
            let f = raw.factored.ok_or_else(|| missing("factored"))?;
            let graph_path = {
                let p = PathBuf::from(&f.graph);
                if p.is_absolute() {
                    p
                } else {
                    path.parent().unwrap_or(Path::new(".")).join(p)
                }
            };
            let graph_text = std::fs::read_to_string(&graph_path)
                .map_err(|e| Error::Parse(format!("{}: {e}", graph_path.display())))?;
            Payload::Factored {
                graph: factor_graph_from_text(&graph_text)?,
            }
        }
        ProblemKind::PathIntegral => {
            let p = raw.path_integral.ok_or_else(|| missing("path-integral"))?;
            let d = p.dimension;
            let noise = flatten_square(&p.noise, d, "noise")?;
            let drift = match p.drift {
                None => Drift::Zero,
                Some(RawDrift::Named(name)) if name == "zero" => Drift::Zero,
                Some(RawDrift::Named(name)) => {
                    return Err(Error::Parse(format!(
                        "{}: unknown drift `{name}` (expected \"zero\" or a matrix)",
                        path.display()
                    )))
                }
                Some(RawDrift::Matrix(rows)) => {
                    Drift::Linear(flatten_square(&rows, d, "drift")?)
                }
            };
            let state_cost = match p.state_cost {
                None => StateCost::Zero,
                Some(sc) => match sc.kind.as_str() {
                    "zero" => StateCost::Zero,
                    "quadratic-terminal" => {
                        let alpha = sc.alpha.ok_or_else(|| {
                            Error::Parse(format!(
                                "{}: quadratic-terminal cost needs `alpha`",
                                path.display()
                            ))
                        })?;
                        StateCost::QuadraticTerminal { alpha }
                    }
                    other => {
                        return Err(Error::Parse(format!(
                            "{}: unknown state cost `{other}` (expected \"zero\" \
                             or \"quadratic-terminal\")",
                            path.display()
                        )))
                    }
                },
            };
            if p.start.len() != d {
                return Err(Error::Shape(format!(
                    "start state has {} entries for dimension {d}",
                    p.start.len()
                )));
            }
            if let Some(u) = &p.control {
                if u.len() != d {
                    return Err(Error::Shape(format!(
                        "control has {} entries for dimension {d}",
                        u.len()
                    )));
                }
            }
            let dynamics = ContinuousDynamics::new(d, drift, noise)?;
            Payload::PathIntegral {
                problem: PathProblem::new(dynamics, p.horizon, state_cost)?,
                start: p.start,
                samples: p.samples.unwrap_or(10_000),
                control: p.control,
            }
        }
    };

    Ok(ProblemFile {
        kind,
        seed: raw.seed.unwrap_or(0),
        solver: SolverSpec {
            name: solver_name,
            cvm,
        },
        payload,
        warnings,
        digest,
        source: path.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// artifacts

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write through a sibling temp file and rename, so a crash mid-write never
/// leaves a partial artifact under the final name.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Best-effort peak resident set size; informational only.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: u64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

struct MarginalRows {
    rows: Vec<(String, usize, usize, f64)>,
}

impl MarginalRows {
    fn new() -> Self {
        MarginalRows { rows: Vec::new() }
    }

    fn push_distribution(&mut self, variable: &str, slice: usize, dist: &[f64]) {
        for (index, &p) in dist.iter().enumerate() {
            self.rows.push((variable.to_string(), slice, index, p));
        }
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("variable,slice,index,probability\n");
        for (v, s, i, p) in &self.rows {
            out.push_str(&format!("{v},{s},{i},{p}\n"));
        }
        out
    }
}

fn f_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,free_energy\n");
    for (i, f) in trace.iter().enumerate() {
        out.push_str(&format!("{},{f}\n", i + 1));
    }
    out
}

/// Plain-text graymap, darker cells for larger values.
fn pgm_from_grid(width: usize, height: usize, value: impl Fn(usize, usize) -> f64) -> String {
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in 0..height {
        let mut cells = Vec::with_capacity(width);
        for col in 0..width {
            let v = value(row, col).clamp(0.0, 1.0);
            cells.push(format!("{}", 255 - (255.0 * v).round() as i64));
        }
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// run

struct RunSink<'a> {
    out_dir: &'a Path,
    artifacts: Vec<String>,
}

impl<'a> RunSink<'a> {
    fn emit(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.out_dir.join(name), contents)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }
}

/// Solve a problem file and persist the results. Solver failures are folded
/// into the manifest (`status = "error"`), so a manifest is written whenever
/// the output directory is usable.
pub fn run_problem(pf: &ProblemFile, out_dir: &Path, flags: &RunFlags) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let seed = flags.seed.unwrap_or(pf.seed);
    let solver = flags
        .solver
        .clone()
        .unwrap_or_else(|| pf.solver.name.clone());
    let threads = flags.threads.max(1);

    let mut manifest = Manifest {
        input: pf.source.display().to_string(),
        input_digest: pf.digest.clone(),
        kind: pf.kind.as_str().to_string(),
        solver: solver.clone(),
        solver_options: serde_json::Value::Object(Default::default()),
        seed,
        threads,
        status: RunStatus::Ok,
        diagnostic: None,
        optimal_cost: None,
        standard_error: None,
        artifacts: Vec::new(),
        wall_seconds: 0.0,
        peak_memory_bytes: None,
    };
    let mut sink = RunSink {
        out_dir,
        artifacts: Vec::new(),
    };
    if let Err(e) = dispatch(pf, &solver, seed, threads, flags, &mut sink, &mut manifest) {
        manifest.status = RunStatus::Error;
        manifest.diagnostic = Some(e.to_string());
    }
    manifest.artifacts = sink.artifacts;
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.peak_memory_bytes = peak_memory_bytes();
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

fn write_manifest(out_dir: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Parse(format!("manifest serialization: {e}")))?;
    write_atomic(&out_dir.join(MANIFEST_FILE), &format!("{json}\n"))
}

fn dispatch(
    pf: &ProblemFile,
    solver: &str,
    seed: u64,
    threads: usize,
    flags: &RunFlags,
    sink: &mut RunSink,
    manifest: &mut Manifest,
) -> Result<()> {
    match &pf.payload {
        Payload::Chain { problem, start } => {
            if solver != "exact" {
                return Err(Error::Domain(format!(
                    "chain problems support only the exact solver, not `{solver}`"
                )));
            }
            run_chain(problem, *start, sink, manifest)
        }
        Payload::Blocks { config } => run_blocks(config, solver, &pf.solver.cvm, flags, sink, manifest),
        Payload::Factored { graph } => {
            run_factored(graph, solver, &pf.solver.cvm, sink, manifest)
        }
        Payload::PathIntegral {
            problem,
            start,
            samples,
            control,
        } => {
            if solver != "monte-carlo" {
                return Err(Error::Domain(format!(
                    "path-integral problems support only the monte-carlo solver, \
                     not `{solver}`"
                )));
            }
            let samples = flags.samples.unwrap_or(*samples);
            run_path(
                problem,
                start,
                control.as_deref(),
                samples,
                seed,
                threads,
                flags.dump_samples,
                sink,
                manifest,
            )
        }
    }
}

fn run_chain(
    problem: &ChainProblem,
    start: usize,
    sink: &mut RunSink,
    manifest: &mut Manifest,
) -> Result<()> {
    let potentials = chain::build_potentials(problem);
    let messages = chain::backward_pass(&potentials);
    let solution = chain::solve(problem, start)?;
    let marginals = chain::optimal_marginals(&messages, &potentials, start)?;

    let mut rows = MarginalRows::new();
    for (t, dist) in marginals.iter().enumerate() {
        rows.push_distribution("x", t, dist);
    }
    sink.emit(MARGINALS_FILE, &rows.to_csv())?;

    let n = problem.num_states();
    let mut messages_csv = String::from("t,state,log_message\n");
    for t in 0..=problem.horizon() {
        for x in 0..n {
            messages_csv.push_str(&format!("{t},{x},{}\n", messages.log_message(t, x)));
        }
    }
    sink.emit("messages.csv", &messages_csv)?;

    let mut controls_csv = String::from("t,state");
    for y in 0..n {
        controls_csv.push_str(&format!(",p{y}"));
    }
    controls_csv.push('\n');
    for (t, slice) in solution.step_distributions.iter().enumerate() {
        for (x, dist) in slice.iter().enumerate() {
            controls_csv.push_str(&format!("{t},{x}"));
            match dist {
                Some(d) => {
                    for p in d {
                        controls_csv.push_str(&format!(",{p}"));
                    }
                }
                None => controls_csv.push_str(&",".repeat(n)),
            }
            controls_csv.push('\n');
        }
    }
    sink.emit("controls.csv", &controls_csv)?;

    manifest.optimal_cost = Some(solution.optimal_cost);
    Ok(())
}

fn blocks_solver(name: &str) -> Result<BlocksSolver> {
    match name {
        "exact" => Ok(BlocksSolver::Exact),
        "cvm" => Ok(BlocksSolver::Cvm),
        other => Err(Error::Domain(format!(
            "blocks problems support the `exact` and `cvm` solvers, not `{other}`"
        ))),
    }
}

fn run_blocks(
    config: &BlocksConfig,
    solver: &str,
    cvm: &DoubleLoopOptions,
    flags: &RunFlags,
    sink: &mut RunSink,
    manifest: &mut Manifest,
) -> Result<()> {
    let solver = blocks_solver(solver)?;
    if matches!(solver, BlocksSolver::Cvm) {
        manifest.solver_options = serde_json::to_value(cvm)
            .map_err(|e| Error::Parse(format!("solver options: {e}")))?;
    }
    let plan = blocks::plan(config, solver, Some(cvm.clone()))?;

    let mut rows = MarginalRows::new();
    for (t, slice) in plan.location_marginals.iter().enumerate() {
        for (i, dist) in slice.iter().enumerate() {
            rows.push_distribution(&format!("x{i}"), t, dist);
        }
    }
    for sel in &plan.selectors {
        rows.push_distribution("k", sel.slice, &sel.k);
        rows.push_distribution("l", sel.slice, &sel.l);
    }
    sink.emit(MARGINALS_FILE, &rows.to_csv())?;

    if let Some(trace) = &plan.free_energy_trace {
        sink.emit("f_trace.csv", &f_trace_csv(trace))?;
    }
    if flags.graymaps {
        let slices = plan.location_marginals.len();
        let heights = config.blocks + 1;
        for i in 0..config.locations {
            let pgm = pgm_from_grid(slices, heights, |row, col| {
                // top row is the tallest stack
                plan.location_marginals[col][i][config.blocks - row]
            });
            sink.emit(&format!("location_{i}.pgm"), &pgm)?;
        }
    }

    manifest.optimal_cost = Some(plan.optimal_cost);
    if !plan.converged {
        manifest.status = RunStatus::NonConverged;
        manifest.diagnostic = Some(
            "double loop hit its outer iteration cap before meeting tolerance".into(),
        );
    }
    Ok(())
}

fn run_factored(
    graph: &FactorGraph,
    solver: &str,
    cvm: &DoubleLoopOptions,
    sink: &mut RunSink,
    manifest: &mut Manifest,
) -> Result<()> {
    match solver {
        "cvm" => {
            manifest.solver_options = serde_json::to_value(cvm)
                .map_err(|e| Error::Parse(format!("solver options: {e}")))?;
            let rg = RegionGraph::from_factor_graph(graph)?;
            let mut dl = DoubleLoop::new(rg, cvm.clone())?;
            let run = dl.run()?;
            let mut rows = MarginalRows::new();
            for (v, var) in graph.variables.iter().enumerate() {
                rows.push_distribution(&var.base, var.slice, &dl.var_marginal(v)?);
            }
            sink.emit(MARGINALS_FILE, &rows.to_csv())?;
            sink.emit("f_trace.csv", &f_trace_csv(&run.trace))?;
            manifest.optimal_cost = Some(run.free_energy);
            if !run.converged {
                manifest.status = RunStatus::NonConverged;
                manifest.diagnostic = Some(format!(
                    "double loop stopped after {} outer iterations above tolerance",
                    run.outer_iterations
                ));
            }
            Ok(())
        }
        "enumerate" => {
            let (log_z, marginals) = enumerate_variable_marginals(graph)?;
            let mut rows = MarginalRows::new();
            for (v, var) in graph.variables.iter().enumerate() {
                rows.push_distribution(&var.base, var.slice, &marginals[v]);
            }
            sink.emit(MARGINALS_FILE, &rows.to_csv())?;
            manifest.optimal_cost = Some(-log_z);
            Ok(())
        }
        other => Err(Error::Domain(format!(
            "factored problems support the `cvm` and `enumerate` solvers, not `{other}`"
        ))),
    }
}

/// Brute-force variable marginals and log partition function of a small
/// factor graph.
pub fn enumerate_variable_marginals(graph: &FactorGraph) -> Result<(f64, Vec<Vec<f64>>)> {
    let cards = graph.cardinalities();
    if cards.is_empty() {
        return Err(Error::Domain("factor graph has no variables".into()));
    }
    let mut total: usize = 1;
    for &c in &cards {
        total = total
            .checked_mul(c)
            .filter(|&t| t <= ENUMERATION_BUDGET)
            .ok_or_else(|| {
                Error::Budget(format!(
                    "enumeration over {} variables exceeds {ENUMERATION_BUDGET} assignments",
                    cards.len()
                ))
            })?;
    }

    let mut assignment = vec![0usize; cards.len()];
    let mut max_lw = f64::NEG_INFINITY;
    for _ in 0..total {
        max_lw = max_lw.max(graph.log_weight(&assignment));
        next_assignment(&mut assignment, &cards);
    }
    if max_lw == f64::NEG_INFINITY {
        return Err(Error::Support(
            "every joint assignment has zero weight".into(),
        ));
    }

    let mut z = 0.0f64;
    let mut marginals: Vec<Vec<f64>> = cards.iter().map(|&c| vec![0.0; c]).collect();
    for _ in 0..total {
        let w = (graph.log_weight(&assignment) - max_lw).exp();
        z += w;
        for (v, &value) in assignment.iter().enumerate() {
            marginals[v][value] += w;
        }
        next_assignment(&mut assignment, &cards);
    }
    for m in &mut marginals {
        for p in m.iter_mut() {
            *p /= z;
        }
    }
    Ok((max_lw + z.ln(), marginals))
}

fn next_assignment(assignment: &mut [usize], cards: &[usize]) {
    for i in (0..assignment.len()).rev() {
        assignment[i] += 1;
        if assignment[i] < cards[i] {
            return;
        }
        assignment[i] = 0;
    }
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    problem: &PathProblem,
    start: &[f64],
    control: Option<&[f64]>,
    samples: usize,
    seed: u64,
    threads: usize,
    dump: bool,
    sink: &mut RunSink,
    manifest: &mut Manifest,
) -> Result<()> {
    manifest.solver_options = serde_json::json!({ "samples": samples });
    let mut estimate_csv = String::from("quantity,value\n");
    match control {
        Some(u) => {
            let schedule = ControlSchedule::constant(u.to_vec(), problem.horizon);
            let est = expected_cost(problem, &schedule, start, samples, seed, threads)?;
            manifest.optimal_cost = Some(est.total);
            manifest.standard_error = Some(est.standard_error);
            estimate_csv.push_str(&format!(
                "control_cost,{}\nstate_cost,{}\ntotal,{}\nstandard_error,{}\nsamples,{}\n",
                est.control_cost, est.state_cost, est.total, est.standard_error, est.samples
            ));
            sink.emit("estimate.csv", &estimate_csv)?;
            if dump {
                let costs =
                    sample_path_costs(problem, Some(&schedule), start, samples, seed, threads)?;
                let mut csv = String::from("index,state_cost\n");
                for (i, c) in costs.iter().enumerate() {
                    csv.push_str(&format!("{i},{c}\n"));
                }
                sink.emit("samples.csv", &csv)?;
            }
        }
        None => {
            let est = mc_optimal_cost(problem, start, samples, seed, threads)?;
            manifest.optimal_cost = Some(est.cost);
            manifest.standard_error = Some(est.standard_error);
            estimate_csv.push_str(&format!(
                "optimal_cost,{}\nstandard_error,{}\nsamples,{}\n",
                est.cost, est.standard_error, est.samples
            ));
            sink.emit("estimate.csv", &estimate_csv)?;
            if dump {
                let costs = sample_path_costs(problem, None, start, samples, seed, threads)?;
                let mut csv = String::from("index,state_cost,weight\n");
                for (i, c) in costs.iter().enumerate() {
                    csv.push_str(&format!("{i},{c},{}\n", (-c).exp()));
                }
                sink.emit("samples.csv", &csv)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rollout

/// Receding-horizon planning on a blocks problem file; writes `trace.csv`
/// (step, chosen move, heights after the move) plus a manifest.
pub fn rollout_problem(
    pf: &ProblemFile,
    out_dir: &Path,
    flags: &RunFlags,
    first_move: Option<MoveOverride>,
    max_steps: Option<usize>,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let solver = flags
        .solver
        .clone()
        .unwrap_or_else(|| pf.solver.name.clone());
    let mut manifest = Manifest {
        input: pf.source.display().to_string(),
        input_digest: pf.digest.clone(),
        kind: pf.kind.as_str().to_string(),
        solver: solver.clone(),
        solver_options: serde_json::Value::Object(Default::default()),
        seed: flags.seed.unwrap_or(pf.seed),
        threads: flags.threads.max(1),
        status: RunStatus::Ok,
        diagnostic: None,
        optimal_cost: None,
        standard_error: None,
        artifacts: Vec::new(),
        wall_seconds: 0.0,
        peak_memory_bytes: None,
    };
    let mut sink = RunSink {
        out_dir,
        artifacts: Vec::new(),
    };
    let result = (|| -> Result<()> {
        let config = match &pf.payload {
            Payload::Blocks { config } => config,
            _ => {
                return Err(Error::Domain(
                    "rollout needs a blocks problem file".into(),
                ))
            }
        };
        let solver = blocks_solver(&solver)?;
        if matches!(solver, BlocksSolver::Cvm) {
            manifest.solver_options = serde_json::to_value(&pf.solver.cvm)
                .map_err(|e| Error::Parse(format!("solver options: {e}")))?;
        }
        let trace = blocks::receding_horizon_rollout(
            config,
            solver,
            first_move,
            max_steps,
            Some(pf.solver.cvm.clone()),
        )?;
        let mut csv = String::from("step,stack,direction");
        for i in 0..config.locations {
            csv.push_str(&format!(",h{i}"));
        }
        csv.push('\n');
        csv.push_str("0,,");
        for h in &trace.initial {
            csv.push_str(&format!(",{h}"));
        }
        csv.push('\n');
        for step in &trace.steps {
            csv.push_str(&format!("{},{},{}", step.step, step.stack, step.direction));
            for h in &step.state {
                csv.push_str(&format!(",{h}"));
            }
            csv.push('\n');
        }
        sink.emit("trace.csv", &csv)?;
        Ok(())
    })();
    if let Err(e) = result {
        manifest.status = RunStatus::Error;
        manifest.diagnostic = Some(e.to_string());
    }
    manifest.artifacts = sink.artifacts;
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.peak_memory_bytes = peak_memory_bytes();
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// compare

/// Marginal disagreement between two runs over the same variables.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub rows: usize,
    /// The earliest nondeterministic slice (slice 0 is the pinned start).
    pub first_slice: usize,
    pub max_error_first_slice: f64,
    pub max_error_all_slices: f64,
}

fn read_marginals_csv(path: &Path) -> Result<BTreeMap<(String, usize, usize), f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("variable,slice,index,probability") => {}
        _ => {
            return Err(Error::Parse(format!(
                "{}: not a marginal table",
                path.display()
            )))
        }
    }
    let mut out = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (|| -> Option<((String, usize, usize), f64)> {
            let [v, s, i, p] = fields.as_slice() else {
                return None;
            };
            Some((
                (v.to_string(), s.parse().ok()?, i.parse().ok()?),
                p.parse().ok()?,
            ))
        })();
        let (key, p) = parsed.ok_or_else(|| {
            Error::Parse(format!("{}: bad row at line {}", path.display(), lineno + 2))
        })?;
        out.insert(key, p);
    }
    Ok(out)
}

fn marginals_of_manifest(manifest_path: &Path) -> Result<BTreeMap<(String, usize, usize), f64>> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    let name = manifest
        .artifacts
        .iter()
        .find(|a| a.ends_with(MARGINALS_FILE))
        .ok_or_else(|| {
            Error::Parse(format!(
                "{}: no marginal table among its artifacts",
                manifest_path.display()
            ))
        })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    read_marginals_csv(&dir.join(name))
}

/// Compare the marginal tables referenced by two manifests: the maximum
/// absolute error over all slices, and over the first transition slice only.
pub fn compare_manifests(exact: &Path, approx: &Path) -> Result<CompareReport> {
    let a = marginals_of_manifest(exact)?;
    let b = marginals_of_manifest(approx)?;
    if a.len() != b.len() || !a.keys().eq(b.keys()) {
        return Err(Error::Shape(
            "the two runs cover different variables or slices".into(),
        ));
    }
    let first_slice = a
        .keys()
        .map(|(_, s, _)| *s)
        .filter(|&s| s >= 1)
        .min()
        .unwrap_or(1);
    let mut max_all = 0.0f64;
    let mut max_first = 0.0f64;
    for (key, &pa) in &a {
        let err = (pa - b[key]).abs();
        max_all = max_all.max(err);
        if key.1 == first_slice {
            max_first = max_first.max(err);
        }
    }
    Ok(CompareReport {
        rows: a.len(),
        first_slice,
        max_error_first_slice: max_first,
        max_error_all_slices: max_all,
    })
}
