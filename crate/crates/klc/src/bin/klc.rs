use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use klc::blocks::MoveOverride;
use klc::harness::{
    compare_manifests, load_problem, rollout_problem, run_problem, ProblemFile, ProblemKind,
    RunFlags,
};

/// Solvers and experiment runner for KL-form stochastic optimal control.
///
/// Exit codes: 0 on success, 3 when an iterative solver stopped before
/// meeting its tolerance, 1 on any error.
#[derive(Parser)]
#[command(name = "klc", version, about, verbatim_doc_comment)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Problem file (TOML; see the repository README for the schema).
    problem: PathBuf,
    /// Directory for artifacts and manifest.json.
    #[arg(short, long)]
    output: PathBuf,
    /// Override the seed given in the problem file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sampling solvers.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Override the solver named in the problem file.
    #[arg(long)]
    solver: Option<String>,
    /// Reject unknown problem-file keys instead of warning.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem file and write marginal tables plus a manifest.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write per-location graymap images (blocks problems).
        #[arg(long)]
        graymaps: bool,
    },
    /// Report the max marginal error between two runs (all slices and the
    /// first transition slice).
    Compare {
        /// Manifest of the reference run.
        exact_manifest: PathBuf,
        /// Manifest of the run under test.
        approx_manifest: PathBuf,
        /// Also write the report as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Plan move by move on a blocks problem, re-solving after each move.
    Rollout {
        #[command(flatten)]
        common: CommonArgs,
        /// Force the first move: 1-based stack index. Needs --first-direction.
        #[arg(long, requires = "first_direction")]
        first_stack: Option<usize>,
        /// Force the first move: -1, 0, or 1. Needs --first-stack.
        #[arg(long, requires = "first_stack", allow_hyphen_values = true)]
        first_direction: Option<i64>,
        /// Stop after this many planning steps even if blocks remain spread.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Monte Carlo cost estimation for a path-integral problem.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the sample count given in the problem file.
        #[arg(long)]
        samples: Option<usize>,
        /// Dump per-trajectory costs as samples.csv.
        #[arg(long)]
        dump_samples: bool,
    },
}

fn load(common: &CommonArgs) -> Result<ProblemFile, klc::Error> {
    let pf = load_problem(&common.problem, common.strict)?;
    for warning in &pf.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(pf)
}

fn flags(common: &CommonArgs) -> RunFlags {
    RunFlags {
        seed: common.seed,
        threads: common.threads,
        solver: common.solver.clone(),
        ..RunFlags::default()
    }
}

fn real_main() -> Result<u8, klc::Error> {
    match Cli::parse().command {
        Command::Run { common, graymaps } => {
            let pf = load(&common)?;
            let mut f = flags(&common);
            f.graymaps = graymaps;
            let manifest = run_problem(&pf, &common.output, &f)?;
            report(&manifest.status, manifest.diagnostic.as_deref(), &common.output);
            if let Some(cost) = manifest.optimal_cost {
                println!("optimal cost: {cost}");
            }
            Ok(manifest.status.exit_code() as u8)
        }
        Command::Compare {
            exact_manifest,
            approx_manifest,
            output,
        } => {
            let report = compare_manifests(&exact_manifest, &approx_manifest)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| klc::Error::Parse(e.to_string()))?;
            println!("{json}");
            if let Some(path) = output {
                std::fs::write(&path, format!("{json}\n"))?;
            }
            Ok(0)
        }
        Command::Rollout {
            common,
            first_stack,
            first_direction,
            max_steps,
        } => {
            let pf = load(&common)?;
            if pf.kind != ProblemKind::Blocks {
                return Err(klc::Error::Domain(
                    "rollout needs a blocks problem file".into(),
                ));
            }
            let first_move = match (first_stack, first_direction) {
                (Some(stack), Some(direction)) => Some(MoveOverride { stack, direction }),
                _ => None,
            };
            let manifest =
                rollout_problem(&pf, &common.output, &flags(&common), first_move, max_steps)?;
            report(&manifest.status, manifest.diagnostic.as_deref(), &common.output);
            Ok(manifest.status.exit_code() as u8)
        }
        Command::Sample {
            common,
            samples,
            dump_samples,
        } => {
            let pf = load(&common)?;
            if pf.kind != ProblemKind::PathIntegral {
                return Err(klc::Error::Domain(
                    "sample needs a path-integral problem file".into(),
                ));
            }
            let mut f = flags(&common);
            f.samples = samples;
            f.dump_samples = dump_samples;
            let manifest = run_problem(&pf, &common.output, &f)?;
            report(&manifest.status, manifest.diagnostic.as_deref(), &common.output);
            if let (Some(cost), Some(se)) = (manifest.optimal_cost, manifest.standard_error) {
                println!("estimated cost: {cost} (standard error {se})");
            }
            Ok(manifest.status.exit_code() as u8)
        }
    }
}

fn report(status: &klc::harness::RunStatus, diagnostic: Option<&str>, out: &std::path::Path) {
    match status {
        klc::harness::RunStatus::Ok => {
            println!("ok: results in {}", out.display());
        }
        klc::harness::RunStatus::NonConverged => {
            eprintln!(
                "non-converged: {} (results in {})",
                diagnostic.unwrap_or("no diagnostic"),
                out.display()
            );
        }
        klc::harness::RunStatus::Error => {
            eprintln!("error: {}", diagnostic.unwrap_or("no diagnostic"));
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
