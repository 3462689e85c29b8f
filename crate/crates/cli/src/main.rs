//! `mfc`: runs verification scenarios against the mfc-core toolkit.

mod checks;
mod scenario;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use mfc_core::analysis::CHECK_NAMES;
use mfc_core::fields::{FinalCost, COST_NAMES, FIELD_NAMES};
use mfc_core::flow::{integrate_flow, ControlSignal};
use mfc_core::pmp::{forward_backward_sweep, integrate_costate, SweepParams};
use mfc_core::problem::{reference_problem, REFERENCE_NAMES};
use mfc_core::value::ExhaustiveValue;

use checks::{CheckOutcome, Context};
use scenario::{Candidate, Scenario, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "mfc", version, about = "Mean-field optimal control verification runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the checks listed in a scenario file.
    Run {
        scenario: PathBuf,
        /// Output directory; overrides the scenario's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (all cores by default).
        #[arg(long)]
        threads: Option<usize>,
        /// Treat warnings as failures.
        #[arg(long)]
        strict: bool,
    },
    /// List fields, costs, checks and reference problems.
    Catalogue {
        /// Print the full JSON of one reference problem instead.
        #[arg(long)]
        problem: Option<String>,
    },
    /// Print version information.
    Version,
}

#[derive(Serialize)]
struct CandidateInfo {
    source: Candidate,
    control: Vec<Vec<f64>>,
    cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep_iterations: Option<usize>,
}

#[derive(Serialize)]
struct Summary {
    schema_version: u32,
    scenario: String,
    seed: u64,
    strict: bool,
    candidate: CandidateInfo,
    warnings: Vec<String>,
    checks: Vec<CheckOutcome>,
    passed: usize,
    failed: usize,
    all_pass: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { scenario, out, seed, threads, strict } => run(&scenario, out, seed, threads, strict),
        Command::Catalogue { problem } => catalogue(problem.as_deref()).map(|_| true),
        Command::Version => {
            println!("mfc {} (scenario schema {SCHEMA_VERSION})", env!("CARGO_PKG_VERSION"));
            Ok(true)
        }
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn catalogue(problem: Option<&str>) -> Result<()> {
    if let Some(name) = problem {
        println!("{}", serde_json::to_string_pretty(&reference_problem(name)?)?);
        return Ok(());
    }
    let section = |title: &str, items: &[&str]| {
        println!("{title}:");
        for i in items {
            println!("  {i}");
        }
    };
    section("fields", &FIELD_NAMES);
    section("costs", &COST_NAMES);
    section("control sets", &["finite", "box"]);
    section("checks", &CHECK_NAMES);
    section("reference problems", &REFERENCE_NAMES);
    Ok(())
}

fn output_dir(scenario_path: &Path, s: &Scenario, flag: Option<PathBuf>) -> PathBuf {
    match (flag, &s.output) {
        (Some(p), _) => p,
        (None, Some(p)) if p.is_absolute() => p.clone(),
        (None, Some(p)) => scenario_path.parent().unwrap_or(Path::new(".")).join(p),
        (None, None) => PathBuf::from("mfc-out").join(&s.name),
    }
}

fn run(path: &Path, out: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>, strict: bool) -> Result<bool> {
    let s = Scenario::load(path)?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let problem = s.problem_spec()?.build().context("building the problem")?;
    let seed = seed.unwrap_or(s.seed);
    let out = output_dir(path, &s, out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let value = ExhaustiveValue::new(
        &problem.field,
        &problem.cost,
        problem.grid,
        problem.control_grid,
        &problem.control_set,
    )?
    .with_budget(u128::from(s.value_budget));
    let mut warnings = Vec::new();
    let t0 = problem.grid.t0();
    let (candidate, ensemble, sweep_iterations) = match s.candidate {
        Candidate::Nominal | Candidate::Exhaustive => {
            let u: ControlSignal = if s.candidate == Candidate::Nominal {
                problem.control.clone()
            } else {
                value.solve(t0, &problem.initial)?.control
            };
            let flow = integrate_flow(&problem.field, &u, t0, &problem.initial, &problem.grid)?;
            let ens = integrate_costate(&flow, &problem.field, &problem.cost)?;
            (u, ens, None)
        }
        Candidate::Sweep => {
            let r = forward_backward_sweep(
                &problem.field,
                &problem.cost,
                &problem.initial,
                &problem.grid,
                &problem.control_grid,
                &problem.control_set,
                Some(&problem.control),
                &SweepParams::default(),
            )?;
            if !r.converged {
                warnings.push(format!("sweep did not converge in {} iterations", r.iterations));
            }
            (r.ensemble.control.clone(), r.ensemble, Some(r.iterations))
        }
    };
    let cost = problem.cost.eval(&ensemble.measure_at(problem.grid.steps()))?;
    let info = CandidateInfo {
        source: s.candidate,
        control: candidate.values().iter().map(|v| v.iter().copied().collect()).collect(),
        cost,
        sweep_iterations,
    };
    let ctx = Context { problem: &problem, value, candidate, ensemble, seed, out: out.clone() };

    let mut outcomes = Vec::new();
    for name in s.checks.enabled() {
        let mut o = checks::run(&ctx, &s.checks, name).with_context(|| format!("check `{name}`"))?;
        if strict && !o.warnings.is_empty() {
            o.pass = false;
        }
        println!("{} {name}{}", if o.pass { "PASS" } else { "FAIL" }, o.status.as_ref().map(|s| format!(" [{s}]")).unwrap_or_default());
        for w in &o.warnings {
            println!("     warning: {w}");
        }
        outcomes.push(o);
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    let failed = outcomes.len() - passed;
    let all_pass = failed == 0 && !(strict && !warnings.is_empty());
    for w in &warnings {
        println!("warning: {w}");
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        scenario: s.name.clone(),
        seed,
        strict,
        candidate: info,
        warnings,
        checks: outcomes,
        passed,
        failed,
        all_pass,
    };
    let file = out.join("summary.json");
    fs::write(&file, serde_json::to_string_pretty(&summary)? + "\n").with_context(|| format!("writing {}", file.display()))?;
    println!("{passed}/{} checks passed; reports in {}", passed + failed, out.display());
    Ok(all_pass)
}
