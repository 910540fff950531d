use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use isph::conditions::{audit, step_limit};
use isph::diagnostics::{check_stability_bound, verify_lemmas, Theorem};
use isph::io::{self, RunReport, StepsWriter};
use isph::modified::solve_particle_volumes;
use isph::schemes::TimeStep;
use isph::{IsphError, Result, Scenario, SchemeVariant};

#[derive(Parser)]
#[command(name = "isph", version, about = "Incompressible SPH solver with condition audits and stability monitors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write steps.csv, snapshots and report.json.
    Run {
        scenario: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        scheme: SchemeVariant,
        #[arg(long)]
        out: PathBuf,
        /// Record audit measurements without rejecting failing steps.
        #[arg(long)]
        no_audit: bool,
        /// Write every step's matrices to <out>/matrices.
        #[arg(long)]
        dump_matrices: bool,
        /// Also write a snapshot every n steps (the initial and final states are always written).
        #[arg(long, value_name = "n")]
        snapshot_every: Option<usize>,
    },
    /// Audit the initial state of a scenario: JSON on stdout, table on stderr.
    Audit {
        scenario: PathBuf,
        /// Scheme whose volumes and step size are audited.
        #[arg(long, value_parser = parse_variant, default_value = "implicit")]
        scheme: SchemeVariant,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized checks of the discrete norm lemmas.
    VerifyLemmas {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the stability-bound flags of a finished run.
    CheckBounds {
        run_dir: PathBuf,
        #[arg(long, value_parser = parse_theorem)]
        theorem: Theorem,
        /// Use c0 measured from the run even when one is configured.
        #[arg(long)]
        measured_c0: bool,
    },
}

fn parse_variant(s: &str) -> std::result::Result<SchemeVariant, String> {
    s.parse().map_err(|e: IsphError| e.to_string())
}

fn parse_theorem(s: &str) -> std::result::Result<Theorem, String> {
    s.parse().map_err(|e: IsphError| e.to_string())
}

/// Exit status: 0 success, 1 a check failed, 2 an error.
enum Outcome {
    Pass,
    Fail,
}

fn run(
    scenario: &Path,
    variant: SchemeVariant,
    out: &Path,
    no_audit: bool,
    dump_matrices: bool,
    snapshot_every: Option<usize>,
) -> Result<Outcome> {
    let sc = Scenario::from_file(scenario)?;
    let mut config = sc.scheme_config(variant)?;
    config.audit = !no_audit;
    if dump_matrices {
        config.dump_matrices = Some(out.join("matrices"));
    }
    let (scheme, initial) = sc.build_with(config)?;
    std::fs::create_dir_all(out)?;
    let mut steps = StepsWriter::create(&out.join(io::STEPS_FILE))?;
    let every = snapshot_every.filter(|n| *n > 0);
    let traj = scheme.run(&initial, |row, state| {
        steps.write(row)?;
        if row.k == 0 || every.is_some_and(|n| row.k % n == 0) {
            io::write_snapshot(out, state)?;
        }
        Ok(())
    })?;
    steps.flush()?;
    io::write_snapshot(out, &traj.final_state)?;
    let report = RunReport::from_trajectory(&traj);
    io::write_report(out, &report)?;
    eprintln!(
        "{} scheme: {} step(s), t = {:e}, |u| = {:e}, bound flags {}/{} ok",
        variant,
        report.steps,
        report.final_time,
        report.final_u_l2,
        report.bound.checked - report.bound.failed.len(),
        report.bound.checked
    );
    if let Some(f) = &report.failure {
        eprintln!("run stopped: {}", f.message);
        if let Some(r) = &f.report {
            eprintln!("{}", r.table());
        }
        return Ok(Outcome::Fail);
    }
    Ok(Outcome::Pass)
}

fn audit_cmd(scenario: &Path, variant: SchemeVariant, out: Option<&Path>) -> Result<Outcome> {
    let sc = Scenario::from_file(scenario)?;
    let mut state = sc.init()?;
    let kernel = sc.kernel()?;
    let inter = state.interactions(&kernel)?;
    if variant.is_modified() {
        let solve = solve_particle_volumes(&state, &inter)?;
        if let Some(reason) = &solve.infeasibility {
            eprintln!("volume system infeasible: {reason}; auditing the scenario volumes");
        } else {
            state.set_volumes(solve.volumes)?;
        }
    }
    let nu = sc.viscosity;
    let variable = variant == SchemeVariant::ModifiedSemiImplicit || sc.time_step()? == TimeStep::Adaptive;
    let dt = match sc.time_step()? {
        TimeStep::Fixed(dt) if !variable => dt,
        _ => {
            let delta = sc
                .conditions
                .delta
                .ok_or_else(|| IsphError::Usage("a variable time step needs delta configured".into()))?;
            delta * step_limit(state.volumes(), &inter, nu)?
        }
    };
    let report = audit(&state, &kernel, &inter, dt, nu, &sc.conditions)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    eprintln!("{}", report.table());
    let violations = report.violations();
    for v in &violations {
        eprintln!("violation: {v}");
    }
    Ok(if violations.is_empty() { Outcome::Pass } else { Outcome::Fail })
}

fn verify_cmd(seed: u64, trials: usize, out: &Path) -> Result<Outcome> {
    let report = verify_lemmas(seed, trials)?;
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    for (name, c) in [
        ("lemma 1", &report.lemma1),
        ("lemma 2", &report.lemma2),
        ("lemma 3", &report.lemma3),
        ("lemma 4", &report.lemma4),
        ("lemma 5", &report.lemma5),
    ] {
        eprintln!("{name}: {} checks, {} violations, worst {:e}", c.checked, c.violations, c.worst);
    }
    eprintln!("{}", if report.passed { "all lemma checks passed" } else { "lemma checks FAILED" });
    Ok(if report.passed { Outcome::Pass } else { Outcome::Fail })
}

fn check_bounds_cmd(dir: &Path, theorem: Theorem, measured: bool) -> Result<Outcome> {
    let meta = io::read_report(dir)?.meta;
    let rows = io::read_bound_rows(&dir.join(io::STEPS_FILE))?;
    let report = check_stability_bound(&rows, &meta, theorem, measured)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!(
        "Theorem {}: c0 = {:e}{}, c = {:e}, {} of {} step(s) violate the bound, {} vacuous, Gronwall consistent: {}{}",
        report.theorem,
        report.c0,
        if report.measured_c0 { " (measured)" } else { "" },
        report.c,
        report.violations.len(),
        report.flags.len(),
        report.vacuous_steps,
        report.gronwall.consistent,
        if report.proven { "" } else { " (d = 3: informational only)" }
    );
    Ok(if report.all_ok && report.gronwall.consistent { Outcome::Pass } else { Outcome::Fail })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            scheme,
            out,
            no_audit,
            dump_matrices,
            snapshot_every,
        } => run(scenario, *scheme, out, *no_audit, *dump_matrices, *snapshot_every),
        Command::Audit { scenario, scheme, out } => audit_cmd(scenario, *scheme, out.as_deref()),
        Command::VerifyLemmas { seed, trials, out } => verify_cmd(*seed, *trials, out),
        Command::CheckBounds {
            run_dir,
            theorem,
            measured_c0,
        } => check_bounds_cmd(run_dir, *theorem, *measured_c0),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
