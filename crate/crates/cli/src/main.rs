//! `impulse`: solve, check and export minimax impulse-control games.
//!
//! Exit codes: 0 success, 1 input error, 2 solver non-convergence,
//! 3 invariant check failure.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use impulse_core::checks::{run_checks, Level};
use impulse_core::export::{
    field_from_csv, field_to_csv, slice_index, slice_to_csv, state_slice_heatmap,
    time_state_heatmap,
};
use impulse_core::grid::ValueField;
use impulse_core::oracle::{oracle_table, OracleSettings};
use impulse_core::policy::{extract_policy, simulate, Adversary};
use impulse_core::problem::{builtin_text, grid_box, Setup, CATALOG};
use impulse_core::solver::{
    obstacle_gaps, solve_gamma, solve_qvi, solve_wn, QviInit, SolveError, SolveReport, BINDING_TOL,
};

use manifest::{ProblemSource, RunManifest};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "IMPULSE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "impulse-out";

#[derive(Parser)]
#[command(
    name = "impulse",
    version,
    about = "Minimax impulse-control game solver"
)]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Qvi,
    Wn,
    Gamma,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckLevel {
    Quick,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and write value.csv, report.json and manifest.json.
    Solve {
        /// Problem file, or `builtin:NAME`.
        problem: String,
        #[arg(long, value_enum, default_value = "qvi")]
        scheme: Scheme,
        /// Output directory (default: $IMPULSE_OUT_DIR or ./impulse-out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite and print a pass/fail table.
    Check {
        problem: String,
        #[arg(long, value_enum, default_value = "quick")]
        level: CheckLevel,
        /// Check this exported field instead of solving.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Render an exported field as SVG and/or extract a time slice.
    Export {
        problem: String,
        /// Field CSV written by `solve`.
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        svg: bool,
        /// Time slice, as `t=VALUE`.
        #[arg(long)]
        slice: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Brute-force lattice oracle values.
    Oracle {
        problem: String,
        #[arg(long, default_value_t = 0.25)]
        h: f64,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        jumps: usize,
        /// Query `K:X1[,X2..]` (time index and lattice state); repeatable.
        /// Without queries the whole t0 slice is printed.
        #[arg(long)]
        at: Vec<String>,
    },
    /// Simulate the feedback policy and write trajectory.csv.
    Simulate {
        problem: String,
        /// Start state `X1[,X2..]` at t0.
        #[arg(long)]
        start: String,
        /// `worst`, `random:SEED` or `fixed:EXPR[;EXPR..]`.
        #[arg(long, default_value = "worst")]
        adversary: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List catalog problems, or print one as a problem file.
    Catalog { name: Option<String> },
}

#[derive(Debug)]
enum CliError {
    Input(String),
    NotConverged(String),
    CheckFailed,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::NotConverged(_) => 2,
            CliError::CheckFailed => 3,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::NotConverged { .. } => CliError::NotConverged(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

struct Loaded {
    setup: Setup,
    source: ProblemSource,
}

fn load(problem: &str) -> Result<Loaded, CliError> {
    let (text, origin) = match problem.strip_prefix("builtin:") {
        Some(name) => (
            builtin_text(name).map_err(input)?.to_string(),
            problem.to_string(),
        ),
        None => (
            fs::read_to_string(problem).map_err(|e| CliError::Input(format!("{problem}: {e}")))?,
            problem.to_string(),
        ),
    };
    let setup = Setup::from_text(&text).map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
    Ok(Loaded {
        setup,
        source: ProblemSource::new(origin, text.as_bytes()),
    })
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn cfl_warning(setup: &Setup) -> Result<(), CliError> {
    let grid = &setup.grid;
    let mesh = &setup.mesh;
    let mut max_f: f64 = 0.0;
    for i in 0..grid.len() {
        let x = grid.node(i);
        for k in 0..=mesh.steps {
            for tau in setup.spec.controls() {
                let f = setup.spec.drift(mesh.time(k), &x, tau).map_err(input)?;
                max_f = max_f.max(f.iter().map(|a| a.abs()).fold(0.0, f64::max));
            }
        }
    }
    let dx = grid
        .axes()
        .iter()
        .map(|a| a.spacing())
        .fold(f64::INFINITY, f64::min);
    if mesh.dt() > dx / (max_f + f64::EPSILON) {
        eprintln!(
            "warning: dt = {} exceeds dx / max|f| = {} (CFL-like condition)",
            mesh.dt(),
            dx / (max_f + f64::EPSILON)
        );
    }
    Ok(())
}

fn cmd_solve(
    problem: &str,
    scheme: Scheme,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<(), CliError> {
    let started = Instant::now();
    let Loaded { setup, source } = load(problem)?;
    cfl_warning(&setup)?;
    let dir = out_dir(out)?;
    let (name, field, report): (&str, ValueField, SolveReport) = match scheme {
        Scheme::Qvi => {
            let (v, r) = solve_qvi(
                &setup.spec,
                &setup.grid,
                &setup.mesh,
                &setup.settings,
                &QviInit::FromQ0,
            )?;
            ("qvi", v, r)
        }
        Scheme::Wn => {
            let (mut ws, r) = solve_wn(&setup.spec, &setup.grid, &setup.mesh, &setup.settings)?;
            ("wn", ws.pop().expect("w0 present"), r)
        }
        Scheme::Gamma => {
            let (g, r) = solve_gamma(&setup.spec, &setup.grid, &setup.mesh, &setup.settings)?;
            ("gamma", g, r)
        }
    };
    let csv_name = if name == "gamma" {
        "gamma.csv"
    } else {
        "value.csv"
    };
    write(&dir.join(csv_name), &field_to_csv(&field))?;
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&dir.join("report.json"), &report_json)?;
    let manifest = RunManifest::new(
        "solve",
        name,
        &setup,
        source,
        threads,
        &report,
        started.elapsed().as_secs_f64(),
    )
    .with_outputs(&[csv_name, "report.json"]);
    write(&dir.join("manifest.json"), &manifest.to_json())?;
    println!(
        "scheme {name}: wrote {} ({:.3} s)",
        dir.join(csv_name).display(),
        report.wall_time_s
    );
    if let Some(r) = &report.residual {
        println!(
            "residual max {:e}, mean {:e}, binding fraction {:.4}",
            r.max, r.mean, r.binding_fraction
        );
    }
    if let Some(n) = report.converged_at {
        println!("impulse-budget iteration converged at n = {n}");
    }
    if let Some(note) = &report.note {
        println!("note: {note}");
    }
    Ok(())
}

fn cmd_check(problem: &str, level: CheckLevel, field: Option<PathBuf>) -> Result<(), CliError> {
    let Loaded { setup, .. } = load(problem)?;
    let field = match field {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let f = field_from_csv(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            if f.grid() != &setup.grid || f.mesh() != &setup.mesh {
                return Err(CliError::Input(
                    "field grid or mesh does not match the problem".into(),
                ));
            }
            f
        }
        None => {
            solve_qvi(
                &setup.spec,
                &setup.grid,
                &setup.mesh,
                &setup.settings,
                &QviInit::FromQ0,
            )?
            .0
        }
    };
    let level = match level {
        CheckLevel::Quick => Level::Quick,
        CheckLevel::Full => Level::Full,
    };
    let suite = run_checks(&field, &setup, level)?;
    for row in &suite.rows {
        println!(
            "{}  {:<24} {}",
            if row.passed { "PASS" } else { "FAIL" },
            row.name,
            row.detail
        );
        if let Some(w) = &row.witness {
            println!("      witness: {w}");
        }
    }
    if suite.all_passed() {
        Ok(())
    } else {
        Err(CliError::CheckFailed)
    }
}

fn binding_mask(field: &ValueField, setup: &Setup) -> Result<Vec<Vec<bool>>, CliError> {
    let gaps = obstacle_gaps(field, &setup.spec).map_err(input)?;
    let steps = field.mesh().steps;
    Ok(gaps
        .iter()
        .enumerate()
        .map(|(k, row)| {
            row.iter()
                .map(|g| k < steps && g.abs() <= BINDING_TOL)
                .collect()
        })
        .collect())
}

fn cmd_export(
    problem: &str,
    field_path: &Path,
    svg: bool,
    slice: Option<String>,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<(), CliError> {
    let started = Instant::now();
    let Loaded { setup, source } = load(problem)?;
    let text = fs::read_to_string(field_path)
        .map_err(|e| CliError::Input(format!("{}: {e}", field_path.display())))?;
    let field = field_from_csv(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", field_path.display())))?;
    if field.grid() != &setup.grid || field.mesh() != &setup.mesh {
        return Err(CliError::Input(
            "field grid or mesh does not match the problem".into(),
        ));
    }
    let k = match &slice {
        Some(s) => {
            let t: f64 = s
                .strip_prefix("t=")
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::Input(format!("bad --slice `{s}` (expected t=VALUE)")))?;
            Some(slice_index(field.mesh(), t).map_err(input)?)
        }
        None => None,
    };
    if !svg && k.is_none() {
        return Err(CliError::Input(
            "nothing to export: pass --svg and/or --slice".into(),
        ));
    }
    let dir = out_dir(out)?;
    let mut outputs = Vec::new();
    if let Some(k) = k {
        write(
            &dir.join("slice.csv"),
            &slice_to_csv(&field, k).map_err(input)?,
        )?;
        outputs.push("slice.csv");
    }
    if svg {
        let mask = binding_mask(&field, &setup)?;
        let title = format!("{}: value", setup.spec.name());
        let doc = if setup.grid.dim() == 1 {
            time_state_heatmap(&field, Some(&mask), &title)
        } else {
            state_slice_heatmap(&field, k.unwrap_or(0), Some(&mask), &title).map_err(input)?
        };
        write(&dir.join("value.svg"), &doc)?;
        outputs.push("value.svg");
    }
    let report = SolveReport {
        scheme: "export".into(),
        deltas: Vec::new(),
        sweeps: Vec::new(),
        iterations: 0,
        converged: true,
        converged_at: None,
        note: None,
        residual: None,
        wall_time_s: 0.0,
    };
    let manifest = RunManifest::new(
        "export",
        "none",
        &setup,
        source,
        threads,
        &report,
        started.elapsed().as_secs_f64(),
    )
    .with_outputs(&outputs);
    write(&dir.join("manifest.json"), &manifest.to_json())?;
    for o in outputs {
        println!("wrote {}", dir.join(o).display());
    }
    Ok(())
}

fn parse_state(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Input(format!("bad state `{s}`")))
        })
        .collect()
}

fn cmd_oracle(problem: &str, settings: OracleSettings, at: &[String]) -> Result<(), CliError> {
    let Loaded { setup, .. } = load(problem)?;
    let table = oracle_table(&setup.spec, &grid_box(&setup.grid), &settings).map_err(input)?;
    if at.is_empty() {
        for (x, v) in table.states().iter().zip(table.slice(0).expect("t0 slice")) {
            println!("t={} x={:?} value={v}", table.time(0), x);
        }
    }
    for q in at {
        let (k, x) = q
            .split_once(':')
            .ok_or_else(|| CliError::Input(format!("bad query `{q}` (expected K:X1[,X2..])")))?;
        let k: usize = k
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("bad time index in `{q}`")))?;
        let x = parse_state(x)?;
        let v = table.value(k, &x).map_err(input)?;
        println!("t={} x={:?} value={v}", table.time(k), x);
    }
    println!("clamped snaps: {}", table.clamped);
    Ok(())
}

fn cmd_simulate(
    problem: &str,
    start: &str,
    adversary: &str,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let Loaded { setup, .. } = load(problem)?;
    let x0 = parse_state(start)?;
    let adversary = if adversary == "worst" {
        Adversary::WorstCase
    } else if let Some(seed) = adversary.strip_prefix("random:") {
        Adversary::Random(
            seed.parse()
                .map_err(|_| CliError::Input(format!("bad seed `{seed}`")))?,
        )
    } else if let Some(exprs) = adversary.strip_prefix("fixed:") {
        Adversary::Fixed(exprs.split(';').map(str::to_string).collect())
    } else {
        return Err(CliError::Input(format!("unknown adversary `{adversary}`")));
    };
    let (v, _) = solve_qvi(
        &setup.spec,
        &setup.grid,
        &setup.mesh,
        &setup.settings,
        &QviInit::FromQ0,
    )?;
    let policy = extract_policy(&v, &setup.spec, setup.settings.eps_fp).map_err(input)?;
    let tr = simulate(&setup.spec, &policy, &adversary, 0, &x0).map_err(input)?;
    let dir = out_dir(out)?;
    let mut csv = String::from("t");
    for a in 1..=setup.spec.dim() {
        csv.push_str(&format!(",x{a}"));
    }
    csv.push_str(",decision,incremental_cost,cumulative\n");
    for r in &tr.rows {
        csv.push_str(&r.t.to_string());
        for c in &r.state {
            csv.push_str(&format!(",{c}"));
        }
        csv.push_str(&format!(
            ",{},{},{}\n",
            r.decision, r.incremental_cost, r.cumulative
        ));
    }
    write(&dir.join("trajectory.csv"), &csv)?;
    println!(
        "payoff {} = running {} + jumps {} + terminal {}; {} jump(s); value v(t0, x0) = {}",
        tr.total,
        tr.running,
        tr.jump_cost,
        tr.terminal,
        tr.events.len(),
        v.value_at(0, &x0)
    );
    if tr.truncated {
        println!("warning: trajectory left the grid box and was truncated");
    }
    Ok(())
}

fn cmd_catalog(name: Option<String>) -> Result<(), CliError> {
    match name {
        None => {
            for n in CATALOG {
                println!("{n}");
            }
        }
        Some(n) => print!("{}", builtin_text(&n).map_err(input)?),
    }
    Ok(())
}

fn run(cli: Cli, threads: usize) -> Result<(), CliError> {
    match cli.command {
        Command::Solve {
            problem,
            scheme,
            out,
        } => cmd_solve(&problem, scheme, out, threads),
        Command::Check {
            problem,
            level,
            field,
        } => cmd_check(&problem, level, field),
        Command::Export {
            problem,
            field,
            svg,
            slice,
            out,
        } => cmd_export(&problem, &field, svg, slice, out, threads),
        Command::Oracle {
            problem,
            h,
            steps,
            jumps,
            at,
        } => cmd_oracle(&problem, OracleSettings { h, steps, jumps }, &at),
        Command::Simulate {
            problem,
            start,
            adversary,
            out,
        } => cmd_simulate(&problem, &start, &adversary, out),
        Command::Catalog { name } => cmd_catalog(name),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    if threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli, threads)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Input(m) => eprintln!("error: {m}"),
                CliError::NotConverged(m) => eprintln!("not converged: {m}"),
                CliError::CheckFailed => eprintln!("invariant check failed"),
            }
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
