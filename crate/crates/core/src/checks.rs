//! Invariant suite run against a solved value field.
//!
//! The quick level covers properties of the field alone (obstacle
//! inequality, terminal slice, growth bounds) plus the one-step comparison
//! proxy. The full level re-solves with the other schemes and the oracle.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::grid::{Grid, TimeMesh, ValueField};
use crate::impulse::terminal_g1;
use crate::oracle::{oracle_table, OracleError, OracleSettings};
use crate::problem::{grid_box, validate, ProblemError, Setup, ValidationReport};
use crate::solver::{
    backward_step, obstacle_gaps, solve_gamma, solve_qvi, solve_wn, QviInit, SolveError,
    SolveSettings,
};

/// Slack in the obstacle inequality.
pub const OBSTACLE_TOL: f64 = 1e-8;
/// Samples and seed for the validation estimates used by the growth check.
pub const VALIDATION_SAMPLES: usize = 2000;
pub const VALIDATION_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub time_index: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub bound: f64,
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t = {} (index {}), x = {:?}: value {} vs bound {}",
            self.t, self.time_index, self.x, self.value, self.bound
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub witness: Option<Witness>,
}

impl CheckRow {
    fn new(name: &str, passed: bool, detail: String, witness: Option<Witness>) -> Self {
        CheckRow {
            name: name.into(),
            passed,
            detail,
            witness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSuite {
    pub rows: Vec<CheckRow>,
}

impl CheckSuite {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckRow> {
        self.rows.iter().find(|r| !r.passed)
    }
}

fn witness(field: &ValueField, k: usize, i: usize, value: f64, bound: f64) -> Witness {
    Witness {
        time_index: k,
        t: field.mesh().time(k),
        x: field.grid().node(i),
        value,
        bound,
    }
}

/// `v <= N[v] + tol` at every node with `t < T`. Terminal-slice violations
/// (a second jump at `T` that the one-jump terminal value ignores) are
/// counted in the detail only.
pub fn obstacle_check(
    field: &ValueField,
    setup: &Setup,
    tol: f64,
) -> Result<CheckRow, ProblemError> {
    let gaps = obstacle_gaps(field, &setup.spec)?;
    let steps = field.mesh().steps;
    let mut worst: Option<(usize, usize, f64)> = None;
    for (k, row) in gaps.iter().enumerate().take(steps) {
        for (i, &g) in row.iter().enumerate() {
            if worst.is_none_or(|w| g > w.2) {
                worst = Some((k, i, g));
            }
        }
    }
    let terminal = gaps[steps].iter().filter(|&&g| g > tol).count();
    let (k, i, g) = worst.expect("nonempty grid");
    let passed = g <= tol;
    let v = field.slice(k).expect("in range")[i];
    Ok(CheckRow::new(
        "obstacle v <= N[v]",
        passed,
        format!(
            "max v - N[v] over t < T = {g:e} (tol {tol:e}); terminal slice nodes with G1 > N[G1]: {terminal}"
        ),
        (!passed).then(|| witness(field, k, i, v, v - g + tol)),
    ))
}

/// `v(T, .) = G1` bit-exactly at nodes.
pub fn terminal_check(field: &ValueField, setup: &Setup) -> Result<CheckRow, ProblemError> {
    let g1 = terminal_g1(&setup.grid, &setup.spec)?;
    let last = field.slice(field.mesh().steps).expect("in range");
    let bad = last
        .iter()
        .zip(&g1)
        .position(|(a, b)| a.to_bits() != b.to_bits());
    Ok(CheckRow::new(
        "terminal v(T) = G1",
        bad.is_none(),
        match bad {
            None => "exact at all nodes".into(),
            Some(_) => "mismatch".into(),
        },
        bad.map(|i| witness(field, field.mesh().steps, i, last[i], g1[i])),
    ))
}

/// Validation estimates tightened with exact grid evaluations.
pub fn validation_report(setup: &Setup) -> Result<ValidationReport, ProblemError> {
    let mut report = validate(
        &setup.spec,
        &grid_box(&setup.grid),
        VALIDATION_SAMPLES,
        VALIDATION_SEED,
    )?;
    report.tighten_on_grid(&setup.spec, &setup.grid, &setup.mesh)?;
    Ok(report)
}

/// `lower <= v(t, x) <= C (1 + |x|)` at every node.
pub fn growth_check(field: &ValueField, report: &ValidationReport) -> CheckRow {
    let mesh = field.mesh();
    let grid = field.grid();
    let horizon = mesh.t_end - mesh.t0;
    let c = report.growth_constant(horizon);
    let lower = report.lower_bound(horizon);
    let mut fail = None;
    'outer: for k in 0..=mesh.steps {
        for (i, &v) in field.slice(k).expect("in range").iter().enumerate() {
            let x = grid.node(i);
            let upper = c * (1.0 + x.iter().map(|a| a * a).sum::<f64>().sqrt());
            if v < lower {
                fail = Some(witness(field, k, i, v, lower));
                break 'outer;
            }
            if v > upper {
                fail = Some(witness(field, k, i, v, upper));
                break 'outer;
            }
        }
    }
    CheckRow::new(
        "growth bounds",
        fail.is_none(),
        format!("{lower} <= v <= {c} (1 + |x|)"),
        fail,
    )
}

/// One backward step keeps `u <= w` on random ordered slice pairs.
pub fn comparison_check(setup: &Setup, pairs: usize, seed: u64) -> Result<CheckRow, SolveError> {
    let n = setup.grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut fail = None;
    for _ in 0..pairs {
        let k = rng.gen_range(0..setup.mesh.steps);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let w: Vec<f64> = u.iter().map(|a| a + rng.gen_range(0.0..2.0)).collect();
        let su = backward_step(
            &setup.spec,
            &setup.grid,
            &setup.mesh,
            k,
            &u,
            &setup.settings,
        )?;
        let sw = backward_step(
            &setup.spec,
            &setup.grid,
            &setup.mesh,
            k,
            &w,
            &setup.settings,
        )?;
        for (i, (a, b)) in su.iter().zip(&sw).enumerate() {
            worst = worst.max(a - b);
            if a - b > setup.settings.eps_fp && fail.is_none() {
                fail = Some(Witness {
                    time_index: k,
                    t: setup.mesh.time(k),
                    x: setup.grid.node(i),
                    value: *a,
                    bound: *b,
                });
            }
        }
    }
    Ok(CheckRow::new(
        "comparison one-step",
        fail.is_none(),
        format!("{pairs} ordered pairs, max (step u - step w) = {worst:e}"),
        fail,
    ))
}

/// Decreasing `wn` (8 ulps slack) and agreement of its limit with `field`.
pub fn wn_checks(field: &ValueField, setup: &Setup) -> Result<Vec<CheckRow>, SolveError> {
    let (ws, report) = solve_wn(&setup.spec, &setup.grid, &setup.mesh, &setup.settings)?;
    let mut fail = None;
    'outer: for (n, pair) in ws.windows(2).enumerate() {
        for k in 0..=setup.mesh.steps {
            let next = pair[1].slice(k).expect("in range");
            let prev = pair[0].slice(k).expect("in range");
            for (i, (a, b)) in next.iter().zip(prev).enumerate() {
                if *a > b + 8.0 * f64::EPSILON * b.abs().max(f64::MIN_POSITIVE) {
                    fail = Some((n + 1, witness(field, k, i, *a, *b)));
                    break 'outer;
                }
            }
        }
    }
    let monotone = CheckRow::new(
        "wn decreasing",
        fail.is_none(),
        match &fail {
            None => format!(
                "{} iterates, converged at n = {:?}",
                ws.len() - 1,
                report.converged_at
            ),
            Some((n, _)) => format!("w{n} exceeds w{}", n - 1),
        },
        fail.map(|f| f.1),
    );
    let gap = ws.last().expect("w0 present").sup_distance(field);
    let tol = 10.0 * setup.settings.eps_w.max(setup.settings.eps_fp);
    let limit = CheckRow::new(
        "wn limit = qvi",
        report.converged && gap <= tol,
        format!(
            "sup |wn - v| = {gap:e} (tol {tol:e}), converged {}",
            report.converged
        ),
        None,
    );
    Ok(vec![monotone, limit])
}

/// Centered sub-box: the inner two thirds of every axis.
pub fn inner_box(grid: &Grid) -> Vec<(f64, f64)> {
    grid.axes()
        .iter()
        .map(|a| {
            let mid = 0.5 * (a.lo + a.hi);
            let half = (a.hi - a.lo) / 3.0;
            (mid - half, mid + half)
        })
        .collect()
}

/// `max |v(T - d, x) - G1(x)|` over the sub-box for `d = j dt`.
pub fn terminal_gaps(
    field: &ValueField,
    setup: &Setup,
    multiples: &[usize],
) -> Result<Vec<f64>, ProblemError> {
    let g1 = terminal_g1(&setup.grid, &setup.spec)?;
    let bounds = inner_box(&setup.grid);
    let inside: Vec<usize> = (0..setup.grid.len())
        .filter(|&i| {
            setup
                .grid
                .node(i)
                .iter()
                .zip(&bounds)
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
        })
        .collect();
    let steps = field.mesh().steps;
    Ok(multiples
        .iter()
        .map(|&j| {
            let slice = field.slice(steps.saturating_sub(j)).expect("in range");
            inside
                .iter()
                .map(|&i| (slice[i] - g1[i]).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Linear approach to `G1`: gaps at `2dt, 4dt` are at most `K d` with
/// `K` fitted at `8dt`.
pub fn terminal_limit_check(field: &ValueField, setup: &Setup) -> Result<CheckRow, ProblemError> {
    if setup.mesh.steps < 8 {
        return Ok(CheckRow::new(
            "terminal limit",
            true,
            "skipped: fewer than 8 time steps".into(),
            None,
        ));
    }
    let dt = setup.mesh.dt();
    let gaps = terminal_gaps(field, setup, &[2, 4, 8])?;
    let k = gaps[2] / (8.0 * dt);
    let passed = gaps[0] <= k * 2.0 * dt && gaps[1] <= k * 4.0 * dt;
    Ok(CheckRow::new(
        "terminal limit",
        passed,
        format!(
            "gaps at 2dt, 4dt, 8dt = {:.6}, {:.6}, {:.6}; K = {:.6}; bounds {:.6}, {:.6}",
            gaps[0],
            gaps[1],
            gaps[2],
            k,
            k * 2.0 * dt,
            k * 4.0 * dt
        ),
        None,
    ))
}

/// `max |Gamma - exp(t) v|` over spatially interior nodes.
pub fn gamma_gap(gamma: &ValueField, field: &ValueField) -> (f64, Option<(usize, usize)>) {
    let grid = field.grid();
    let mut worst = (0.0, None);
    for k in 0..=field.mesh().steps {
        let e = field.mesh().time(k).exp();
        let g = gamma.slice(k).expect("in range");
        let v = field.slice(k).expect("in range");
        for i in (0..grid.len()).filter(|&i| grid.is_interior(i)) {
            let d = (g[i] - e * v[i]).abs();
            if d > worst.0 {
                worst = (d, Some((k, i)));
            }
        }
    }
    worst
}

pub fn gamma_check(field: &ValueField, setup: &Setup) -> Result<CheckRow, SolveError> {
    let (gamma, _) = solve_gamma(&setup.spec, &setup.grid, &setup.mesh, &setup.settings)?;
    let tol = 5.0 * (setup.grid.max_spacing() + setup.mesh.dt());
    let (gap, at) = gamma_gap(&gamma, field);
    let passed = gap <= tol;
    Ok(CheckRow::new(
        "gamma transform",
        passed,
        format!("max |Gamma - exp(t) v| = {gap:e} (tol {tol:e})"),
        at.filter(|_| !passed).map(|(k, i)| {
            let e = field.mesh().time(k).exp();
            witness(
                field,
                k,
                i,
                gamma.slice(k).unwrap()[i],
                e * field.slice(k).unwrap()[i],
            )
        }),
    ))
}

/// Sweep budget for the solve started from the constant lower bound; the
/// climb from below is slower than the descent from `q0`.
pub const LOWER_INIT_SWEEPS: usize = 2000;

pub fn uniqueness_check(
    field: &ValueField,
    setup: &Setup,
    report: &ValidationReport,
) -> Result<CheckRow, SolveError> {
    let horizon = setup.mesh.t_end - setup.mesh.t0;
    let lower = report.lower_bound(horizon);
    let init = ValueField::filled(setup.grid.clone(), setup.mesh, lower);
    let settings = SolveSettings {
        max_sweeps: setup.settings.max_sweeps.max(LOWER_INIT_SWEEPS),
        ..setup.settings
    };
    let (from_below, _) = solve_qvi(
        &setup.spec,
        &setup.grid,
        &setup.mesh,
        &settings,
        &QviInit::Field(init),
    )?;
    let gap = from_below.sup_distance(field);
    let tol = 10.0 * setup.settings.eps_fp;
    Ok(CheckRow::new(
        "fixed-point uniqueness",
        gap <= tol,
        format!("sup gap between q0 start and constant {lower} start = {gap:e} (tol {tol:e})"),
        None,
    ))
}

/// Solver on a coarse grid matching the oracle lattice.
pub fn coarse_comparison(
    setup: &Setup,
    oracle: &OracleSettings,
) -> Result<(f64, Option<(usize, Vec<f64>)>, ValueField), OracleCheckError> {
    let bounds = grid_box(&setup.grid);
    let table = oracle_table(&setup.spec, &bounds, oracle)?;
    let axes = bounds
        .iter()
        .zip(table.counts())
        .map(|(&(lo, hi), &nodes)| crate::grid::Axis { lo, hi, nodes })
        .collect();
    let grid =
        Grid::new(axes).map_err(|e| OracleCheckError::Solve(SolveError::Problem(e.into())))?;
    let mesh = TimeMesh::new(setup.mesh.t0, setup.mesh.t_end, oracle.steps)
        .map_err(|e| OracleCheckError::Solve(SolveError::Problem(e.into())))?;
    let (v, _) = solve_qvi(&setup.spec, &grid, &mesh, &setup.settings, &QviInit::FromQ0)?;
    let mut worst = (0.0, None);
    for k in 0..=oracle.steps {
        let o = table.slice(k).expect("in range");
        let s = v.slice(k).expect("in range");
        for i in 0..grid.len() {
            let d = (o[i] - s[i]).abs();
            if d > worst.0 {
                worst = (d, Some((k, grid.node(i))));
            }
        }
    }
    Ok((worst.0, worst.1, v))
}

#[derive(Debug, thiserror::Error)]
pub enum OracleCheckError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Oracle spacing used by the suite.
pub const ORACLE_H: f64 = 0.25;

pub fn oracle_check(setup: &Setup, report: &ValidationReport) -> Result<CheckRow, SolveError> {
    if setup.grid.dim() > 2 {
        return Ok(CheckRow::new("oracle", true, "skipped: m > 2".into(), None));
    }
    let horizon = setup.mesh.t_end - setup.mesh.t0;
    let steps = (2.0 * horizon / ORACLE_H).ceil().max(1.0) as usize;
    let settings = OracleSettings {
        h: ORACLE_H,
        steps,
        jumps: 2,
    };
    let dt = horizon / steps as f64;
    let scale = report.growth_constant(horizon).max(1.0);
    let tol = 3.0 * (ORACLE_H + dt) * scale;
    match coarse_comparison(setup, &settings) {
        Ok((gap, at, v)) => {
            let passed = gap <= tol;
            Ok(CheckRow::new(
                "oracle",
                passed,
                format!("h = {ORACLE_H}, {steps} steps: max |solver - oracle| = {gap} (tol {tol})"),
                at.filter(|_| !passed).map(|(k, x)| Witness {
                    time_index: k,
                    t: v.mesh().time(k),
                    value: v.value_at(k, &x),
                    x,
                    bound: tol,
                }),
            ))
        }
        Err(OracleCheckError::Oracle(OracleError::Lattice { .. })) => Ok(CheckRow::new(
            "oracle",
            true,
            format!("skipped: box not a multiple of h = {ORACLE_H}"),
            None,
        )),
        Err(OracleCheckError::Oracle(e)) => Err(SolveError::Geometry(e.to_string())),
        Err(OracleCheckError::Solve(e)) => Err(e),
    }
}

/// Runs the suite on `field` (solved by the caller).
pub fn run_checks(
    field: &ValueField,
    setup: &Setup,
    level: Level,
) -> Result<CheckSuite, SolveError> {
    if field.grid() != &setup.grid || field.mesh() != &setup.mesh {
        return Err(SolveError::Geometry(
            "field does not match the problem grid".into(),
        ));
    }
    let report = validation_report(setup)?;
    let mut rows = vec![
        obstacle_check(field, setup, OBSTACLE_TOL)?,
        terminal_check(field, setup)?,
        growth_check(field, &report),
        comparison_check(setup, 20, 1)?,
    ];
    if level == Level::Full {
        rows.extend(wn_checks(field, setup)?);
        rows.push(terminal_limit_check(field, setup)?);
        rows.push(gamma_check(field, setup)?);
        rows.push(uniqueness_check(field, setup, &report)?);
        rows.push(oracle_check(setup, &report)?);
    }
    Ok(CheckSuite { rows })
}
