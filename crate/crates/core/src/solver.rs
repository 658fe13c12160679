//! Backward semi-Lagrangian schemes.
//!
//! Every scheme walks the time mesh from `T` down to `t0`. The continuation
//! value at a node follows the characteristic `x + f(t,x,tau) dt` for every
//! control in K and keeps the adversary's best:
//!
//! ```text
//! cont(t_k, x) = max over tau of  psi(t_k,x,tau) dt + v(t_{k+1}, x + f(t_k,x,tau) dt)
//! ```
//!
//! The impulse player then compares against the obstacle `N[v](t_k, x)`.
//! Because `N` reads the slice being computed, each slice is an inner fixed
//! point of `v = min(cont, N[v])`, iterated with Jacobi sweeps so that node
//! updates are independent and the result does not depend on thread count.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, TimeMesh, ValueField};
use crate::impulse::{terminal_g, terminal_g1, JumpCandidates};
use crate::problem::{ProblemError, ProblemSpec};

/// Nodes with `|v - N[v]|` at most this are counted as obstacle-binding.
pub const BINDING_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("non-finite value at time index {time}, state {x:?}")]
    NonFinite { time: usize, x: Vec<f64> },
    #[error("inner fixed point at time index {time} not converged after {sweeps} sweeps (delta {delta:e})")]
    NotConverged {
        time: usize,
        sweeps: usize,
        delta: f64,
    },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSettings {
    /// Sup-norm tolerance of the per-slice fixed point.
    pub eps_fp: f64,
    /// Sweep budget per time step.
    pub max_sweeps: usize,
    /// Stop tolerance of the impulse-budget iteration.
    pub eps_w: f64,
    /// Maximum number of impulse-budget iterations.
    pub n_max: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            eps_fp: 1e-9,
            max_sweeps: 50,
            eps_w: 1e-6,
            n_max: 32,
        }
    }
}

impl SolveSettings {
    pub fn check(&self) -> Result<(), String> {
        if !(self.eps_fp > 0.0) || !(self.eps_w > 0.0) {
            return Err("tolerances must be positive".into());
        }
        if self.max_sweeps == 0 || self.n_max == 0 {
            return Err("max_sweeps and n_max must be at least 1".into());
        }
        Ok(())
    }
}

/// Discrete residual of the quasi-variational inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max: f64,
    pub mean: f64,
    /// Fraction of evaluated nodes where the obstacle binds.
    pub binding_fraction: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub scheme: String,
    /// `wn`: sup-norm change per iteration. Slice schemes: final inner
    /// delta per time index (index 0 is `t0`).
    pub deltas: Vec<f64>,
    /// Inner sweeps per time index (slice schemes only).
    pub sweeps: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// First iterate index whose successor is within `eps_w` (`wn` only).
    pub converged_at: Option<usize>,
    pub note: Option<String>,
    pub residual: Option<ResidualStats>,
    pub wall_time_s: f64,
}

impl SolveReport {
    fn new(scheme: &str) -> Self {
        SolveReport {
            scheme: scheme.into(),
            deltas: Vec::new(),
            sweeps: Vec::new(),
            iterations: 0,
            converged: true,
            converged_at: None,
            note: None,
            residual: None,
            wall_time_s: 0.0,
        }
    }
}

/// Starting guess for the per-slice fixed point of [`solve_qvi`].
#[derive(Debug, Clone)]
pub enum QviInit {
    /// Start each slice from the no-impulse value (an upper bound).
    FromQ0,
    /// Start each slice from the given field.
    Field(ValueField),
}

#[derive(Debug, Clone, Copy)]
enum Transform {
    Plain,
    /// `Gamma = exp(t) v`: running cost scaled by `exp(t)`, continuation
    /// discounted by `1/(1+dt)`.
    Exponential,
}

fn check_geometry(spec: &ProblemSpec, grid: &Grid, mesh: &TimeMesh) -> Result<(), SolveError> {
    if grid.dim() != spec.dim() {
        return Err(SolveError::Geometry(format!(
            "grid has {} axes, problem has m = {}",
            grid.dim(),
            spec.dim()
        )));
    }
    if mesh.t0 != spec.t0() || mesh.t_end != spec.t_end() {
        return Err(SolveError::Geometry(
            "time mesh does not span [t0, T]".into(),
        ));
    }
    Ok(())
}

/// Continuation value and maximizing control index at state `x`.
///
/// Controls are scanned in declared order; a later control replaces the
/// current best only if strictly better.
pub fn continuation_at(
    spec: &ProblemSpec,
    grid: &Grid,
    t: f64,
    dt: f64,
    next: &[f64],
    x: &[f64],
) -> Result<(f64, usize), ProblemError> {
    continuation_with(spec, grid, t, dt, next, x, Transform::Plain)
}

fn continuation_with(
    spec: &ProblemSpec,
    grid: &Grid,
    t: f64,
    dt: f64,
    next: &[f64],
    x: &[f64],
    transform: Transform,
) -> Result<(f64, usize), ProblemError> {
    let run_scale = match transform {
        Transform::Plain => 1.0,
        Transform::Exponential => t.exp(),
    };
    let mut best = (f64::NEG_INFINITY, 0);
    let mut foot = vec![0.0; x.len()];
    for (j, tau) in spec.controls().iter().enumerate() {
        let f = spec.drift(t, x, tau)?;
        for ((y, xi), fi) in foot.iter_mut().zip(x).zip(&f) {
            *y = xi + fi * dt;
        }
        let v = spec.running_cost(t, x, tau)? * run_scale * dt + grid.interp(next, &foot);
        if v > best.0 {
            best = (v, j);
        }
    }
    if let Transform::Exponential = transform {
        best.0 *= 1.0 / (1.0 + dt);
    }
    Ok(best)
}

/// Continuation values and argmax control indices at every node of slice `k`.
pub fn continuation(
    spec: &ProblemSpec,
    grid: &Grid,
    mesh: &TimeMesh,
    k: usize,
    next: &[f64],
) -> Result<(Vec<f64>, Vec<usize>), SolveError> {
    continuation_slice(spec, grid, mesh, k, next, Transform::Plain)
}

fn continuation_slice(
    spec: &ProblemSpec,
    grid: &Grid,
    mesh: &TimeMesh,
    k: usize,
    next: &[f64],
    transform: Transform,
) -> Result<(Vec<f64>, Vec<usize>), SolveError> {
    let t = mesh.time(k);
    let dt = mesh.dt();
    let pairs: Vec<(f64, usize)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            let r = continuation_with(spec, grid, t, dt, next, &x, transform)?;
            if !r.0.is_finite() {
                return Err(SolveError::NonFinite { time: k, x });
            }
            Ok(r)
        })
        .collect::<Result<_, SolveError>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Jump candidates for every node at time index `k`.
pub fn node_jumps(
    spec: &ProblemSpec,
    grid: &Grid,
    t: f64,
    cost_scale: f64,
) -> Result<Vec<JumpCandidates>, ProblemError> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| JumpCandidates::new(spec, grid, t, &grid.node(i), cost_scale))
        .collect()
}

fn obstacle_min(cont: f64, jump: f64) -> f64 {
    // continue wins exact ties
    if jump < cont {
        jump
    } else {
        cont
    }
}

/// Solves `v = min(cont, N[v])` on one slice by Jacobi sweeps.
fn slice_fixed_point(
    cont: &[f64],
    jumps: &[JumpCandidates],
    init: Vec<f64>,
    settings: &SolveSettings,
    time: usize,
) -> Result<(Vec<f64>, usize, f64), SolveError> {
    let mut cur = init;
    let mut delta = f64::INFINITY;
    for sweep in 1..=settings.max_sweeps {
        let next: Vec<f64> = (0..cont.len())
            .into_par_iter()
            .map(|i| obstacle_min(cont[i], jumps[i].apply(&cur).value))
            .collect();
        delta = cur
            .par_iter()
            .zip(next.par_iter())
            .map(|(a, b)| (a - b).abs())
            .reduce(|| 0.0, f64::max);
        cur = next;
        if delta < settings.eps_fp {
            return Ok((cur, sweep, delta));
        }
    }
    Err(SolveError::NotConverged {
        time,
        sweeps: settings.max_sweeps,
        delta,
    })
}

/// One backward step of the QVI scheme: slice `k` from slice `k + 1`,
/// starting the inner iteration from the continuation value.
pub fn backward_step(
    spec: &ProblemSpec,
    grid: &Grid,
    mesh: &TimeMesh,
    k: usize,
    next: &[f64],
    settings: &SolveSettings,
) -> Result<Vec<f64>, SolveError> {
    let (cont, _) = continuation(spec, grid, mesh, k, next)?;
    let jumps = node_jumps(spec, grid, mesh.time(k), 1.0)?;
    let init = cont.clone();
    Ok(slice_fixed_point(&cont, &jumps, init, settings, k)?.0)
}

/// No-impulse value: terminal `G`, continuation only.
pub fn solve_q0(
    spec: &ProblemSpec,
    grid: &Grid,
    mesh: &TimeMesh,
) -> Result<ValueField, SolveError> {
    check_geometry(spec, grid, mesh)?;
    let mut field = ValueField::filled(grid.clone(), *mesh, 0.0);
    field.set_slice(mesh.steps, terminal_g(grid, spec)?);
    for k in (0..mesh.steps).rev() {
        let (cont, _) = continuation(spec, grid, mesh, k, field.slice(k + 1).expect("in range"))?;
        field.set_slice(k, cont);
    }
    Ok(field)
}

/// Iterated optimal stopping: `w0 = q0`, then for `n >= 1`
/// `wn(t_k) = min(N[w(n-1)](t_k), cont(wn(t_{k+1})))` with terminal `G1`.
///
/// Stops once two consecutive iterates are within `eps_w` or after
/// `n_max` iterations. All iterates are returned, `w0` first.
pub fn solve_wn(
    spec: &ProblemSpec,
    grid: &Grid,
    mesh: &TimeMesh,
    settings: &SolveSettings,
) -> Result<(Vec<ValueField>, SolveReport), SolveError> {
    let start = Instant::now();
    let mut report = SolveReport::new("wn");
    let mut iterates = vec![solve_q0(spec, grid, mesh)?];
    let g1 = terminal_g1(grid, spec)?;
    let jumps: Vec<Vec<JumpCandidates>> = (0..mesh.steps)
        .map(|k| node_jumps(spec, grid, mesh.time(k), 1.0))
        .collect::<Result<_, _>>()?;
    report.converged = false;
    for n in 1..=settings.n_max {
        let prev = iterates.last().expect("w0 present");
        let mut w = ValueField::filled(grid.clone(), *mesh, 0.0);
        w.set_slice(mesh.steps, g1.clone());
        for k in (0..mesh.steps).rev() {
            let (cont, _) = continuation(spec, grid, mesh, k, w.slice(k + 1).expect("in range"))?;
            let prev_slice = prev.slice(k).expect("in range");
            let slice: Vec<f64> = (0..grid.len())
                .into_par_iter()
                .map(|i| obstacle_min(cont[i], jumps[k][i].apply(prev_slice).value))
                .collect();
            w.set_slice(k, slice);
        }
        let delta = w.sup_distance(prev);
        report.deltas.push(delta);
        report.iterations = n;
        iterates.push(w);
        if delta < settings.eps_w {
            report.converged = true;
            report.converged_at = Some(n - 1);
            break;
        }
    }
    if !report.converged {
        report.note = Some(format!(
            "not converged at n_max = {} (last delta {:e}); iterates remain valid upper bounds",
            settings.n_max,
            report.deltas.last().copied().unwrap_or(f64::NAN)
        ));
    }
    let last = iterates.last().expect("nonempty");
    report.residual = Some(qvi_residual(last, spec)?);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((iterates, report))
}

/// Direct QVI solve: terminal `G1`, per-slice fixed point of
/// `v = min(cont, N[v])`.
pub fn solve_qvi(
    spec: &ProblemSpec,
    grid: &Grid,
    mesh: &TimeMesh,
    settings: &SolveSettings,
    init: &QviInit,
) -> Result<(ValueField, SolveReport), SolveError> {
    let start = Instant::now();
    check_geometry(spec, grid, mesh)?;
    let q0;
    let init_field = match init {
        QviInit::FromQ0 => {
            q0 = solve_q0(spec, grid, mesh)?;
            &q0
        }
        QviInit::Field(f) => {
            if f.grid() != grid || f.mesh() != mesh {
                return Err(SolveError::Geometry(
                    "initial field does not match grid and mesh".into(),
                ));
            }
            f
        }
    };
    let (field, mut report) = backward_slices(
        spec,
        grid,
        mesh,
        settings,
        terminal_g1(grid, spec)?,
        Transform::Plain,
        |k| init_field.slice(k).expect("in range").to_vec(),
    )?;
    report.scheme = "qvi".into();
    report.residual = Some(qvi_residual(&field, spec)?);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((field, report))
}

/// Exponentially transformed scheme for `Gamma = exp(t) v`: obstacle
/// `M` (cost times `exp(t)`), running cost times `exp(t)`, continuation
/// times `1/(1+dt)`, terminal `exp(T) G1`.
pub fn solve_gamma(
    spec: &ProblemSpec,
    grid: &Grid,
    mesh: &TimeMesh,
    settings: &SolveSettings,
) -> Result<(ValueField, SolveReport), SolveError> {
    let start = Instant::now();
    check_geometry(spec, grid, mesh)?;
    let scale = mesh.t_end.exp();
    let terminal: Vec<f64> = terminal_g1(grid, spec)?
        .into_iter()
        .map(|v| scale * v)
        .collect();
    let (field, mut report) = backward_slices(
        spec,
        grid,
        mesh,
        settings,
        terminal,
        Transform::Exponential,
        |_| Vec::new(),
    )?;
    report.scheme = "gamma".into();
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((field, report))
}

fn backward_slices(
    spec: &ProblemSpec,
    grid: &Grid,
    mesh: &TimeMesh,
    settings: &SolveSettings,
    terminal: Vec<f64>,
    transform: Transform,
    init: impl Fn(usize) -> Vec<f64>,
) -> Result<(ValueField, SolveReport), SolveError> {
    let mut report = SolveReport::new("");
    let mut field = ValueField::filled(grid.clone(), *mesh, 0.0);
    field.set_slice(mesh.steps, terminal);
    let mut deltas = vec![0.0; mesh.steps];
    let mut sweeps = vec![0; mesh.steps];
    for k in (0..mesh.steps).rev() {
        let t = mesh.time(k);
        let (cont, _) = continuation_slice(
            spec,
            grid,
            mesh,
            k,
            field.slice(k + 1).expect("in range"),
            transform,
        )?;
        let cost_scale = match transform {
            Transform::Plain => 1.0,
            Transform::Exponential => t.exp(),
        };
        let jumps = node_jumps(spec, grid, t, cost_scale)?;
        let start = init(k);
        let start = if start.is_empty() {
            cont.clone()
        } else {
            start
        };
        let (slice, n, delta) = slice_fixed_point(&cont, &jumps, start, settings, k)?;
        deltas[k] = delta;
        sweeps[k] = n;
        field.set_slice(k, slice);
    }
    report.iterations = sweeps.iter().sum();
    report.deltas = deltas;
    report.sweeps = sweeps;
    Ok((field, report))
}

/// `v - N[v]` at every node of every slice (including `T`).
pub fn obstacle_gaps(
    field: &ValueField,
    spec: &ProblemSpec,
) -> Result<Vec<Vec<f64>>, ProblemError> {
    let grid = field.grid();
    let mesh = field.mesh();
    (0..=mesh.steps)
        .map(|k| {
            let slice = field.slice(k).expect("in range");
            let t = mesh.time(k);
            (0..grid.len())
                .into_par_iter()
                .map(|i| {
                    let c = JumpCandidates::new(spec, grid, t, &grid.node(i), 1.0)?;
                    Ok(slice[i] - c.apply(slice).value)
                })
                .collect()
        })
        .collect()
}

/// Discrete residual `max{min_tau[-v_t - grad v . f - psi], v - N[v]}` at
/// nodes with `t < T` that are interior in space: forward difference in
/// time, central differences in space.
pub fn qvi_residual(field: &ValueField, spec: &ProblemSpec) -> Result<ResidualStats, ProblemError> {
    let grid = field.grid();
    let mesh = field.mesh();
    let dt = mesh.dt();
    let interior: Vec<usize> = (0..grid.len()).filter(|&i| grid.is_interior(i)).collect();
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    let mut binding = 0usize;
    let mut count = 0usize;
    for k in 0..mesh.steps {
        let t = mesh.time(k);
        let cur = field.slice(k).expect("in range");
        let next = field.slice(k + 1).expect("in range");
        let rows: Vec<(f64, bool)> = interior
            .par_iter()
            .map(|&i| {
                let x = grid.node(i);
                let idx = grid.multi_index(i);
                let vt = (next[i] - cur[i]) / dt;
                let grad: Vec<f64> = (0..grid.dim())
                    .map(|a| {
                        let mut up = idx.clone();
                        let mut dn = idx.clone();
                        up[a] += 1;
                        dn[a] -= 1;
                        let h = grid.axes()[a].spacing();
                        (cur[grid.flat_index(&up)] - cur[grid.flat_index(&dn)]) / (2.0 * h)
                    })
                    .collect();
                let mut ham = f64::INFINITY;
                for tau in spec.controls() {
                    let f = spec.drift(t, &x, tau)?;
                    let adv: f64 = grad.iter().zip(&f).map(|(g, fi)| g * fi).sum();
                    ham = ham.min(-vt - adv - spec.running_cost(t, &x, tau)?);
                }
                let gap = cur[i]
                    - JumpCandidates::new(spec, grid, t, &x, 1.0)?
                        .apply(cur)
                        .value;
                Ok((ham.max(gap).abs(), gap.abs() <= BINDING_TOL))
            })
            .collect::<Result<_, ProblemError>>()?;
        for (r, b) in rows {
            max = max.max(r);
            sum += r;
            binding += b as usize;
            count += 1;
        }
    }
    Ok(ResidualStats {
        max,
        mean: if count > 0 { sum / count as f64 } else { 0.0 },
        binding_fraction: if count > 0 {
            binding as f64 / count as f64
        } else {
            0.0
        },
        nodes: count,
    })
}
