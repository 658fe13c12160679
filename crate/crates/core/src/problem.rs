//! Game definition: dynamics, jumps, costs, control and impulse sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{self, EvalError, Expr, ParseError, Scope};
use crate::grid::{Axis, Grid, GridError, TimeMesh};
use crate::problem_file::{parse_reals, FileError, ProblemFile};
use crate::solver::SolveSettings;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error(transparent)]
    File(#[from] FileError),
    #[error("[{section}] {key}: {source}")]
    Expr {
        section: String,
        key: String,
        #[source]
        source: ParseError,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("control set K is empty")]
    EmptyControls,
    #[error("impulse set E is empty")]
    EmptyImpulses,
    #[error("impulse 0 not allowed (entry {index} of [impulses])")]
    ZeroImpulse { index: usize },
    #[error("horizon must satisfy 0 <= t0 < T (got t0={t0}, T={t_end})")]
    Horizon { t0: f64, t_end: f64 },
    #[error("unknown catalog problem `{0}` (known: dg1, dg1-rich, txcost)")]
    UnknownBuiltin(String),
    #[error("impulse cost must be positive: C(t={t}, x={x:?}, xi={xi:?}) = {value}")]
    NonPositiveCost {
        t: f64,
        x: Vec<f64>,
        xi: Vec<f64>,
        value: f64,
    },
    #[error("evaluating {what} at t={t}, x={x:?}, arg={arg:?}: {source}")]
    Eval {
        what: String,
        t: f64,
        x: Vec<f64>,
        arg: Vec<f64>,
        #[source]
        source: EvalError,
    },
    #[error("validation needs at least 2 samples and a box matching the state dimension")]
    BadValidationInput,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("[solver] {0}")]
    Settings(String),
}

/// Textual game definition; [`ProblemDef::build`] parses and checks it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemDef {
    pub name: String,
    pub dim: usize,
    pub t0: f64,
    pub t_end: f64,
    pub controls: Vec<Vec<f64>>,
    pub impulses: Vec<Vec<f64>>,
    pub drift: Vec<String>,
    pub jump: Vec<String>,
    pub running_cost: String,
    pub impulse_cost: String,
    pub terminal_cost: String,
}

impl ProblemDef {
    pub fn build(&self) -> Result<ProblemSpec, ProblemError> {
        let m = self.dim;
        if m == 0 {
            return Err(ProblemError::Dimension("m must be positive".into()));
        }
        if !(self.t0 >= 0.0 && self.t0 < self.t_end && self.t_end.is_finite()) {
            return Err(ProblemError::Horizon {
                t0: self.t0,
                t_end: self.t_end,
            });
        }
        if self.controls.is_empty() {
            return Err(ProblemError::EmptyControls);
        }
        if self.impulses.is_empty() {
            return Err(ProblemError::EmptyImpulses);
        }
        let p = self.controls[0].len();
        if self.controls.iter().any(|c| c.len() != p) {
            return Err(ProblemError::Dimension(
                "control vectors have inconsistent arity".into(),
            ));
        }
        let q = self.impulses[0].len();
        if self.impulses.iter().any(|c| c.len() != q) {
            return Err(ProblemError::Dimension(
                "impulse vectors have inconsistent arity".into(),
            ));
        }
        if let Some(index) = self
            .impulses
            .iter()
            .position(|xi| xi.iter().all(|v| *v == 0.0))
        {
            return Err(ProblemError::ZeroImpulse { index });
        }
        if self.drift.len() != m {
            return Err(ProblemError::Dimension(format!(
                "[dynamics] has {} components, m = {m}",
                self.drift.len()
            )));
        }
        if self.jump.len() != m {
            return Err(ProblemError::Dimension(format!(
                "[jumps] has {} components, m = {m}",
                self.jump.len()
            )));
        }

        let control_scope = Scope::problem(m, "tau", p);
        let impulse_scope = Scope::problem(m, "xi", q);
        let state_scope = Scope::new((1..=m).map(|i| format!("x{i}")));
        let parse = |section: &str, key: String, src: &str, scope: &Scope| {
            expr::parse(src, scope).map_err(|source| ProblemError::Expr {
                section: section.into(),
                key,
                source,
            })
        };
        let drift = self
            .drift
            .iter()
            .enumerate()
            .map(|(i, s)| parse("dynamics", format!("f{}", i + 1), s, &control_scope))
            .collect::<Result<Vec<_>, _>>()?;
        let jump = self
            .jump
            .iter()
            .enumerate()
            .map(|(i, s)| parse("jumps", format!("g{}", i + 1), s, &impulse_scope))
            .collect::<Result<Vec<_>, _>>()?;
        let running = parse("costs", "psi".into(), &self.running_cost, &control_scope)?;
        let cost = parse(
            "costs",
            "impulse_cost".into(),
            &self.impulse_cost,
            &impulse_scope,
        )?;
        let terminal = parse(
            "costs",
            "terminal".into(),
            &self.terminal_cost,
            &state_scope,
        )?;

        Ok(ProblemSpec {
            def: self.clone(),
            control_dim: p,
            impulse_dim: q,
            drift,
            jump,
            running,
            cost,
            terminal,
        })
    }
}

/// A validated game. Immutable; evaluation methods are pure.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    def: ProblemDef,
    control_dim: usize,
    impulse_dim: usize,
    drift: Vec<Expr>,
    jump: Vec<Expr>,
    running: Expr,
    cost: Expr,
    terminal: Expr,
}

fn slots(t: f64, x: &[f64], arg: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(1 + x.len() + arg.len());
    s.push(t);
    s.extend_from_slice(x);
    s.extend_from_slice(arg);
    s
}

impl ProblemSpec {
    pub fn def(&self) -> &ProblemDef {
        &self.def
    }

    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn dim(&self) -> usize {
        self.def.dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn impulse_dim(&self) -> usize {
        self.impulse_dim
    }

    pub fn t0(&self) -> f64 {
        self.def.t0
    }

    pub fn t_end(&self) -> f64 {
        self.def.t_end
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.def.controls
    }

    pub fn impulses(&self) -> &[Vec<f64>] {
        &self.def.impulses
    }

    fn eval_err(what: &str, t: f64, x: &[f64], arg: &[f64], source: EvalError) -> ProblemError {
        ProblemError::Eval {
            what: what.to_string(),
            t,
            x: x.to_vec(),
            arg: arg.to_vec(),
            source,
        }
    }

    /// f(t, x, tau).
    pub fn drift(&self, t: f64, x: &[f64], tau: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let s = slots(t, x, tau);
        self.drift
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.eval_slots(&s)
                    .map_err(|err| Self::eval_err(&format!("f{}", i + 1), t, x, tau, err))
            })
            .collect()
    }

    /// g(t, x, xi).
    pub fn jump(&self, t: f64, x: &[f64], xi: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let s = slots(t, x, xi);
        self.jump
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.eval_slots(&s)
                    .map_err(|err| Self::eval_err(&format!("g{}", i + 1), t, x, xi, err))
            })
            .collect()
    }

    /// x + g(t, x, xi).
    pub fn jump_target(&self, t: f64, x: &[f64], xi: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let g = self.jump(t, x, xi)?;
        Ok(x.iter().zip(g).map(|(a, b)| a + b).collect())
    }

    /// psi(t, x, tau).
    pub fn running_cost(&self, t: f64, x: &[f64], tau: &[f64]) -> Result<f64, ProblemError> {
        self.running
            .eval_slots(&slots(t, x, tau))
            .map_err(|err| Self::eval_err("psi", t, x, tau, err))
    }

    /// C(t, x, xi).
    pub fn impulse_cost(&self, t: f64, x: &[f64], xi: &[f64]) -> Result<f64, ProblemError> {
        self.cost
            .eval_slots(&slots(t, x, xi))
            .map_err(|err| Self::eval_err("impulse_cost", t, x, xi, err))
    }

    /// G(x).
    pub fn terminal_cost(&self, x: &[f64]) -> Result<f64, ProblemError> {
        self.terminal
            .eval_slots(x)
            .map_err(|err| Self::eval_err("terminal", self.def.t_end, x, &[], err))
    }
}

/// Reads the game part of a problem file.
pub fn load_problem(file: &ProblemFile) -> Result<ProblemSpec, ProblemError> {
    let meta = file.require("meta")?;
    let dim = meta.count("m")?;
    let t0 = meta.real_or("t0", 0.0)?;
    let t_end = meta.real("T")?;
    let name = meta
        .get("name")
        .map(|l| l.value.clone())
        .unwrap_or_else(|| "problem".into());
    let controls = file.require("controls")?.vectors()?;
    let impulses = file.require("impulses")?.vectors()?;
    let components = |section: &str, prefix: &str| -> Result<Vec<String>, ProblemError> {
        let sec = file.require(section)?;
        let mut out = Vec::new();
        for line in &sec.lines {
            let expected = format!("{prefix}{}", out.len() + 1);
            match &line.key {
                Some(k) if *k == expected => out.push(line.value.clone()),
                _ => {
                    return Err(sec
                        .error(line, format!("expected `{expected} = <expression>`"))
                        .into())
                }
            }
        }
        Ok(out)
    };
    let drift = components("dynamics", "f")?;
    let jump = components("jumps", "g")?;
    let costs = file.require("costs")?;
    ProblemDef {
        name,
        dim,
        t0,
        t_end,
        controls,
        impulses,
        drift,
        jump,
        running_cost: costs.require("psi")?.value.clone(),
        impulse_cost: costs.require("impulse_cost")?.value.clone(),
        terminal_cost: costs.require("terminal")?.value.clone(),
    }
    .build()
}

/// Problem plus its discretization, as described by a complete file.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: ProblemSpec,
    pub grid: Grid,
    pub mesh: TimeMesh,
    pub settings: SolveSettings,
}

impl Setup {
    pub fn from_text(text: &str) -> Result<Self, ProblemError> {
        Self::from_file(&ProblemFile::parse(text)?)
    }

    pub fn from_file(file: &ProblemFile) -> Result<Self, ProblemError> {
        let spec = load_problem(file)?;
        let sec = file.require("grid")?;
        let mut axes = Vec::new();
        for i in 1..=spec.dim() {
            let line = sec.require(&format!("x{i}"))?;
            let parts = parse_reals(&line.value)
                .filter(|v| v.len() == 3 && v[2] >= 2.0 && v[2].fract() == 0.0)
                .ok_or_else(|| sec.error(line, "expected `lo hi nodes`"))?;
            axes.push(Axis {
                lo: parts[0],
                hi: parts[1],
                nodes: parts[2] as usize,
            });
        }
        let grid = Grid::new(axes)?;
        let steps = sec.count("time_steps")?;
        let mesh = TimeMesh::new(spec.t0(), spec.t_end(), steps)?;
        let defaults = SolveSettings::default();
        let settings = match file.section("solver") {
            None => defaults,
            Some(s) => SolveSettings {
                eps_fp: s.real_or("eps_fp", defaults.eps_fp)?,
                max_sweeps: s.count_or("max_sweeps", defaults.max_sweeps)?,
                eps_w: s.real_or("eps_w", defaults.eps_w)?,
                n_max: s.count_or("n_max", defaults.n_max)?,
            },
        };
        settings.check().map_err(ProblemError::Settings)?;
        Ok(Setup {
            spec,
            grid,
            mesh,
            settings,
        })
    }
}

const DG1: &str = include_str!("catalog/dg1.prob");
const DG1_RICH: &str = include_str!("catalog/dg1-rich.prob");
const TXCOST: &str = include_str!("catalog/txcost.prob");

pub const CATALOG: [&str; 3] = ["dg1", "dg1-rich", "txcost"];

/// Problem-file text of a catalog problem.
pub fn builtin_text(name: &str) -> Result<&'static str, ProblemError> {
    match name {
        "dg1" => Ok(DG1),
        "dg1-rich" => Ok(DG1_RICH),
        "txcost" => Ok(TXCOST),
        other => Err(ProblemError::UnknownBuiltin(other.to_string())),
    }
}

pub fn builtin(name: &str) -> Result<ProblemSpec, ProblemError> {
    load_problem(&ProblemFile::parse(builtin_text(name)?)?)
}

/// Catalog problem with its default discretization.
pub fn builtin_setup(name: &str) -> Result<Setup, ProblemError> {
    Setup::from_text(builtin_text(name)?)
}

/// Sampled estimates of the regularity constants of the problem data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub est_lipschitz_f: f64,
    pub est_lipschitz_g: f64,
    pub est_growth_f: f64,
    pub est_growth_g: f64,
    pub est_growth_psi: f64,
    pub est_growth_g_terminal: f64,
    pub psi_lower: f64,
    pub g_terminal_lower: f64,
    pub cost_min: f64,
    pub samples: usize,
}

impl ValidationReport {
    /// max(Lipschitz estimates of f and g).
    pub fn lipschitz(&self) -> f64 {
        self.est_lipschitz_f.max(self.est_lipschitz_g)
    }

    /// Linear-growth constant of the no-impulse value on `[t0, T]`:
    /// `(c_psi (T - t0) + c_G) exp(c_f (T - t0))`.
    pub fn growth_constant(&self, horizon: f64) -> f64 {
        (self.est_growth_psi * horizon + self.est_growth_g_terminal)
            * (self.est_growth_f * horizon).exp()
    }

    /// `(T - t0) min(0, psi_lower) + G_lower`.
    pub fn lower_bound(&self, horizon: f64) -> f64 {
        horizon * self.psi_lower.min(0.0) + self.g_terminal_lower
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Estimates the constants of the standing assumptions by seeded sampling
/// over `domain` (one `(lo, hi)` per state axis).
pub fn validate(
    spec: &ProblemSpec,
    domain: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> Result<ValidationReport, ProblemError> {
    if samples < 2 || domain.len() != spec.dim() || domain.iter().any(|(lo, hi)| !(lo <= hi)) {
        return Err(ProblemError::BadValidationInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ValidationReport {
        est_lipschitz_f: 0.0,
        est_lipschitz_g: 0.0,
        est_growth_f: 0.0,
        est_growth_g: 0.0,
        est_growth_psi: 0.0,
        est_growth_g_terminal: 0.0,
        psi_lower: f64::INFINITY,
        g_terminal_lower: f64::INFINITY,
        cost_min: f64::INFINITY,
        samples,
    };
    let point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        domain
            .iter()
            .map(|(lo, hi)| {
                if lo == hi {
                    *lo
                } else {
                    rng.gen_range(*lo..=*hi)
                }
            })
            .collect()
    };
    for _ in 0..samples {
        let t = rng.gen_range(spec.t0()..=spec.t_end());
        let x = point(&mut rng);
        let y = point(&mut rng);
        let tau = &spec.controls()[rng.gen_range(0..spec.controls().len())];
        let xi = &spec.impulses()[rng.gen_range(0..spec.impulses().len())];
        let d = dist(&x, &y);

        let fx = spec.drift(t, &x, tau)?;
        let fy = spec.drift(t, &y, tau)?;
        let gx = spec.jump(t, &x, xi)?;
        let gy = spec.jump(t, &y, xi)?;
        if d > 0.0 {
            report.est_lipschitz_f = report.est_lipschitz_f.max(dist(&fx, &fy) / d);
            report.est_lipschitz_g = report.est_lipschitz_g.max(dist(&gx, &gy) / d);
        }
        for (z, fz, gz) in [(&x, &fx, &gx), (&y, &fy, &gy)] {
            let scale = 1.0 + norm(z);
            report.est_growth_f = report.est_growth_f.max(norm(fz) / scale);
            report.est_growth_g = report.est_growth_g.max(norm(gz) / scale);
            let psi = spec.running_cost(t, z, tau)?;
            report.est_growth_psi = report.est_growth_psi.max(psi.abs() / scale);
            report.psi_lower = report.psi_lower.min(psi);
            let gt = spec.terminal_cost(z)?;
            report.est_growth_g_terminal = report.est_growth_g_terminal.max(gt.abs() / scale);
            report.g_terminal_lower = report.g_terminal_lower.min(gt);
            let c = spec.impulse_cost(t, z, xi)?;
            if !(c > 0.0) {
                return Err(ProblemError::NonPositiveCost {
                    t,
                    x: z.clone(),
                    xi: xi.clone(),
                    value: c,
                });
            }
            report.cost_min = report.cost_min.min(c);
        }
    }
    Ok(report)
}

impl ValidationReport {
    /// Folds exact evaluations at every grid node, time node, control and
    /// impulse into the sampled estimates.
    pub fn tighten_on_grid(
        &mut self,
        spec: &ProblemSpec,
        grid: &Grid,
        mesh: &TimeMesh,
    ) -> Result<(), ProblemError> {
        for i in 0..grid.len() {
            let x = grid.node(i);
            let scale = 1.0 + norm(&x);
            let gt = spec.terminal_cost(&x)?;
            self.est_growth_g_terminal = self.est_growth_g_terminal.max(gt.abs() / scale);
            self.g_terminal_lower = self.g_terminal_lower.min(gt);
            for k in 0..=mesh.steps {
                let t = mesh.time(k);
                for tau in spec.controls() {
                    let psi = spec.running_cost(t, &x, tau)?;
                    self.est_growth_psi = self.est_growth_psi.max(psi.abs() / scale);
                    self.psi_lower = self.psi_lower.min(psi);
                    self.est_growth_f = self
                        .est_growth_f
                        .max(norm(&spec.drift(t, &x, tau)?) / scale);
                }
                for xi in spec.impulses() {
                    self.est_growth_g = self.est_growth_g.max(norm(&spec.jump(t, &x, xi)?) / scale);
                    self.cost_min = self.cost_min.min(spec.impulse_cost(t, &x, xi)?);
                }
            }
        }
        Ok(())
    }
}

/// Box of a grid as `(lo, hi)` pairs.
pub fn grid_box(grid: &Grid) -> Vec<(f64, f64)> {
    grid.axes().iter().map(|a| (a.lo, a.hi)).collect()
}
