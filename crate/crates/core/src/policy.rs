//! Feedback decisions, controlled trajectories and payoff accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{self, Expr, ParseError, Scope};
use crate::grid::{Grid, TimeMesh, ValueField};
use crate::impulse::{apply_n, terminal_value};
use crate::problem::{ProblemError, ProblemSpec};
use crate::solver::{continuation, continuation_at, SolveError};

/// Jumps allowed at one time node before continuing is forced.
pub const MAX_JUMPS_PER_NODE: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("adversary expression {index}: {source}")]
    Adversary { index: usize, source: ParseError },
    #[error("adversary has {got} components, controls have {expected}")]
    AdversaryDimension { got: usize, expected: usize },
    #[error("adversary expression evaluation failed: {0}")]
    AdversaryEval(String),
    #[error("start state {0:?} is outside the grid box")]
    StartOutside(Vec<f64>),
    #[error("start time index {0} is past the horizon")]
    StartTime(usize),
    #[error("state dimension {got} does not match m = {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Decision {
    /// Let the adversary move; the index is the maximizing control in K.
    Continue(usize),
    /// Jump with the impulse at this index in E.
    Jump(usize),
}

/// Node-wise decisions derived from a solved value field.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    field: ValueField,
    decisions: Vec<Vec<Decision>>,
    eps: f64,
}

impl FeedbackPolicy {
    pub fn field(&self) -> &ValueField {
        &self.field
    }

    /// Jump margin: a jump is taken only if it beats continuing by more.
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn decision(&self, k: usize, node: usize) -> Option<Decision> {
        self.decisions.get(k)?.get(node).copied()
    }

    pub fn slice(&self, k: usize) -> Option<&[Decision]> {
        self.decisions.get(k).map(Vec::as_slice)
    }

    /// Decision at an arbitrary state and time index `k < steps`, with the
    /// continuation value and the best jump value that produced it.
    pub fn decide(
        &self,
        spec: &ProblemSpec,
        k: usize,
        x: &[f64],
    ) -> Result<(Decision, f64, f64), ProblemError> {
        let grid = self.field.grid();
        let mesh = self.field.mesh();
        let t = mesh.time(k);
        let next = self.field.slice(k + 1).expect("k < steps");
        let (cont, tau) = continuation_at(spec, grid, t, mesh.dt(), next, x)?;
        let jump = apply_n(self.field.slice(k).expect("in range"), grid, spec, t, x)?;
        Ok(match jump.best {
            Some(i) if jump.value < cont - self.eps => (Decision::Jump(i), cont, jump.value),
            _ => (Decision::Continue(tau), cont, jump.value),
        })
    }
}

/// Jump where `N[v] < cont - eps`, else continue with the maximizing
/// control. At `T` a jump is taken where the terminal one-jump value beats
/// `G`.
pub fn extract_policy(
    field: &ValueField,
    spec: &ProblemSpec,
    eps: f64,
) -> Result<FeedbackPolicy, PolicyError> {
    let grid = field.grid();
    let mesh = field.mesh();
    let mut decisions = Vec::with_capacity(mesh.steps + 1);
    for k in 0..mesh.steps {
        let slice = field.slice(k).expect("in range");
        let (cont, tau) = continuation(spec, grid, mesh, k, field.slice(k + 1).expect("in range"))?;
        let row = (0..grid.len())
            .map(|i| {
                let jump = apply_n(slice, grid, spec, mesh.time(k), &grid.node(i))?;
                Ok(match jump.best {
                    Some(j) if jump.value < cont[i] - eps => Decision::Jump(j),
                    _ => Decision::Continue(tau[i]),
                })
            })
            .collect::<Result<Vec<_>, ProblemError>>()?;
        decisions.push(row);
    }
    let last = (0..grid.len())
        .map(|i| {
            Ok(match terminal_value(spec, &grid.node(i))?.best {
                Some(j) => Decision::Jump(j),
                None => Decision::Continue(0),
            })
        })
        .collect::<Result<Vec<_>, ProblemError>>()?;
    decisions.push(last);
    Ok(FeedbackPolicy {
        field: field.clone(),
        decisions,
        eps,
    })
}

/// How the adversary picks its control along a simulated trajectory.
#[derive(Debug, Clone)]
pub enum Adversary {
    /// Greedy one-step lookahead against the solved field.
    WorstCase,
    /// One expression in `t, x1..xm` per control component.
    Fixed(Vec<String>),
    /// Uniform draws from K.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpEvent {
    pub t: f64,
    pub time_index: usize,
    pub xi: Vec<f64>,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub cost: f64,
    /// Continuation value minus jump value at decision time.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    /// Left limit of the state at `t`.
    pub state: Vec<f64>,
    pub decision: String,
    pub incremental_cost: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    pub events: Vec<JumpEvent>,
    /// Adversary control applied on each step.
    pub controls: Vec<Vec<f64>>,
    pub running: f64,
    pub jump_cost: f64,
    pub terminal: f64,
    pub total: f64,
    /// The state left the grid box; accounting stops at that point.
    pub truncated: bool,
    /// Nodes where the jump cap forced a continue.
    pub forced_continues: usize,
}

enum Chooser {
    WorstCase,
    Fixed(Vec<Expr>),
    Random(ChaCha8Rng),
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Euler simulation from `(t_{k0}, x0)` under the feedback policy.
pub fn simulate(
    spec: &ProblemSpec,
    policy: &FeedbackPolicy,
    adversary: &Adversary,
    k0: usize,
    x0: &[f64],
) -> Result<Trajectory, PolicyError> {
    let grid: &Grid = policy.field.grid();
    let mesh: &TimeMesh = policy.field.mesh();
    if x0.len() != spec.dim() {
        return Err(PolicyError::Dimension {
            got: x0.len(),
            expected: spec.dim(),
        });
    }
    if !grid.contains(x0) {
        return Err(PolicyError::StartOutside(x0.to_vec()));
    }
    if k0 > mesh.steps {
        return Err(PolicyError::StartTime(k0));
    }
    let mut chooser = match adversary {
        Adversary::WorstCase => Chooser::WorstCase,
        Adversary::Random(seed) => Chooser::Random(ChaCha8Rng::seed_from_u64(*seed)),
        Adversary::Fixed(sources) => {
            if sources.len() != spec.control_dim() {
                return Err(PolicyError::AdversaryDimension {
                    got: sources.len(),
                    expected: spec.control_dim(),
                });
            }
            let scope = Scope::problem(spec.dim(), "x", 0);
            let exprs = sources
                .iter()
                .enumerate()
                .map(|(index, s)| {
                    expr::parse(s, &scope)
                        .map_err(|source| PolicyError::Adversary { index, source })
                })
                .collect::<Result<_, _>>()?;
            Chooser::Fixed(exprs)
        }
    };

    let dt = mesh.dt();
    let mut y = x0.to_vec();
    let mut out = Trajectory {
        rows: Vec::new(),
        events: Vec::new(),
        controls: Vec::new(),
        running: 0.0,
        jump_cost: 0.0,
        terminal: 0.0,
        total: 0.0,
        truncated: false,
        forced_continues: 0,
    };
    let mut cumulative = 0.0;

    for k in k0..mesh.steps {
        let t = mesh.time(k);
        let state = y.clone();
        let mut incremental = 0.0;
        let mut labels = Vec::new();
        let mut jumps = 0;
        let tau_index = loop {
            let (decision, cont, jump_value) = policy.decide(spec, k, &y)?;
            match decision {
                Decision::Jump(j) if jumps < MAX_JUMPS_PER_NODE => {
                    let xi = &spec.impulses()[j];
                    let gain = cont - jump_value;
                    assert!(gain > 0.0, "jump taken without a strict gain");
                    let cost = spec.impulse_cost(t, &y, xi)?;
                    let post = spec.jump_target(t, &y, xi)?;
                    out.events.push(JumpEvent {
                        t,
                        time_index: k,
                        xi: xi.clone(),
                        pre: y.clone(),
                        post: post.clone(),
                        cost,
                        gain,
                    });
                    out.jump_cost += cost;
                    incremental += cost;
                    labels.push(format!("jump({})", fmt_vec(xi)));
                    jumps += 1;
                    y = post;
                    if !grid.contains(&y) {
                        out.truncated = true;
                        break None;
                    }
                }
                Decision::Jump(_) => {
                    out.forced_continues += 1;
                    break Some(
                        continuation_at(
                            spec,
                            grid,
                            t,
                            dt,
                            policy.field.slice(k + 1).expect("in range"),
                            &y,
                        )?
                        .1,
                    );
                }
                Decision::Continue(tau) => break Some(tau),
            }
        };
        let Some(tau_index) = tau_index else {
            cumulative += incremental;
            out.rows.push(TrajectoryRow {
                t,
                state,
                decision: labels.join(";"),
                incremental_cost: incremental,
                cumulative,
            });
            break;
        };
        let tau = match &mut chooser {
            Chooser::WorstCase => spec.controls()[tau_index].clone(),
            Chooser::Random(rng) => {
                spec.controls()[rng.gen_range(0..spec.controls().len())].clone()
            }
            Chooser::Fixed(exprs) => {
                let mut slots = vec![t];
                slots.extend_from_slice(&y);
                exprs
                    .iter()
                    .map(|e| {
                        e.eval_slots(&slots)
                            .map_err(|e| PolicyError::AdversaryEval(e.to_string()))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        let run = spec.running_cost(t, &y, &tau)? * dt;
        out.running += run;
        incremental += run;
        cumulative += incremental;
        labels.push(format!("continue({})", fmt_vec(&tau)));
        out.rows.push(TrajectoryRow {
            t,
            state,
            decision: labels.join(";"),
            incremental_cost: incremental,
            cumulative,
        });
        let f = spec.drift(t, &y, &tau)?;
        for (a, b) in y.iter_mut().zip(&f) {
            *a += b * dt;
        }
        out.controls.push(tau);
        if !grid.contains(&y) {
            out.truncated = true;
            break;
        }
    }

    if !out.truncated {
        // at T a jump routes the terminal cost through the post-jump state
        let t = mesh.t_end;
        let state = y.clone();
        let mut incremental = 0.0;
        let mut label = String::from("stop");
        if let Some(j) = terminal_value(spec, &y)?.best {
            let xi = &spec.impulses()[j];
            let cost = spec.impulse_cost(t, &y, xi)?;
            let post = spec.jump_target(t, &y, xi)?;
            let gain = spec.terminal_cost(&y)? - spec.terminal_cost(&post)? - cost;
            out.events.push(JumpEvent {
                t,
                time_index: mesh.steps,
                xi: xi.clone(),
                pre: y.clone(),
                post: post.clone(),
                cost,
                gain,
            });
            out.jump_cost += cost;
            incremental += cost;
            label = format!("jump({})", fmt_vec(xi));
            y = post;
        }
        out.terminal = spec.terminal_cost(&y)?;
        incremental += out.terminal;
        cumulative += incremental;
        out.rows.push(TrajectoryRow {
            t,
            state,
            decision: label,
            incremental_cost: incremental,
            cumulative,
        });
    }
    out.total = out.running + out.jump_cost + out.terminal;
    Ok(out)
}

/// Controls shared by both trajectories of a Lipschitz comparison.
#[derive(Debug, Clone, Default)]
pub struct SharedControls {
    /// Adversary control per time step.
    pub taus: Vec<Vec<f64>>,
    /// `(time index, impulse)`; applied before the drift step at that node.
    pub jumps: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    /// `(t, |y1 - y2|, bound)` at every sample time.
    pub rows: Vec<(f64, f64, f64)>,
    pub max_gap: f64,
    pub lipschitz: f64,
    pub violated: bool,
}

/// Integrates two starts under identical controls and compares the gap
/// with `exp(L (s - t)) (1 + L)^n |x1 - x2|`, `n` counting the jumps up to
/// `s`.
pub fn lipschitz_check(
    spec: &ProblemSpec,
    controls: &SharedControls,
    x1: &[f64],
    x2: &[f64],
    mesh: &TimeMesh,
    lipschitz: f64,
) -> Result<LipschitzReport, PolicyError> {
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let d0 = dist(x1, x2);
    let dt = mesh.dt();
    let mut y1 = x1.to_vec();
    let mut y2 = x2.to_vec();
    let mut n = 0i32;
    let mut report = LipschitzReport {
        rows: Vec::new(),
        max_gap: 0.0,
        lipschitz,
        violated: false,
    };
    let record = |k: usize, y1: &[f64], y2: &[f64], n: i32, report: &mut LipschitzReport| {
        let s = mesh.time(k);
        let gap = dist(y1, y2);
        let bound = (lipschitz * (s - mesh.t0)).exp() * (1.0 + lipschitz).powi(n) * d0;
        // relative slack for rounding in the integration
        report.violated |= gap > bound * (1.0 + 1e-12) + 1e-15;
        report.max_gap = report.max_gap.max(gap);
        report.rows.push((s, gap, bound));
    };
    for k in 0..=mesh.steps {
        let t = mesh.time(k);
        for (_, xi) in controls.jumps.iter().filter(|(j, _)| *j == k) {
            y1 = spec.jump_target(t, &y1, xi)?;
            y2 = spec.jump_target(t, &y2, xi)?;
            n += 1;
        }
        record(k, &y1, &y2, n, &mut report);
        if k == mesh.steps {
            break;
        }
        let tau = controls
            .taus
            .get(k)
            .or_else(|| controls.taus.last())
            .cloned()
            .unwrap_or_else(|| spec.controls()[0].clone());
        let f1 = spec.drift(t, &y1, &tau)?;
        let f2 = spec.drift(t, &y2, &tau)?;
        for (a, b) in y1.iter_mut().zip(&f1) {
            *a += b * dt;
        }
        for (a, b) in y2.iter_mut().zip(&f2) {
            *a += b * dt;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin, builtin_setup, validate, Setup};
    use crate::solver::{solve_qvi, QviInit};

    fn solved(setup: &Setup) -> ValueField {
        solve_qvi(
            &setup.spec,
            &setup.grid,
            &setup.mesh,
            &setup.settings,
            &QviInit::FromQ0,
        )
        .unwrap()
        .0
    }

    fn node_of(grid: &Grid, x: f64) -> usize {
        (0..grid.len())
            .min_by(|&a, &b| {
                (grid.node(a)[0] - x)
                    .abs()
                    .total_cmp(&(grid.node(b)[0] - x).abs())
            })
            .unwrap()
    }

    #[test]
    fn dg1_decisions() {
        let s = builtin_setup("dg1").unwrap();
        let v = solved(&s);
        let policy = extract_policy(&v, &s.spec, s.settings.eps_fp).unwrap();
        assert!(matches!(
            policy.decision(0, node_of(&s.grid, 0.0)),
            Some(Decision::Continue(_))
        ));
        // deferring a jump is free until the last step, so (0, 3) is a tie
        let (d, cont, jump) = policy.decide(&s.spec, 0, &[3.0]).unwrap();
        assert!(matches!(d, Decision::Continue(_)));
        assert!((cont - jump).abs() < 1e-9);
        assert_eq!(
            policy.decision(99, node_of(&s.grid, 3.5)),
            Some(Decision::Jump(0))
        );
        assert_eq!(
            policy.decision(100, node_of(&s.grid, 3.0)),
            Some(Decision::Jump(0))
        );
        for k in 0..s.mesh.steps {
            for (i, d) in policy.slice(k).unwrap().iter().enumerate() {
                if let Decision::Jump(_) = d {
                    let (_, cont, jump) = policy.decide(&s.spec, k, &s.grid.node(i)).unwrap();
                    assert!(jump < cont - s.settings.eps_fp);
                }
            }
        }
    }

    #[test]
    fn priced_out_policy_never_jumps() {
        let s = builtin_setup("dg1").unwrap();
        let mut def = s.spec.def().clone();
        def.impulse_cost = "1000".into();
        let spec = def.build().unwrap();
        let (v, _) = solve_qvi(&spec, &s.grid, &s.mesh, &s.settings, &QviInit::FromQ0).unwrap();
        let policy = extract_policy(&v, &spec, s.settings.eps_fp).unwrap();
        for k in 0..=s.mesh.steps {
            assert!(policy
                .slice(k)
                .unwrap()
                .iter()
                .all(|d| matches!(d, Decision::Continue(_))));
        }
    }

    #[test]
    fn frozen_priced_out_payoff_is_terminal_cost() {
        let s = builtin_setup("dg1").unwrap();
        let mut def = s.spec.def().clone();
        def.drift = vec!["0 * tau1".into()];
        def.impulse_cost = "1000".into();
        let spec = def.build().unwrap();
        let (v, _) = solve_qvi(&spec, &s.grid, &s.mesh, &s.settings, &QviInit::FromQ0).unwrap();
        let policy = extract_policy(&v, &spec, s.settings.eps_fp).unwrap();
        let tr = simulate(&spec, &policy, &Adversary::WorstCase, 0, &[1.7]).unwrap();
        assert_eq!(tr.total, 1.7);
        assert!(tr.events.is_empty());
    }

    #[test]
    fn accounting_identity_and_event_invariants() {
        let s = builtin_setup("dg1").unwrap();
        let v = solved(&s);
        let policy = extract_policy(&v, &s.spec, s.settings.eps_fp).unwrap();
        for adversary in [Adversary::WorstCase, Adversary::Random(7)] {
            let tr = simulate(&s.spec, &policy, &adversary, 0, &[3.0]).unwrap();
            assert_eq!(tr.total, tr.running + tr.jump_cost + tr.terminal);
            assert_eq!(tr.rows.len(), s.mesh.steps + 1);
            for e in &tr.events {
                assert!(e.gain > 0.0);
                let expected: Vec<f64> = e.pre.iter().zip(&e.xi).map(|(a, b)| a + b).collect();
                assert_eq!(e.post, expected);
            }
            assert!((tr.rows.last().unwrap().cumulative - tr.total).abs() < 1e-12);
        }
    }

    #[test]
    fn weaker_adversaries_do_not_beat_worst_case() {
        let s = builtin_setup("dg1-rich").unwrap();
        let v = solved(&s);
        let policy = extract_policy(&v, &s.spec, s.settings.eps_fp).unwrap();
        let worst = simulate(&s.spec, &policy, &Adversary::WorstCase, 0, &[3.0]).unwrap();
        let tol = 3.0 * (0.05 + 0.01);
        let fixed = simulate(
            &s.spec,
            &policy,
            &Adversary::Fixed(vec!["0".into()]),
            0,
            &[3.0],
        )
        .unwrap();
        assert!(fixed.total <= worst.total + tol);
        for seed in 0..5 {
            let r = simulate(&s.spec, &policy, &Adversary::Random(seed), 0, &[3.0]).unwrap();
            assert!(r.total <= worst.total + tol);
        }
    }

    #[test]
    fn simulation_errors() {
        let s = builtin_setup("dg1").unwrap();
        let v = solved(&s);
        let policy = extract_policy(&v, &s.spec, s.settings.eps_fp).unwrap();
        assert!(matches!(
            simulate(&s.spec, &policy, &Adversary::WorstCase, 0, &[7.0]),
            Err(PolicyError::StartOutside(_))
        ));
        assert!(matches!(
            simulate(
                &s.spec,
                &policy,
                &Adversary::Fixed(vec!["1 +".into()]),
                0,
                &[0.0]
            ),
            Err(PolicyError::Adversary { index: 0, .. })
        ));
        assert!(matches!(
            simulate(&s.spec, &policy, &Adversary::Fixed(vec![]), 0, &[0.0]),
            Err(PolicyError::AdversaryDimension { .. })
        ));
    }

    #[test]
    fn lipschitz_bound_on_translation_dynamics() {
        let spec = builtin("dg1").unwrap();
        let mesh = TimeMesh::new(0.0, 1.0, 100).unwrap();
        let controls = SharedControls {
            taus: vec![vec![1.0]; 100],
            jumps: vec![(30, vec![-2.0])],
        };
        let r = lipschitz_check(&spec, &controls, &[1.0], &[1.25], &mesh, 0.0).unwrap();
        assert!(!r.violated);
        for (_, gap, _) in &r.rows {
            assert!((gap - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn lipschitz_bound_on_linear_growth() {
        let mut def = builtin("dg1").unwrap().def().clone();
        def.drift = vec!["x1 + 0 * tau1".into()];
        let spec = def.build().unwrap();
        let l = validate(&spec, &[(-6.0, 6.0)], 200, 1).unwrap().lipschitz();
        assert!((l - 1.0).abs() < 1e-9);
        let mesh = TimeMesh::new(0.0, 1.0, 100).unwrap();
        let x1 = [0.5];
        let x2 = [0.51];
        let r = lipschitz_check(&spec, &SharedControls::default(), &x1, &x2, &mesh, l).unwrap();
        assert!(!r.violated);
        let (_, gap, bound) = *r.rows.last().unwrap();
        assert!((bound - 0.01 * std::f64::consts::E).abs() < 1e-9);
        assert!((gap - 0.01 * std::f64::consts::E).abs() < 2e-4);

        let with_jump = SharedControls {
            taus: Vec::new(),
            jumps: vec![(50, vec![-2.0])],
        };
        let j = lipschitz_check(&spec, &with_jump, &x1, &x2, &mesh, l).unwrap();
        assert!(!j.violated);
        assert!((j.max_gap - r.max_gap).abs() < 1e-12);
        assert!((j.rows.last().unwrap().2 - 2.0 * bound).abs() < 1e-9);
    }
}
