//! Impulse operators and the terminal value.
//!
//! `N[v](t,x) = min over xi in E of v(t, x + g(t,x,xi)) + C(t,x,xi)` and its
//! discounted twin `M`, which charges `exp(t) C`. The terminal value
//! `G1 = min(G, N[G](T, .))` allows one last jump at the horizon.

use rayon::prelude::*;

use crate::grid::{Grid, Stencil};
use crate::problem::{ProblemError, ProblemSpec};

/// Outcome of an impulse-operator evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpResult {
    pub value: f64,
    /// Index into the impulse set of the minimizer; `None` when not jumping wins.
    pub best: Option<usize>,
}

impl JumpResult {
    pub fn best_xi<'a>(&self, spec: &'a ProblemSpec) -> Option<&'a [f64]> {
        self.best.map(|i| spec.impulses()[i].as_slice())
    }
}

/// Precomputed jump landing points and costs for one state.
#[derive(Debug, Clone)]
pub struct JumpCandidates {
    entries: Vec<(Stencil, f64)>,
}

impl JumpCandidates {
    pub fn new(
        spec: &ProblemSpec,
        grid: &Grid,
        t: f64,
        x: &[f64],
        cost_scale: f64,
    ) -> Result<Self, ProblemError> {
        let entries = spec
            .impulses()
            .iter()
            .map(|xi| {
                let target = spec.jump_target(t, x, xi)?;
                let cost = spec.impulse_cost(t, x, xi)? * cost_scale;
                Ok((grid.stencil(&target), cost))
            })
            .collect::<Result<Vec<_>, ProblemError>>()?;
        Ok(JumpCandidates { entries })
    }

    /// Minimum over candidates; first in declared order on ties.
    pub fn apply(&self, slice: &[f64]) -> JumpResult {
        let mut best = JumpResult {
            value: f64::INFINITY,
            best: None,
        };
        for (i, (stencil, cost)) in self.entries.iter().enumerate() {
            let v = stencil.apply(slice) + cost;
            if v < best.value {
                best = JumpResult {
                    value: v,
                    best: Some(i),
                };
            }
        }
        best
    }
}

/// `N[slice](t, x)`.
pub fn apply_n(
    slice: &[f64],
    grid: &Grid,
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
) -> Result<JumpResult, ProblemError> {
    Ok(JumpCandidates::new(spec, grid, t, x, 1.0)?.apply(slice))
}

/// `M[slice](t, x)`: as [`apply_n`] with the cost scaled by `exp(t)`.
pub fn apply_m(
    slice: &[f64],
    grid: &Grid,
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
) -> Result<JumpResult, ProblemError> {
    Ok(JumpCandidates::new(spec, grid, t, x, t.exp())?.apply(slice))
}

/// `G1(x) = min(G(x), min over xi of G(x + g(T,x,xi)) + C(T,x,xi))`, with G
/// evaluated exactly at the landing point. Not jumping wins ties.
pub fn terminal_value(spec: &ProblemSpec, x: &[f64]) -> Result<JumpResult, ProblemError> {
    let t = spec.t_end();
    let mut best = JumpResult {
        value: spec.terminal_cost(x)?,
        best: None,
    };
    for (i, xi) in spec.impulses().iter().enumerate() {
        let target = spec.jump_target(t, x, xi)?;
        let v = spec.terminal_cost(&target)? + spec.impulse_cost(t, x, xi)?;
        if v < best.value {
            best = JumpResult {
                value: v,
                best: Some(i),
            };
        }
    }
    Ok(best)
}

/// [`terminal_value`] at every grid node.
pub fn terminal_g1(grid: &Grid, spec: &ProblemSpec) -> Result<Vec<f64>, ProblemError> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| terminal_value(spec, &grid.node(i)).map(|r| r.value))
        .collect()
}

/// G at every grid node.
pub fn terminal_g(grid: &Grid, spec: &ProblemSpec) -> Result<Vec<f64>, ProblemError> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| spec.terminal_cost(&grid.node(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;
    use proptest::prelude::*;

    fn abs_slice(grid: &Grid) -> Vec<f64> {
        (0..grid.len()).map(|i| grid.node(i)[0].abs()).collect()
    }

    fn dg1_grid() -> Grid {
        Grid::line(-6.0, 6.0, 241).unwrap()
    }

    #[test]
    fn n_with_frozen_jump_adds_cost() {
        let mut def = builtin("dg1").unwrap().def().clone();
        def.jump = vec!["0 * xi1".into()];
        def.impulse_cost = "0.3".into();
        let spec = def.build().unwrap();
        let grid = dg1_grid();
        let slice = vec![5.0; grid.len()];
        let r = apply_n(&slice, &grid, &spec, 0.2, &[1.3]).unwrap();
        assert_eq!(r.value, 5.3);
        assert_eq!(r.best, Some(0));
    }

    #[test]
    fn n_on_dg1() {
        let spec = builtin("dg1").unwrap();
        let grid = dg1_grid();
        let r = apply_n(&abs_slice(&grid), &grid, &spec, 0.0, &[3.0]).unwrap();
        assert!((r.value - 1.1).abs() < 1e-15);
        assert_eq!(r.best_xi(&spec), Some(&[-2.0][..]));
    }

    #[test]
    fn n_on_dg1_rich_enumerates() {
        let spec = builtin("dg1-rich").unwrap();
        let grid = dg1_grid();
        let slice = abs_slice(&grid);
        let r = apply_n(&slice, &grid, &spec, 0.0, &[3.0]).unwrap();
        // |3-2|+0.1, |3-1|+0.1, |3+1|+0.1, |3+2|+0.1
        let expected = [1.1, 2.1, 4.1, 5.1];
        let best = expected.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((r.value - best).abs() < 1e-12);
        assert_eq!(r.best_xi(&spec), Some(&[-2.0][..]));
    }

    #[test]
    fn terminal_g1_on_dg1() {
        let spec = builtin("dg1").unwrap();
        let grid = dg1_grid();
        let g1 = terminal_g1(&grid, &spec).unwrap();
        let at = |x: f64| g1[((x + 6.0) / 0.05).round() as usize];
        assert!((at(3.0) - 1.1).abs() < 1e-15);
        assert_eq!(at(0.0), 0.0);
        assert_eq!(terminal_value(&spec, &[0.0]).unwrap().best, None);
        assert_eq!(terminal_value(&spec, &[3.0]).unwrap().best, Some(0));
    }

    #[test]
    fn expensive_jumps_leave_g_unchanged() {
        let mut def = builtin("dg1").unwrap().def().clone();
        // sup G - inf G = 6 on the box
        def.impulse_cost = "6".into();
        let spec = def.build().unwrap();
        let grid = dg1_grid();
        assert_eq!(
            terminal_g1(&grid, &spec).unwrap(),
            terminal_g(&grid, &spec).unwrap()
        );
    }

    #[test]
    fn m_scales_cost() {
        let spec = builtin("dg1").unwrap();
        let grid = dg1_grid();
        let slice = abs_slice(&grid);
        for x in [-5.5, -0.3, 0.0, 2.2, 3.0] {
            let n = apply_n(&slice, &grid, &spec, 0.0, &[x]).unwrap();
            let m = apply_m(&slice, &grid, &spec, 0.0, &[x]).unwrap();
            assert_eq!(n.value.to_bits(), m.value.to_bits());
            assert_eq!(n.best, m.best);
        }
        let m = apply_m(&slice, &grid, &spec, 1.0, &[3.0]).unwrap();
        assert!((m.value - (1.0 + std::f64::consts::E * 0.1)).abs() < 1e-12);
        assert!((m.value - 1.2718).abs() < 1e-4);

        let mut def = spec.def().clone();
        def.jump = vec!["0 * xi1".into()];
        def.impulse_cost = "0.25".into();
        let frozen = def.build().unwrap();
        let m = apply_m(&slice, &grid, &frozen, 0.7, &[-1.5]).unwrap();
        assert!((m.value - (1.5 + 0.7f64.exp() * 0.25)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn n_matches_independent_enumeration(vals in proptest::collection::vec(0.0f64..10.0, 241),
                                             x in -7.0f64..7.0, t in 0.0f64..1.0) {
            let spec = builtin("dg1-rich").unwrap();
            let grid = dg1_grid();
            let r = apply_n(&vals, &grid, &spec, t, &[x]).unwrap();
            let mut best = f64::INFINITY;
            for xi in spec.impulses() {
                let y = x + xi[0];
                best = best.min(grid.interp(&vals, &[y]) + spec.impulse_cost(t, &[x], xi).unwrap());
            }
            prop_assert_eq!(r.value.to_bits(), best.to_bits());
        }

        #[test]
        fn n_is_monotone(lo in proptest::collection::vec(0.0f64..10.0, 241),
                         bump in proptest::collection::vec(0.0f64..1.0, 241),
                         x in -7.0f64..7.0) {
            let spec = builtin("dg1-rich").unwrap();
            let grid = dg1_grid();
            let hi: Vec<f64> = lo.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let a = apply_n(&lo, &grid, &spec, 0.0, &[x]).unwrap().value;
            let b = apply_n(&hi, &grid, &spec, 0.0, &[x]).unwrap().value;
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn g1_never_exceeds_g() {
        for name in crate::problem::CATALOG {
            let s = crate::problem::builtin_setup(name).unwrap();
            let g = terminal_g(&s.grid, &s.spec).unwrap();
            let g1 = terminal_g1(&s.grid, &s.spec).unwrap();
            for (i, (a, b)) in g1.iter().zip(&g).enumerate() {
                assert!(a <= b);
                let x = s.grid.node(i);
                if terminal_value(&s.spec, &x).unwrap().best.is_none() {
                    assert_eq!(a, b);
                }
            }
        }
    }
}
