//! Brute-force backward induction on a snapped lattice.
//!
//! The oracle never interpolates: every characteristic foot and every jump
//! landing point is rounded to the nearest lattice node (clamped to the
//! box). It is single-threaded and meant for coarse lattices only.

use thiserror::Error;

use crate::problem::{ProblemError, ProblemSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("invalid oracle settings: {0}")]
    Settings(String),
    #[error("box side [{lo}, {hi}] is not a multiple of h = {h}")]
    Lattice { lo: f64, hi: f64, h: f64 },
    #[error("query state {0:?} is not a lattice node")]
    OffLattice(Vec<f64>),
    #[error("time index {index} out of range 0..={steps}")]
    TimeOutOfRange { index: usize, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSettings {
    /// Lattice spacing, shared by every axis.
    pub h: f64,
    /// Time steps over `[t0, T]`.
    pub steps: usize,
    /// Jumps allowed per time node.
    pub jumps: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            h: 0.25,
            steps: 8,
            jumps: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct Lattice {
    lo: Vec<f64>,
    hi: Vec<f64>,
    h: f64,
    counts: Vec<usize>,
}

impl Lattice {
    fn new(bounds: &[(f64, f64)], h: f64) -> Result<Self, OracleError> {
        let mut counts = Vec::with_capacity(bounds.len());
        for &(lo, hi) in bounds {
            let cells = (hi - lo) / h;
            let n = cells.round();
            if !(hi > lo) || (cells - n).abs() > 1e-9 * n.max(1.0) {
                return Err(OracleError::Lattice { lo, hi, h });
            }
            counts.push(n as usize + 1);
        }
        Ok(Lattice {
            lo: bounds.iter().map(|b| b.0).collect(),
            hi: bounds.iter().map(|b| b.1).collect(),
            h,
            counts,
        })
    }

    fn len(&self) -> usize {
        self.counts.iter().product()
    }

    fn state(&self, flat: usize) -> Vec<f64> {
        let mut rest = flat;
        let mut x = vec![0.0; self.counts.len()];
        for a in (0..self.counts.len()).rev() {
            let i = rest % self.counts[a];
            rest /= self.counts[a];
            x[a] = if i + 1 == self.counts[a] {
                self.hi[a]
            } else {
                self.lo[a] + i as f64 * self.h
            };
        }
        x
    }

    /// Nearest node (clamped); the flag reports whether clamping occurred.
    fn snap(&self, x: &[f64]) -> (usize, bool) {
        let mut flat = 0;
        let mut clamped = false;
        for (a, &xa) in x.iter().enumerate() {
            let last = self.counts[a] - 1;
            let r = ((xa - self.lo[a]) / self.h).round();
            let i = if r < 0.0 {
                clamped = true;
                0
            } else if r > last as f64 {
                clamped = true;
                last
            } else {
                r as usize
            };
            flat = flat * self.counts[a] + i;
        }
        (flat, clamped)
    }

    fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for (a, &xa) in x.iter().enumerate() {
            let s = (xa - self.lo[a]) / self.h;
            let r = s.round();
            if (s - r).abs() > 1e-9 || r < 0.0 || r > (self.counts[a] - 1) as f64 {
                return None;
            }
            flat = flat * self.counts[a] + r as usize;
        }
        Some(flat)
    }
}

/// Oracle values at every lattice node and time index.
#[derive(Debug, Clone)]
pub struct OracleTable {
    lattice: Lattice,
    settings: OracleSettings,
    t0: f64,
    t_end: f64,
    values: Vec<Vec<f64>>,
    /// Number of snaps that had to be clamped into the box.
    pub clamped: usize,
}

impl OracleTable {
    pub fn settings(&self) -> &OracleSettings {
        &self.settings
    }

    pub fn counts(&self) -> &[usize] {
        &self.lattice.counts
    }

    pub fn time(&self, k: usize) -> f64 {
        if k >= self.settings.steps {
            self.t_end
        } else {
            self.t0 + (self.t_end - self.t0) * k as f64 / self.settings.steps as f64
        }
    }

    /// Lattice nodes in row-major order.
    pub fn states(&self) -> Vec<Vec<f64>> {
        (0..self.lattice.len())
            .map(|i| self.lattice.state(i))
            .collect()
    }

    pub fn slice(&self, k: usize) -> Option<&[f64]> {
        self.values.get(k).map(Vec::as_slice)
    }

    pub fn value(&self, k: usize, x: &[f64]) -> Result<f64, OracleError> {
        let slice = self.values.get(k).ok_or(OracleError::TimeOutOfRange {
            index: k,
            steps: self.settings.steps,
        })?;
        let i = self
            .lattice
            .locate(x)
            .ok_or_else(|| OracleError::OffLattice(x.to_vec()))?;
        Ok(slice[i])
    }
}

/// Runs the full backward induction over the lattice covering `bounds`.
pub fn oracle_table(
    spec: &ProblemSpec,
    bounds: &[(f64, f64)],
    settings: &OracleSettings,
) -> Result<OracleTable, OracleError> {
    if !(settings.h > 0.0) || settings.steps == 0 {
        return Err(OracleError::Settings(
            "need h > 0 and at least one time step".into(),
        ));
    }
    if bounds.len() != spec.dim() {
        return Err(OracleError::Settings(format!(
            "box has {} axes, problem has m = {}",
            bounds.len(),
            spec.dim()
        )));
    }
    let lat = Lattice::new(bounds, settings.h)?;
    let n = lat.len();
    let states: Vec<Vec<f64>> = (0..n).map(|i| lat.state(i)).collect();
    let dt = (spec.t_end() - spec.t0()) / settings.steps as f64;
    let mut clamped = 0usize;
    let mut snap = |x: &[f64]| {
        let (i, c) = lat.snap(x);
        clamped += c as usize;
        i
    };

    let t_end = spec.t_end();
    let mut terminal = Vec::with_capacity(n);
    for x in &states {
        let mut best = spec.terminal_cost(x)?;
        let terminal_jumps = if settings.jumps > 0 {
            spec.impulses()
        } else {
            &[]
        };
        for xi in terminal_jumps {
            let y = spec.jump_target(t_end, x, xi)?;
            let landed = lat.state(snap(&y));
            best = best.min(spec.terminal_cost(&landed)? + spec.impulse_cost(t_end, x, xi)?);
        }
        terminal.push(best);
    }

    let mut values = vec![Vec::new(); settings.steps + 1];
    values[settings.steps] = terminal;
    for k in (0..settings.steps).rev() {
        let t = spec.t0() + (t_end - spec.t0()) * k as f64 / settings.steps as f64;
        let next = &values[k + 1];
        let mut cont = Vec::with_capacity(n);
        for x in &states {
            let mut best = f64::NEG_INFINITY;
            for tau in spec.controls() {
                let f = spec.drift(t, x, tau)?;
                let foot: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + b * dt).collect();
                best = best.max(spec.running_cost(t, x, tau)? * dt + next[snap(&foot)]);
            }
            cont.push(best);
        }
        let mut moves = Vec::with_capacity(n);
        for x in &states {
            let mut row = Vec::with_capacity(spec.impulses().len());
            for xi in spec.impulses() {
                let y = spec.jump_target(t, x, xi)?;
                row.push((snap(&y), spec.impulse_cost(t, x, xi)?));
            }
            moves.push(row);
        }
        let mut cur = cont.clone();
        for _ in 0..settings.jumps {
            cur = (0..n)
                .map(|i| {
                    moves[i]
                        .iter()
                        .map(|&(j, c)| c + cur[j])
                        .fold(cont[i], f64::min)
                })
                .collect();
        }
        values[k] = cur;
    }
    Ok(OracleTable {
        lattice: lat,
        settings: *settings,
        t0: spec.t0(),
        t_end,
        values,
        clamped,
    })
}

/// Oracle value at lattice node `x` and time index `k`, with the number of
/// clamped snaps in the whole induction.
pub fn oracle_value(
    spec: &ProblemSpec,
    bounds: &[(f64, f64)],
    settings: &OracleSettings,
    k: usize,
    x: &[f64],
) -> Result<(f64, usize), OracleError> {
    let table = oracle_table(spec, bounds, settings)?;
    Ok((table.value(k, x)?, table.clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;

    const DG1_BOX: [(f64, f64); 1] = [(-6.0, 6.0)];

    fn no_impulse_induction(spec: &ProblemSpec, settings: &OracleSettings) -> Vec<f64> {
        // independent restatement on a 1-d lattice
        let h = settings.h;
        let xs: Vec<f64> = (0..=48).map(|i| -6.0 + i as f64 * h).collect();
        let snap = |y: f64| (((y + 6.0) / h).round().clamp(0.0, 48.0)) as usize;
        let dt = 1.0 / settings.steps as f64;
        let mut v: Vec<f64> = xs
            .iter()
            .map(|x| spec.terminal_cost(&[*x]).unwrap())
            .collect();
        for k in (0..settings.steps).rev() {
            let t = k as f64 * dt;
            v = xs
                .iter()
                .map(|&x| {
                    spec.controls()
                        .iter()
                        .map(|tau| {
                            let f = spec.drift(t, &[x], tau).unwrap()[0];
                            spec.running_cost(t, &[x], tau).unwrap() * dt + v[snap(x + f * dt)]
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
        }
        v
    }

    #[test]
    fn zero_jumps_is_no_impulse_induction() {
        let spec = builtin("dg1").unwrap();
        let s = OracleSettings {
            jumps: 0,
            ..Default::default()
        };
        let table = oracle_table(&spec, &DG1_BOX, &s).unwrap();
        assert_eq!(
            table.slice(0).unwrap(),
            no_impulse_induction(&spec, &s).as_slice()
        );
    }

    #[test]
    fn frozen_game_returns_terminal_value() {
        let mut def = builtin("dg1").unwrap().def().clone();
        def.drift = vec!["0 * tau1".into()];
        let spec = def.build().unwrap();
        // on this box a second jump never pays
        let table = oracle_table(&spec, &[(-1.0, 3.0)], &OracleSettings::default()).unwrap();
        let g1 = table.slice(8).unwrap().to_vec();
        for k in 0..8 {
            assert_eq!(table.slice(k).unwrap(), g1.as_slice());
        }
        assert_eq!(table.value(0, &[3.0]).unwrap(), 1.1);
    }

    #[test]
    fn priced_out_jumps_match_no_impulse() {
        let mut def = builtin("dg1").unwrap().def().clone();
        def.impulse_cost = "1000".into();
        let spec = def.build().unwrap();
        let s = OracleSettings::default();
        let table = oracle_table(&spec, &DG1_BOX, &s).unwrap();
        assert_eq!(
            table.slice(0).unwrap(),
            no_impulse_induction(&spec, &s).as_slice()
        );
        // rounding half away from zero lets the adversary gain h per step
        assert!((table.value(0, &[3.0]).unwrap() - 4.0).abs() <= 3.0 * (0.25 + 0.125));
    }

    #[test]
    fn monotone_in_impulse_cost() {
        let base = builtin("txcost").unwrap();
        let mut def = base.def().clone();
        def.impulse_cost = format!("{} + 0.02", def.impulse_cost);
        let dear = def.build().unwrap();
        let bounds = [(-1.0, 3.0)];
        let s = OracleSettings {
            h: 0.1,
            steps: 10,
            jumps: 2,
        };
        let a = oracle_table(&base, &bounds, &s).unwrap();
        let b = oracle_table(&dear, &bounds, &s).unwrap();
        for k in 0..=10 {
            for (x, y) in a.slice(k).unwrap().iter().zip(b.slice(k).unwrap()) {
                assert!(x <= y);
            }
        }
    }

    #[test]
    fn third_jump_changes_nothing_on_dg1() {
        let spec = builtin("dg1").unwrap();
        let two = oracle_table(&spec, &DG1_BOX, &OracleSettings::default()).unwrap();
        let three = oracle_table(
            &spec,
            &DG1_BOX,
            &OracleSettings {
                jumps: 3,
                ..Default::default()
            },
        )
        .unwrap();
        for k in 0..=8 {
            assert_eq!(two.slice(k), three.slice(k), "k={k}");
        }
    }

    #[test]
    fn extra_jumps_only_lower_txcost() {
        // chains clamped at the box wall can shift the residue mod 0.5
        let spec = builtin("txcost").unwrap();
        let bounds = [(-1.0, 3.0)];
        let two = oracle_table(
            &spec,
            &bounds,
            &OracleSettings {
                h: 0.1,
                steps: 8,
                jumps: 2,
            },
        )
        .unwrap();
        let three = oracle_table(
            &spec,
            &bounds,
            &OracleSettings {
                h: 0.1,
                steps: 8,
                jumps: 3,
            },
        )
        .unwrap();
        for k in 0..=8 {
            for (a, b) in three.slice(k).unwrap().iter().zip(two.slice(k).unwrap()) {
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn query_errors() {
        let spec = builtin("dg1").unwrap();
        let s = OracleSettings::default();
        assert!(matches!(
            oracle_value(&spec, &DG1_BOX, &s, 0, &[0.1]),
            Err(OracleError::OffLattice(_))
        ));
        assert!(matches!(
            oracle_value(&spec, &DG1_BOX, &s, 9, &[0.0]),
            Err(OracleError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            oracle_table(&spec, &[(-6.0, 6.1)], &s),
            Err(OracleError::Lattice { .. })
        ));
        // the adversary pushes states against the box edge
        let (_, clamped) = oracle_value(&spec, &DG1_BOX, &s, 0, &[0.0]).unwrap();
        assert!(clamped > 0);
    }
}
