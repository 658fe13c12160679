//! Uniform state grids, time meshes and time-indexed value storage.
//!
//! Values over a grid are stored as one flat array per time node in
//! row-major order: axis 0 varies slowest, the last axis fastest.
//! Off-grid evaluation is multilinear; queries outside the box are clamped
//! to the box first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error(
        "axis {axis}: need lo < hi and at least 2 nodes (got lo={lo}, hi={hi}, nodes={nodes})"
    )]
    InvalidAxis {
        axis: usize,
        lo: f64,
        hi: f64,
        nodes: usize,
    },
    #[error("grid needs at least one axis")]
    NoAxes,
    #[error(
        "time mesh needs t0 < T and at least one step (got t0={t0}, T={t_end}, steps={steps})"
    )]
    InvalidMesh { t0: f64, t_end: f64, steps: usize },
    #[error("index {index:?} out of range for node counts {counts:?}")]
    IndexOutOfRange {
        index: Vec<usize>,
        counts: Vec<usize>,
    },
    #[error("time index {index} out of range 0..={steps}")]
    TimeOutOfRange { index: usize, steps: usize },
    #[error("slice length {got} does not match grid size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at time index {time}, node {node}")]
    NonFinite { time: usize, node: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.nodes - 1) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, GridError> {
        if axes.is_empty() {
            return Err(GridError::NoAxes);
        }
        for (i, a) in axes.iter().enumerate() {
            if !(a.lo < a.hi) || a.nodes < 2 || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(GridError::InvalidAxis {
                    axis: i,
                    lo: a.lo,
                    hi: a.hi,
                    nodes: a.nodes,
                });
            }
        }
        Ok(Grid { axes })
    }

    /// One-dimensional grid on `[lo, hi]`.
    pub fn line(lo: f64, hi: f64, nodes: usize) -> Result<Self, GridError> {
        Grid::new(vec![Axis { lo, hi, nodes }])
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.nodes).collect()
    }

    /// Largest spacing over all axes.
    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).fold(0.0, f64::max)
    }

    pub fn node_state(&self, index: &[usize]) -> Result<Vec<f64>, GridError> {
        if index.len() != self.dim() || index.iter().zip(&self.axes).any(|(i, a)| *i >= a.nodes) {
            return Err(GridError::IndexOutOfRange {
                index: index.to_vec(),
                counts: self.counts(),
            });
        }
        Ok(index
            .iter()
            .zip(&self.axes)
            .map(|(i, a)| a.coord(*i))
            .collect())
    }

    /// Coordinates of the node at a flat (row-major) position.
    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.node_into(flat, &mut out);
        out
    }

    pub fn node_into(&self, flat: usize, out: &mut [f64]) {
        let mut rest = flat;
        for (a, axis) in self.axes.iter().enumerate().rev() {
            out[a] = axis.coord(rest % axis.nodes);
            rest /= axis.nodes;
        }
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        let mut rest = flat;
        for (a, axis) in self.axes.iter().enumerate().rev() {
            out[a] = rest % axis.nodes;
            rest /= axis.nodes;
        }
        out
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, a)| acc * a.nodes + i)
    }

    /// True when the node is not on any face of the box.
    pub fn is_interior(&self, flat: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .all(|(i, a)| *i > 0 && *i + 1 < a.nodes)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.axes)
            .all(|(v, a)| *v >= a.lo && *v <= a.hi)
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.axes)
            .map(|(v, a)| v.clamp(a.lo, a.hi))
            .collect()
    }

    /// Interpolation weights for `x`: up to 2^m (node, weight) pairs with
    /// nonnegative weights summing to one.
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        debug_assert_eq!(x.len(), self.dim());
        let m = self.dim();
        let mut base = 0usize;
        let mut strides = vec![0usize; m];
        let mut frac = vec![0.0f64; m];
        let mut stride = 1usize;
        for a in (0..m).rev() {
            strides[a] = stride;
            stride *= self.axes[a].nodes;
        }
        for (a, axis) in self.axes.iter().enumerate() {
            let xc = x[a].clamp(axis.lo, axis.hi);
            let cells = (axis.nodes - 1) as f64;
            let mut s = (xc - axis.lo) * (cells / (axis.hi - axis.lo));
            let r = s.round();
            // Absorb rounding noise so node queries hit the node exactly.
            let on_node = r >= 0.0 && r <= cells && axis.coord(r as usize) == xc;
            if on_node || (s - r).abs() <= 16.0 * f64::EPSILON * r.abs().max(1.0) {
                s = r;
            }
            let s = s.clamp(0.0, cells);
            let i = (s.floor() as usize).min(axis.nodes - 2);
            frac[a] = s - i as f64;
            base += i * strides[a];
        }
        let mut entries = Vec::with_capacity(1 << m);
        for corner in 0..(1usize << m) {
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..m {
                if corner >> (m - 1 - a) & 1 == 1 {
                    w *= frac[a];
                    idx += strides[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            entries.push((idx, w));
        }
        Stencil { entries }
    }

    /// Multilinear interpolation of `slice` at `x` (clamped to the box).
    pub fn interp(&self, slice: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(slice.len(), self.len());
        self.stencil(x).apply(slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    entries: Vec<(usize, f64)>,
}

impl Stencil {
    pub fn apply(&self, slice: &[f64]) -> f64 {
        let mut it = self.entries.iter();
        let (i0, w0) = it.next().expect("stencil has at least two entries");
        let mut acc = slice[*i0] * w0;
        for (i, w) in it {
            acc += slice[*i] * w;
        }
        acc
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMesh {
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeMesh {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self, GridError> {
        if !(t0 < t_end) || steps == 0 || !t0.is_finite() || !t_end.is_finite() {
            return Err(GridError::InvalidMesh { t0, t_end, steps });
        }
        Ok(TimeMesh { t0, t_end, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.t_end
        } else {
            self.t0 + (self.t_end - self.t0) * k as f64 / self.steps as f64
        }
    }

    /// Nearest time node to `t`, or `None` outside `[t0, T]`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * (self.t_end - self.t0);
        if t < self.t0 - tol || t > self.t_end + tol {
            return None;
        }
        let k = ((t - self.t0) / self.dt()).round();
        Some((k.max(0.0) as usize).min(self.steps))
    }
}

/// Value samples on every node of `grid` at every node of `mesh`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: Grid,
    mesh: TimeMesh,
    values: Vec<Vec<f64>>,
}

impl ValueField {
    pub fn filled(grid: Grid, mesh: TimeMesh, value: f64) -> Self {
        let values = vec![vec![value; grid.len()]; mesh.steps + 1];
        ValueField { grid, mesh, values }
    }

    pub fn from_slices(
        grid: Grid,
        mesh: TimeMesh,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, GridError> {
        if values.len() != mesh.steps + 1 {
            return Err(GridError::LengthMismatch {
                expected: mesh.steps + 1,
                got: values.len(),
            });
        }
        for (k, s) in values.iter().enumerate() {
            if s.len() != grid.len() {
                return Err(GridError::LengthMismatch {
                    expected: grid.len(),
                    got: s.len(),
                });
            }
            if let Some(node) = s.iter().position(|v| !v.is_finite()) {
                return Err(GridError::NonFinite { time: k, node });
            }
        }
        Ok(ValueField { grid, mesh, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mesh(&self) -> &TimeMesh {
        &self.mesh
    }

    pub fn slice(&self, k: usize) -> Result<&[f64], GridError> {
        self.values
            .get(k)
            .map(Vec::as_slice)
            .ok_or(GridError::TimeOutOfRange {
                index: k,
                steps: self.mesh.steps,
            })
    }

    pub fn slice_mut(&mut self, k: usize) -> Result<&mut [f64], GridError> {
        let steps = self.mesh.steps;
        self.values
            .get_mut(k)
            .map(Vec::as_mut_slice)
            .ok_or(GridError::TimeOutOfRange { index: k, steps })
    }

    pub(crate) fn set_slice(&mut self, k: usize, data: Vec<f64>) {
        debug_assert_eq!(data.len(), self.grid.len());
        self.values[k] = data;
    }

    pub fn slices(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Interpolated value at time node `k` and state `x`.
    pub fn value_at(&self, k: usize, x: &[f64]) -> f64 {
        self.grid.interp(&self.values[k], x)
    }

    /// Largest absolute nodewise difference; fields must share geometry.
    pub fn sup_distance(&self, other: &ValueField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Applies `f(k, value)` to every entry.
    pub fn map(&self, f: impl Fn(usize, f64) -> f64) -> ValueField {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, s)| s.iter().map(|v| f(k, *v)).collect())
            .collect();
        ValueField {
            grid: self.grid.clone(),
            mesh: self.mesh,
            values,
        }
    }
}
