//! CSV interchange and SVG rendering of value fields.
//!
//! ```text
//! # grid: x1 -6 6 241
//! # mesh: 0 1 100
//! t,x1,value
//! 0,-6,7
//! ```
//!
//! Reals are written with the shortest representation that parses back to
//! the same bits, so an export re-imports bit-exactly.

use std::fmt::Write as _;

use thiserror::Error;

use crate::grid::{Axis, Grid, GridError, TimeMesh, ValueField};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExportError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("slice out of range: t = {t} not in [{t0}, {t_end}]")]
    SliceOutOfRange { t: f64, t0: f64, t_end: f64 },
}

fn header_grid(grid: &Grid) -> String {
    let mut s = String::from("# grid:");
    for (a, axis) in grid.axes().iter().enumerate() {
        write!(s, " x{} {} {} {}", a + 1, axis.lo, axis.hi, axis.nodes).unwrap();
    }
    s
}

fn column_header(grid: &Grid) -> String {
    let mut s = String::from("t");
    for a in 0..grid.dim() {
        write!(s, ",x{}", a + 1).unwrap();
    }
    s.push_str(",value");
    s
}

fn push_row(out: &mut String, t: f64, x: &[f64], v: f64) {
    write!(out, "{t}").unwrap();
    for c in x {
        write!(out, ",{c}").unwrap();
    }
    writeln!(out, ",{v}").unwrap();
}

/// Full field, time-major then row-major over the grid.
pub fn field_to_csv(field: &ValueField) -> String {
    let grid = field.grid();
    let mesh = field.mesh();
    let mut out = String::new();
    writeln!(out, "{}", header_grid(grid)).unwrap();
    writeln!(out, "# mesh: {} {} {}", mesh.t0, mesh.t_end, mesh.steps).unwrap();
    writeln!(out, "{}", column_header(grid)).unwrap();
    let mut x = vec![0.0; grid.dim()];
    for k in 0..=mesh.steps {
        let t = mesh.time(k);
        for (i, v) in field.slice(k).expect("in range").iter().enumerate() {
            grid.node_into(i, &mut x);
            push_row(&mut out, t, &x, *v);
        }
    }
    out
}

/// Time index of `t`, rejecting times outside the horizon.
pub fn slice_index(mesh: &TimeMesh, t: f64) -> Result<usize, ExportError> {
    mesh.index_of(t).ok_or(ExportError::SliceOutOfRange {
        t,
        t0: mesh.t0,
        t_end: mesh.t_end,
    })
}

/// One time slice, with a `# slice:` header in place of the mesh.
pub fn slice_to_csv(field: &ValueField, k: usize) -> Result<String, ExportError> {
    let grid = field.grid();
    let slice = field.slice(k)?;
    let t = field.mesh().time(k);
    let mut out = String::new();
    writeln!(out, "{}", header_grid(grid)).unwrap();
    writeln!(out, "# slice: {t} {k}").unwrap();
    writeln!(out, "{}", column_header(grid)).unwrap();
    let mut x = vec![0.0; grid.dim()];
    for (i, v) in slice.iter().enumerate() {
        grid.node_into(i, &mut x);
        push_row(&mut out, t, &x, *v);
    }
    Ok(out)
}

fn format_err(line: usize, message: impl Into<String>) -> ExportError {
    ExportError::Format {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, ExportError> {
    s.trim()
        .parse()
        .map_err(|_| format_err(line, format!("bad number `{s}`")))
}

/// Parses a full-field export. Coordinates must match the declared grid and
/// mesh exactly.
pub fn field_from_csv(text: &str) -> Result<ValueField, ExportError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (n, grid_line) = lines.next().ok_or_else(|| format_err(1, "empty file"))?;
    let rest = grid_line
        .strip_prefix("# grid:")
        .ok_or_else(|| format_err(n, "expected `# grid:` header"))?;
    let parts: Vec<&str> = rest.split_whitespace().collect();
    if parts.is_empty() || !parts.len().is_multiple_of(4) {
        return Err(format_err(
            n,
            "grid header needs `name lo hi nodes` per axis",
        ));
    }
    let axes = parts
        .chunks(4)
        .map(|c| {
            Ok(Axis {
                lo: parse_num(c[1], n)?,
                hi: parse_num(c[2], n)?,
                nodes: parse_num(c[3], n)?,
            })
        })
        .collect::<Result<Vec<_>, ExportError>>()?;
    let grid = Grid::new(axes)?;

    let (n, mesh_line) = lines
        .next()
        .ok_or_else(|| format_err(2, "missing mesh header"))?;
    let rest = mesh_line
        .strip_prefix("# mesh:")
        .ok_or_else(|| format_err(n, "expected `# mesh:` header"))?;
    let parts: Vec<&str> = rest.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(format_err(n, "mesh header needs `t0 T steps`"));
    }
    let mesh = TimeMesh::new(
        parse_num(parts[0], n)?,
        parse_num(parts[1], n)?,
        parse_num(parts[2], n)?,
    )?;

    let (n, columns) = lines
        .next()
        .ok_or_else(|| format_err(3, "missing column header"))?;
    if columns.trim() != column_header(&grid) {
        return Err(format_err(n, "column header does not match the grid"));
    }

    let m = grid.dim();
    let mut values = Vec::with_capacity(mesh.steps + 1);
    let mut x = vec![0.0; m];
    for k in 0..=mesh.steps {
        let t = mesh.time(k);
        let mut slice = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let (n, line) = lines
                .next()
                .ok_or_else(|| format_err(0, "fewer rows than the grid and mesh declare"))?;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != m + 2 {
                return Err(format_err(n, format!("expected {} columns", m + 2)));
            }
            grid.node_into(i, &mut x);
            let row_t: f64 = parse_num(cells[0], n)?;
            if row_t != t {
                return Err(format_err(n, format!("time {row_t} where {t} expected")));
            }
            for (a, c) in cells[1..=m].iter().enumerate() {
                let xa: f64 = parse_num(c, n)?;
                if xa != x[a] {
                    return Err(format_err(
                        n,
                        format!("coordinate {xa} where {} expected", x[a]),
                    ));
                }
            }
            slice.push(parse_num(cells[m + 1], n)?);
        }
        values.push(slice);
    }
    if let Some((n, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(format_err(n, format!("unexpected trailing row `{line}`")));
    }
    Ok(ValueField::from_slices(grid, mesh, values)?)
}

// A short perceptual ramp (dark blue to yellow).
const RAMP: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

fn color(u: f64) -> String {
    let u = if u.is_finite() {
        u.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let s = u * (RAMP.len() - 1) as f64;
    let i = (s.floor() as usize).min(RAMP.len() - 2);
    let f = s - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(a.0, b.0),
        mix(a.1, b.1),
        mix(a.2, b.2)
    )
}

/// What an SVG heatmap shows.
pub struct Heatmap<'a> {
    /// Cell values, `rows[r][c]`, row 0 at the top.
    pub cells: Vec<Vec<f64>>,
    /// Cells to outline, same shape as `cells`.
    pub mark: Option<Vec<Vec<bool>>>,
    pub title: String,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

/// Heatmap with a color legend; marked cells are outlined by tracing the
/// edges between marked and unmarked cells.
pub fn render_svg(map: &Heatmap<'_>) -> String {
    let rows = map.cells.len();
    let cols = map.cells.first().map_or(0, Vec::len);
    let (pw, ph) = (600.0, 400.0);
    let (left, top) = (70.0, 40.0);
    let cw = pw / cols.max(1) as f64;
    let ch = ph / rows.max(1) as f64;
    let (lo, hi) = map
        .cells
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        left + pw + 120.0,
        top + ph + 60.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{left}" y="24" font-size="14">{}</text>"#,
        map.title
    )
    .unwrap();
    writeln!(s, r#"<g shape-rendering="crispEdges">"#).unwrap();
    for (r, row) in map.cells.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                left + c as f64 * cw,
                top + r as f64 * ch,
                cw + 0.05,
                ch + 0.05,
                color((v - lo) / span)
            )
            .unwrap();
        }
    }
    writeln!(s, "</g>").unwrap();

    if let Some(mark) = &map.mark {
        let on = |r: isize, c: isize| {
            r >= 0
                && c >= 0
                && (r as usize) < rows
                && (c as usize) < cols
                && mark[r as usize][c as usize]
        };
        let mut d = String::new();
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                if !on(r, c) {
                    continue;
                }
                let x0 = left + c as f64 * cw;
                let y0 = top + r as f64 * ch;
                let (x1, y1) = (x0 + cw, y0 + ch);
                if !on(r - 1, c) {
                    write!(d, "M{x0:.3} {y0:.3}H{x1:.3}").unwrap();
                }
                if !on(r + 1, c) {
                    write!(d, "M{x0:.3} {y1:.3}H{x1:.3}").unwrap();
                }
                if !on(r, c - 1) {
                    write!(d, "M{x0:.3} {y0:.3}V{y1:.3}").unwrap();
                }
                if !on(r, c + 1) {
                    write!(d, "M{x1:.3} {y0:.3}V{y1:.3}").unwrap();
                }
            }
        }
        writeln!(
            s,
            r##"<path d="{d}" fill="none" stroke="#ff2d2d" stroke-width="1.2"/>"##
        )
        .unwrap();
    }

    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    let bottom = top + ph;
    writeln!(
        s,
        r#"<text x="{left}" y="{}">{}</text>"#,
        bottom + 16.0,
        map.x_range.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        left + pw,
        bottom + 16.0,
        map.x_range.1
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        bottom + 34.0,
        map.x_label
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        left - 6.0,
        top + 10.0,
        map.y_range.1
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{bottom}" text-anchor="end">{}</text>"#,
        left - 6.0,
        map.y_range.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#,
        left - 40.0,
        top + ph / 2.0,
        left - 40.0,
        top + ph / 2.0,
        map.y_label
    )
    .unwrap();

    // legend
    let lx = left + pw + 30.0;
    let steps = 50;
    for j in 0..steps {
        let u = 1.0 - j as f64 / (steps - 1) as f64;
        writeln!(
            s,
            r#"<rect x="{lx}" y="{:.3}" width="20" height="{:.3}" fill="{}"/>"#,
            top + j as f64 * ph / steps as f64,
            ph / steps as f64 + 0.05,
            color(u)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}">{hi:.4}</text>"#,
        lx + 26.0,
        top + 10.0
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{bottom}">{lo:.4}</text>"#, lx + 26.0).unwrap();
    if map.mark.is_some() {
        writeln!(
            s,
            r##"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="#ff2d2d" stroke-width="2"/><text x="{}" y="{}">binding</text>"##,
            bottom + 30.0,
            lx + 20.0,
            bottom + 30.0,
            lx + 26.0,
            bottom + 34.0
        )
        .unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    s
}

/// `(t, x1)` heatmap of a one-dimensional field: time runs left to right,
/// `x1` bottom to top. `binding[k][i]` marks obstacle-binding nodes.
pub fn time_state_heatmap(
    field: &ValueField,
    binding: Option<&[Vec<bool>]>,
    title: &str,
) -> String {
    let grid = field.grid();
    let mesh = field.mesh();
    let n = grid.len();
    let cells: Vec<Vec<f64>> = (0..n)
        .rev()
        .map(|i| {
            (0..=mesh.steps)
                .map(|k| field.slice(k).unwrap()[i])
                .collect()
        })
        .collect();
    let mark = binding.map(|b| {
        (0..n)
            .rev()
            .map(|i| (0..=mesh.steps).map(|k| b[k][i]).collect())
            .collect()
    });
    let axis = &grid.axes()[0];
    render_svg(&Heatmap {
        cells,
        mark,
        title: title.into(),
        x_label: "t",
        y_label: "x1",
        x_range: (mesh.t0, mesh.t_end),
        y_range: (axis.lo, axis.hi),
    })
}

/// `(x1, x2)` heatmap of slice `k`, remaining axes fixed at their middle
/// node.
pub fn state_slice_heatmap(
    field: &ValueField,
    k: usize,
    binding: Option<&[Vec<bool>]>,
    title: &str,
) -> Result<String, ExportError> {
    let grid = field.grid();
    let slice = field.slice(k)?;
    let counts = grid.counts();
    let mut idx: Vec<usize> = counts.iter().map(|c| c / 2).collect();
    let (n1, n2) = (counts[0], counts[1]);
    let mut cells = Vec::with_capacity(n2);
    let mut mark = Vec::with_capacity(n2);
    for j in (0..n2).rev() {
        let mut row = Vec::with_capacity(n1);
        let mut mrow = Vec::with_capacity(n1);
        for i in 0..n1 {
            idx[0] = i;
            idx[1] = j;
            let f = grid.flat_index(&idx);
            row.push(slice[f]);
            mrow.push(binding.is_some_and(|b| b[k][f]));
        }
        cells.push(row);
        mark.push(mrow);
    }
    let (a, b) = (&grid.axes()[0], &grid.axes()[1]);
    Ok(render_svg(&Heatmap {
        cells,
        mark: binding.map(|_| mark),
        title: title.into(),
        x_label: "x1",
        y_label: "x2",
        x_range: (a.lo, a.hi),
        y_range: (b.lo, b.hi),
    }))
}
