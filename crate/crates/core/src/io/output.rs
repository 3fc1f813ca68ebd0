//! Diagnostics table, field snapshots and atomic file writes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::estimates::DiagnosticsRecord;
use crate::grid::{Field, Grid};
use crate::io::config::SnapshotFormat;
use crate::rothe::Trajectory;

pub const CSV_COLUMNS: [&str; 16] = [
    "k",
    "t",
    "E",
    "l31_lhs",
    "l34_lhs",
    "mean_identity_residual",
    "rg_gap",
    "min_rho",
    "max_rho",
    "sup_w",
    "mass_rho",
    "abs_log_mass",
    "w22_u",
    "w22_rho",
    "fp_iters",
    "newton_iters",
];

/// 17 significant digits, shortest-exponent form.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    tmp.set_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

pub fn diagnostics_csv(records: &[DiagnosticsRecord]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let nums = [
            r.t,
            r.e,
            r.l31.total,
            r.l34.total,
            r.mean_identity_residual,
            r.rg_gap,
            r.min_rho,
            r.max_rho,
            r.sup_w,
            r.mass_rho,
            r.abs_log_mass,
            r.w22_u,
            r.w22_rho,
        ];
        out.push_str(&r.k.to_string());
        for x in nums {
            out.push(',');
            out.push_str(&fmt_num(x));
        }
        out.push_str(&format!(",{},{}\n", r.fp_iters, r.newton_iters));
    }
    out
}

/// The trajectory is accepted for symmetry with the other writers; rows come
/// from `records`, which may be a cadence-thinned subset of the steps.
pub fn write_diagnostics_csv(
    _traj: &Trajectory,
    records: &[DiagnosticsRecord],
    path: &Path,
) -> io::Result<()> {
    write_atomic(path, diagnostics_csv(records).as_bytes())
}

const AXES: [&str; 3] = ["x", "y", "z"];

pub fn csv_grid(field: &Field) -> String {
    let grid = field.grid();
    let dim = grid.dim();
    let mut out = AXES[..dim].join(",");
    out.push_str(",value\n");
    for (i, v) in field.values().iter().enumerate() {
        let x = grid.coordinates(i);
        for c in &x[..dim] {
            out.push_str(&fmt_num(*c));
            out.push(',');
        }
        out.push_str(&fmt_num(*v));
        out.push('\n');
    }
    out
}

/// Reads a `csv_grid` text back onto `grid`, checking the node coordinates.
pub fn parse_csv_grid(text: &str, grid: &Arc<Grid>) -> Result<Field, String> {
    let dim = grid.dim();
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty snapshot")?;
    let expected = format!("{},value", AXES[..dim].join(","));
    if header != expected {
        return Err(format!("header {header:?}, expected {expected:?}"));
    }
    let mut values = Vec::with_capacity(grid.node_count());
    for (i, line) in lines.enumerate() {
        if i >= grid.node_count() {
            return Err("more rows than grid nodes".into());
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim + 1 {
            return Err(format!("row {}: expected {} cells", i + 2, dim + 1));
        }
        let parsed = cells
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| format!("row {}: bad number {c:?}", i + 2))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let x = grid.coordinates(i);
        for a in 0..dim {
            if (parsed[a] - x[a]).abs() > 1e-12 * grid.extents()[a] {
                return Err(format!(
                    "row {}: coordinate mismatch on axis {}",
                    i + 2,
                    AXES[a]
                ));
            }
        }
        values.push(parsed[dim]);
    }
    if values.len() != grid.node_count() {
        return Err(format!(
            "{} rows for {} nodes",
            values.len(),
            grid.node_count()
        ));
    }
    Field::new(grid.clone(), values).map_err(|e| e.to_string())
}

/// gnuplot commands over a `csv_grid` file; 3D data is shown as the middle z slice.
pub fn plot_script(csv_name: &str, grid: &Grid, title: &str) -> String {
    let mut s = String::from("set datafile separator ','\n");
    s.push_str(&format!("set title '{title}'\n"));
    match grid.dim() {
        1 => s.push_str(&format!(
            "set xlabel 'x'\nplot '{csv_name}' using 1:2 every ::1 with linespoints notitle\n"
        )),
        2 => s.push_str(&format!(
            "set xlabel 'x'\nset ylabel 'y'\nset pm3d map\nset dgrid3d {},{}\n\
             splot '{csv_name}' using 1:2:3 every ::1 with pm3d notitle\n",
            grid.nodes()[1],
            grid.nodes()[0]
        )),
        _ => {
            let mid = grid.nodes()[2] / 2;
            let z = mid as f64 * grid.spacing()[2];
            s.push_str(&format!(
                "set xlabel 'x'\nset ylabel 'y'\nset pm3d map\nset dgrid3d {},{}\nzmid = {}\n\
                 splot '{csv_name}' using 1:2:(abs($3 - zmid) < {} ? $4 : 1/0) every ::1 with pm3d notitle\n",
                grid.nodes()[1],
                grid.nodes()[0],
                fmt_num(z),
                fmt_num(0.25 * grid.spacing()[2]),
            ));
        }
    }
    s
}

/// `CsvGrid` writes `path`; `PlotScript` writes `path` as a script next to
/// the data file `path` with extension `csv`.
pub fn write_snapshot(field: &Field, path: &Path, format: SnapshotFormat) -> io::Result<()> {
    match format {
        SnapshotFormat::CsvGrid => write_atomic(path, csv_grid(field).as_bytes()),
        SnapshotFormat::PlotScript => {
            let data = path.with_extension("csv");
            write_atomic(&data, csv_grid(field).as_bytes())?;
            let name = data
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let title = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            write_atomic(path, plot_script(&name, field.grid(), &title).as_bytes())
        }
    }
}
