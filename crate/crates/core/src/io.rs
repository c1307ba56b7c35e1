//! Plain-text formats for plans, paths and reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back reproduces the values bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::adjoint::{AdjointPath, PlanGradient};
use crate::error::{Error, Result};
use crate::forward::Trajectory;
use crate::measures::{TimeGrid, TriangularPlan};
use crate::pmp::PmpReport;

/// Dense form: `N` lines of `N + 1` comma-separated weights, no header.
/// Entries above the diagonal are zero.
pub fn plan_to_dense_csv(plan: &TriangularPlan) -> String {
    let n = plan.n_steps();
    let mut out = String::new();
    for i in 0..n {
        let row = plan.row(i);
        let line: Vec<String> = (0..=n)
            .map(|j| if j <= i { format!("{}", row[j]) } else { "0".to_string() })
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_dense_plan(text: &str) -> Result<TriangularPlan> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("plan row {line}: not a number: {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("plan file has no rows".into()));
    }
    let grid = TimeGrid::new(rows.len())?;
    TriangularPlan::from_rows(grid, &rows)
}

/// Sparse form: one `i j weight` line per nonzero entry, `#` comments.
pub fn plan_to_triplets(plan: &TriangularPlan) -> String {
    let mut out = String::new();
    for i in 0..plan.n_steps() {
        for (j, &w) in plan.row(i).iter().enumerate() {
            if w != 0.0 {
                let _ = writeln!(out, "{i} {j} {w}");
            }
        }
    }
    out
}

fn triplet_fields(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(k, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            None
        } else {
            Some((k + 1, line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect()))
        }
    })
}

/// Reads `i j weight` lines; the grid has `max i + 1` steps and every row
/// must appear.
pub fn parse_triplet_plan(text: &str) -> Result<TriangularPlan> {
    let mut entries = Vec::new();
    for (line, fields) in triplet_fields(text) {
        let [i, j, w] = fields[..] else {
            return Err(Error::Parse(format!("line {line}: expected `i j weight`")));
        };
        let bad = |what: &str| Error::Parse(format!("line {line}: bad {what}"));
        let i: usize = i.parse().map_err(|_| bad("row index"))?;
        let j: usize = j.parse().map_err(|_| bad("column index"))?;
        let w: f64 = w.parse().map_err(|_| bad("weight"))?;
        entries.push((i, j, w));
    }
    let n = entries
        .iter()
        .map(|e| e.0 + 1)
        .max()
        .ok_or_else(|| Error::Parse("plan file has no entries".into()))?;
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; i + 1]).collect();
    for (i, j, w) in entries {
        if j > i {
            return Err(Error::InvalidPlan(format!("entry ({i}, {j}) looks into the future")));
        }
        rows[i][j] += w;
    }
    TriangularPlan::from_rows(TimeGrid::new(n)?, &rows)
}

/// Dense CSV for `.csv` files, triplets otherwise.
pub fn load_plan(path: impl AsRef<Path>) -> Result<TriangularPlan> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_dense_plan(&text)
    } else {
        parse_triplet_plan(&text)
    }
}

pub fn save_plan(plan: &TriangularPlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        plan_to_dense_csv(plan)
    } else {
        plan_to_triplets(plan)
    };
    fs::write(path, text)?;
    Ok(())
}

fn path_csv(grid: TimeGrid, prefix: &str, values: &[nalgebra::DVector<f64>]) -> String {
    let d = values.first().map_or(0, |v| v.len());
    let mut out = String::from("t");
    for k in 1..=d {
        let _ = write!(out, ",{prefix}_{k}");
    }
    out.push('\n');
    for (i, v) in values.iter().enumerate() {
        let _ = write!(out, "{}", grid.node(i));
        for x in v.iter() {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

/// `t,x_1,…,x_d` with one line per node.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    path_csv(traj.grid(), "x", traj.states())
}

/// `t,q_1,…,q_d` with one line per node.
pub fn adjoint_csv(adj: &AdjointPath) -> String {
    path_csv(adj.grid(), "q", adj.costate())
}

/// `i j value` lines for every entry `j ≤ i`.
pub fn gradient_triplets(grad: &PlanGradient) -> String {
    let mut out = String::from("# i j dJ/dw\n");
    for i in 0..grad.grid().n_steps() {
        for (j, g) in grad.row(i).iter().enumerate() {
            let _ = writeln!(out, "{i} {j} {g}");
        }
    }
    out
}

/// `t,residual,in_argmax` with one line per row.
pub fn pmp_csv(grid: TimeGrid, report: &PmpReport) -> String {
    let mut out = String::from("t,residual,in_argmax\n");
    for (i, (r, ok)) in report.residuals.iter().zip(&report.support_in_argmax).enumerate() {
        let _ = writeln!(out, "{},{r},{}", grid.node(i), u8::from(*ok));
    }
    out
}

/// `i j H` lines, when the report kept its Hamiltonian table.
pub fn hamiltonian_triplets(report: &PmpReport) -> Option<String> {
    let table = report.hamiltonian.as_ref()?;
    let mut out = String::from("# i j H\n");
    for (i, row) in table.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{i} {j} {v}");
        }
    }
    Some(out)
}

/// Serializes rows with a header taken from their field names.
pub fn records_csv<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}
