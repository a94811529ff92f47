//! Error metrics, reference grids and the CSV/JSON files written by runs.
//!
//! Grids are stored row-major with `x1` varying fastest: node `(i, j)` sits
//! at index `j * n1 + i`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{Formulation, LossBreakdown};
use crate::problems::{Point, RectDomain};
use crate::sampling::{csv_io, fmt_f64, load_err};
use crate::training::{HistoryRow, TrainingHistory};

/// Uniform tensor grid over the closed domain, boundary nodes included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGrid {
    pub domain: RectDomain,
    pub n1: usize,
    pub n2: usize,
}

impl EvalGrid {
    pub fn new(domain: RectDomain, n1: usize, n2: usize) -> Result<Self> {
        if n1 < 2 || n2 < 2 {
            return Err(Error::config(format!(
                "evaluation grid needs at least 2 nodes per axis, got {n1}x{n2}"
            )));
        }
        Ok(EvalGrid { domain, n1, n2 })
    }

    /// The 200x200 grid used for reported L1 errors.
    pub fn standard(domain: RectDomain) -> Self {
        EvalGrid { domain, n1: 200, n2: 200 }
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, i: usize, j: usize) -> Point {
        let s = i as f64 / (self.n1 - 1) as f64;
        let t = j as f64 / (self.n2 - 1) as f64;
        self.domain.map_unit(s, t)
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.n2)
            .flat_map(|j| (0..self.n1).map(move |i| (i, j)))
            .map(|(i, j)| self.node(i, j))
            .collect()
    }

    pub fn nodes_flat(&self) -> Vec<f64> {
        self.nodes().into_iter().flatten().collect()
    }
}

/// `area * mean |a - b|` over grid node values.
pub fn l1_error_values(a: &[f64], b: &[f64], grid: &EvalGrid) -> Result<f64> {
    if a.len() != grid.len() || b.len() != grid.len() {
        return Err(Error::config(format!(
            "expected {} grid values, got {} and {}",
            grid.len(),
            a.len(),
            b.len()
        )));
    }
    let mut sum = 0.0;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::numeric("non-finite value on evaluation grid", Some(k)));
        }
        sum += (x - y).abs();
    }
    Ok(grid.domain.area() * sum / grid.len() as f64)
}

pub fn l1_error<F, R>(field: F, reference: R, grid: &EvalGrid) -> Result<f64>
where
    F: Fn(Point) -> f64,
    R: Fn(Point) -> f64,
{
    let nodes = grid.nodes();
    let a: Vec<f64> = nodes.iter().map(|&x| field(x)).collect();
    let b: Vec<f64> = nodes.iter().map(|&x| reference(x)).collect();
    l1_error_values(&a, &b, grid)
}

/// Bilinear interpolant of values on a rectangular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceField {
    x1: Vec<f64>,
    x2: Vec<f64>,
    /// Row-major, `x1` fastest.
    values: Vec<f64>,
}

impl ReferenceField {
    pub fn new(x1: Vec<f64>, x2: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        for (name, axis) in [("x1", &x1), ("x2", &x2)] {
            if axis.len() < 2 || axis.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::config(format!(
                    "reference {name} axis must have at least 2 strictly increasing nodes"
                )));
            }
        }
        if values.len() != x1.len() * x2.len() {
            return Err(Error::config(format!(
                "reference grid {}x{} needs {} values, got {}",
                x1.len(),
                x2.len(),
                x1.len() * x2.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite reference value", Some(k)));
        }
        Ok(ReferenceField { x1, x2, values })
    }

    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    pub fn x2(&self) -> &[f64] {
        &self.x2
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Bilinear value at `x`; points outside the grid are clamped onto it.
    pub fn value(&self, x: Point) -> f64 {
        let (i, s) = locate(&self.x1, x[0]);
        let (j, t) = locate(&self.x2, x[1]);
        let n1 = self.x1.len();
        let v = |i: usize, j: usize| self.values[j * n1 + i];
        (1.0 - s) * (1.0 - t) * v(i, j)
            + s * (1.0 - t) * v(i + 1, j)
            + (1.0 - s) * t * v(i, j + 1)
            + s * t * v(i + 1, j + 1)
    }
}

/// Cell index and local coordinate in `[0, 1]`.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let last = axis.len() - 2;
    let i = axis.partition_point(|&a| a <= x).saturating_sub(1).min(last);
    let s = (x - axis[i]) / (axis[i + 1] - axis[i]);
    (i, s.clamp(0.0, 1.0))
}

/// Reads a `x1,x2,value` CSV with one row per node, in any order.
pub fn load_reference(path: &Path) -> Result<ReferenceField> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["x1", "x2", "value"] {
        return Err(load_err(path, 1, "expected header x1,x2,value"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(load_err(path, line, "expected 3 fields"));
        }
        let mut v = [0.0; 3];
        for (k, field) in rec.iter().enumerate() {
            v[k] = field
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| load_err(path, line, &format!("bad number `{field}`")))?;
        }
        rows.push((line, v));
    }
    if rows.is_empty() {
        return Err(load_err(path, 2, "no grid nodes"));
    }
    let axis = |k: usize| {
        let mut a: Vec<f64> = rows.iter().map(|(_, v)| v[k]).collect();
        a.sort_by(f64::total_cmp);
        a.dedup();
        a
    };
    let (x1, x2) = (axis(0), axis(1));
    let last_line = rows.last().map(|r| r.0).unwrap_or(1);
    if x1.len() < 2 || x2.len() < 2 {
        return Err(load_err(path, last_line, "grid needs at least 2 nodes per axis"));
    }
    let index1: HashMap<u64, usize> = x1.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
    let index2: HashMap<u64, usize> = x2.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
    let mut values = vec![f64::NAN; x1.len() * x2.len()];
    let mut seen = vec![false; values.len()];
    for (line, v) in &rows {
        let k = index2[&v[1].to_bits()] * x1.len() + index1[&v[0].to_bits()];
        if seen[k] {
            return Err(load_err(path, *line, "duplicate grid node"));
        }
        seen[k] = true;
        values[k] = v[2];
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        let (i, j) = (k % x1.len(), k / x1.len());
        return Err(load_err(
            path,
            last_line,
            &format!("grid is not rectangular: node ({}, {}) missing", x1[i], x2[j]),
        ));
    }
    ReferenceField::new(x1, x2, values)
}

pub fn export_values(values: &[f64], grid: &EvalGrid, path: &Path) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::config(format!(
            "expected {} grid values, got {}",
            grid.len(),
            values.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let io = |e| csv_io(path, e);
    w.write_record(["x1", "x2", "value"]).map_err(io)?;
    for (x, v) in grid.nodes().iter().zip(values) {
        w.write_record([fmt_f64(x[0]), fmt_f64(x[1]), fmt_f64(*v)]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn export_grid<F: Fn(Point) -> f64>(field: F, grid: &EvalGrid, path: &Path) -> Result<()> {
    let values: Vec<f64> = grid.nodes().into_iter().map(field).collect();
    export_values(&values, grid, path)
}

pub fn history_header(formulation: Formulation) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "eps".into(), "total".into()];
    h.extend(LossBreakdown::component_names(formulation).iter().map(|s| s.to_string()));
    h.extend(["l1_y".into(), "l1_w".into(), "lr".into()]);
    h
}

/// Columns: `epoch, eps, total, <components>, l1_y, l1_w, lr`. Missing
/// errors are empty fields.
pub fn write_history(history: &TrainingHistory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let io = |e| csv_io(path, e);
    w.write_record(history_header(history.formulation)).map_err(io)?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for row in &history.rows {
        let mut rec = vec![row.epoch.to_string(), fmt_f64(row.eps), fmt_f64(row.total)];
        rec.extend(row.components.iter().map(|&c| fmt_f64(c)));
        rec.extend([opt(row.l1_y), opt(row.l1_w), fmt_f64(row.lr)]);
        w.write_record(rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<TrainingHistory> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let formulation = [Formulation::Optimality, Formulation::Penalized]
        .into_iter()
        .find(|&f| history_header(f) == header)
        .ok_or_else(|| load_err(path, 1, "unrecognised history header"))?;
    let n_comp = LossBreakdown::component_names(formulation).len();
    let mut history = TrainingHistory::new(formulation);
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| load_err(path, line, &format!("bad value in column {}", header[k])))
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            match rec.get(k).map(str::trim) {
                Some("") => Ok(None),
                _ => num(k).map(Some),
            }
        };
        let epoch = rec
            .get(0)
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| load_err(path, line, "bad epoch"))?;
        history.rows.push(HistoryRow {
            epoch,
            eps: num(1)?,
            total: num(2)?,
            components: (0..n_comp).map(|k| num(3 + k)).collect::<Result<_>>()?,
            l1_y: opt(3 + n_comp)?,
            l1_w: opt(4 + n_comp)?,
            lr: num(5 + n_comp)?,
        });
    }
    Ok(history)
}

/// Pretty JSON with keys in a fixed order.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("cannot serialise {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| load_err(path, e.line() as u64, &e.to_string()))
}

/// Key/value text files: one `key = value` per line after a magic first line.
pub fn write_manifest(path: &Path, magic: &str, entries: &[(&str, String)]) -> Result<()> {
    let mut text = format!("{magic}\n");
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path, magic: &str) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(magic) {
        return Err(load_err(path, 1, &format!("expected `{magic}`")));
    }
    let mut out = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| load_err(path, n as u64 + 2, "expected `key = value`"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
