//! Side-by-side report of two finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::{RunSummary, Timing};
use crate::error::{Error, Result};
use crate::metrics_io::{read_history, read_json};
use crate::sampling::{csv_io, fmt_f64};
use crate::training::{HistoryRow, TrainingHistory};

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub timing: Option<Timing>,
    pub history: TrainingHistory,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let history = read_history(&dir.join("history.csv"))?;
        let summary_path = dir.join("summary.json");
        let summary: RunSummary = serde_json::from_value(read_json(&summary_path)?)
            .map_err(|e| Error::Load { path: summary_path.clone(), line: 0, msg: e.to_string() })?;
        let timing_path = dir.join("timing.json");
        let timing = if timing_path.exists() {
            Some(
                serde_json::from_value(read_json(&timing_path)?)
                    .map_err(|e| Error::Load { path: timing_path.clone(), line: 0, msg: e.to_string() })?,
            )
        } else {
            None
        };
        Ok(RunRecord { dir: dir.to_path_buf(), summary, timing, history })
    }

    pub fn seconds_per_epoch(&self) -> Option<f64> {
        self.timing.as_ref().map(|t| t.seconds_per_epoch)
    }
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub a: RunRecord,
    pub b: RunRecord,
    /// Rows keyed by `(epoch, repeat)`; a repeat appears where a stage ends
    /// and the next one starts at the same epoch.
    pub merged: BTreeMap<(u64, usize), (Option<HistoryRow>, Option<HistoryRow>)>,
    /// Largest difference between aligned history values and final errors.
    pub max_difference: f64,
}

fn keyed(h: &TrainingHistory) -> BTreeMap<(u64, usize), HistoryRow> {
    let mut out = BTreeMap::new();
    let mut last = None;
    let mut repeat = 0;
    for row in &h.rows {
        repeat = if last == Some(row.epoch) { repeat + 1 } else { 0 };
        last = Some(row.epoch);
        out.insert((row.epoch, repeat), row.clone());
    }
    out
}

fn diff(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) if x == y => 0.0,
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

pub fn compare_runs(dir_a: &Path, dir_b: &Path) -> Result<CompareReport> {
    let a = RunRecord::load(dir_a)?;
    let b = RunRecord::load(dir_b)?;
    let (ka, mut kb) = (keyed(&a.history), keyed(&b.history));
    let mut merged = BTreeMap::new();
    let mut max_difference: f64 = 0.0;
    for (k, ra) in ka {
        let rb = kb.remove(&k);
        match &rb {
            Some(rb) => {
                for (x, y) in [
                    (Some(ra.total), Some(rb.total)),
                    (ra.l1_y, rb.l1_y),
                    (ra.l1_w, rb.l1_w),
                ] {
                    max_difference = max_difference.max(diff(x, y));
                }
            }
            None => max_difference = f64::INFINITY,
        }
        merged.insert(k, (Some(ra), rb));
    }
    if !kb.is_empty() {
        max_difference = f64::INFINITY;
    }
    for (k, rb) in kb {
        merged.insert(k, (None, Some(rb)));
    }
    let (sa, sb) = (&a.summary, &b.summary);
    for (x, y) in [(sa.l1_y, sb.l1_y), (sa.l1_p, sb.l1_p), (sa.l1_u, sb.l1_u)] {
        max_difference = max_difference.max(diff(x, y));
    }
    Ok(CompareReport { a, b, merged, max_difference })
}

impl CompareReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let io = |e| csv_io(path, e);
        w.write_record([
            "epoch", "a_eps", "a_total", "a_l1_y", "a_l1_w", "b_eps", "b_total", "b_l1_y", "b_l1_w",
        ])
        .map_err(io)?;
        let cells = |r: &Option<HistoryRow>| -> [String; 4] {
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            match r {
                Some(r) => [fmt_f64(r.eps), fmt_f64(r.total), opt(r.l1_y), opt(r.l1_w)],
                None => Default::default(),
            }
        };
        for ((epoch, _), (ra, rb)) in &self.merged {
            let mut rec = vec![epoch.to_string()];
            rec.extend(cells(ra));
            rec.extend(cells(rb));
            w.write_record(rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Human-readable verdict.
    pub fn verdict(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "n/a".into());
        for (label, r) in [("A", &self.a), ("B", &self.b)] {
            let m = &r.summary;
            let _ = writeln!(
                s,
                "run {label}: {} ({}, {}, eps {}) epochs {} loss {} L1(y) {} L1(p) {} L1(u) {} cost {} s/epoch",
                r.dir.display(),
                m.benchmark.name(),
                m.formulation,
                m.eps,
                m.epochs,
                fmt(m.final_loss.get("total").copied()),
                fmt(m.l1_y),
                fmt(m.l1_p),
                fmt(m.l1_u),
                fmt(r.seconds_per_epoch()),
            );
        }
        let _ = writeln!(s, "max difference: {:.4e}", self.max_difference);
        let (sa, sb) = (&self.a.summary, &self.b.summary);
        for (name, x, y) in [("y", sa.l1_y, sb.l1_y), ("p", sa.l1_p, sb.l1_p), ("u", sa.l1_u, sb.l1_u)] {
            if let (Some(x), Some(y)) = (x, y) {
                let lower = if x < y { "A" } else if y < x { "B" } else { "tie" };
                let _ = writeln!(s, "lower L1({name}): {lower}");
            }
        }
        if let (Some(x), Some(y)) = (self.a.seconds_per_epoch(), self.b.seconds_per_epoch()) {
            if y > 0.0 {
                let _ = writeln!(s, "per-epoch cost ratio A/B: {:.3}", x / y);
            }
        }
        s
    }
}
