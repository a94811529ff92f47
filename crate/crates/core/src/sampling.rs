//! Collocation points and residual-based adaptive refinement (RAR).

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{Point, RectDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteriorMode {
    /// Tensor grid of interior nodes `(i/(n1+1), j/(n2+1))`.
    Grid,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryDist {
    Uniform,
    /// Beta(1/2, 1/2), denser towards both ends of each side.
    BetaHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Right, Side::Top, Side::Left];

    pub fn name(self) -> &'static str {
        match self {
            Side::Bottom => "bottom",
            Side::Right => "right",
            Side::Top => "top",
            Side::Left => "left",
        }
    }

    /// Point at parameter `t in [0, 1]` along this side.
    pub fn point(self, domain: &RectDomain, t: f64) -> Point {
        match self {
            Side::Bottom => [domain.lower[0] + t * domain.width(), domain.lower[1]],
            Side::Top => [domain.lower[0] + t * domain.width(), domain.upper[1]],
            Side::Left => [domain.lower[0], domain.lower[1] + t * domain.height()],
            Side::Right => [domain.upper[0], domain.lower[1] + t * domain.height()],
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Side::ALL
            .into_iter()
            .find(|side| side.name() == s)
            .ok_or_else(|| Error::config(format!("unknown boundary side `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub x: Point,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollocationSet {
    pub interior: Vec<Point>,
    pub boundary: Vec<BoundaryPoint>,
    /// Human-readable record of how the points were produced.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RarConfig {
    pub pool_size: usize,
    pub top_k: usize,
    /// Epochs between refinements.
    pub period: u64,
}

impl Default for RarConfig {
    fn default() -> Self {
        RarConfig {
            pool_size: 10_000,
            top_k: 500,
            period: 20_000,
        }
    }
}

impl RarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.pool_size {
            return Err(Error::config(format!(
                "RAR needs 1 <= top_k <= pool_size, got top_k={} pool_size={}",
                self.top_k, self.pool_size
            )));
        }
        if self.period == 0 {
            return Err(Error::config("RAR period must be at least one epoch"));
        }
        Ok(())
    }
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn sample_interior(domain: &RectDomain, mode: InteriorMode, n1: usize, n2: usize, seed: u64) -> Vec<Point> {
    match mode {
        InteriorMode::Grid => {
            let mut pts = Vec::with_capacity(n1 * n2);
            for j in 1..=n2 {
                for i in 1..=n1 {
                    pts.push(domain.map_unit(i as f64 / (n1 + 1) as f64, j as f64 / (n2 + 1) as f64));
                }
            }
            pts
        }
        InteriorMode::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n1 * n2)
                .map(|_| {
                    let s = open_unit(&mut rng);
                    let t = open_unit(&mut rng);
                    domain.map_unit(s, t)
                })
                .collect()
        }
    }
}

/// Beta(1/2, 1/2) by inversion of its CDF `(2/pi) asin(sqrt t)`.
pub fn beta_half(u: f64) -> f64 {
    let s = (FRAC_PI_2 * u).sin();
    s * s
}

pub fn sample_boundary(domain: &RectDomain, per_side: usize, dist: BoundaryDist, seed: u64) -> Vec<BoundaryPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * per_side);
    for side in Side::ALL {
        for _ in 0..per_side {
            let u = open_unit(&mut rng);
            let t = match dist {
                BoundaryDist::Uniform => u,
                BoundaryDist::BetaHalf => beta_half(u),
            };
            out.push(BoundaryPoint {
                x: side.point(domain, t),
                side,
            });
        }
    }
    out
}

/// Draws `pool_size` uniform candidates, scores them with `residuals` and
/// returns the `top_k` largest in magnitude. Ties go to the lower candidate
/// index.
pub fn rar_select<F>(residuals: F, domain: &RectDomain, cfg: &RarConfig, seed: u64) -> Result<Vec<Point>>
where
    F: FnOnce(&[Point]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let pool = sample_interior(domain, InteriorMode::UniformRandom, cfg.pool_size, 1, seed);
    let scores = residuals(&pool)?;
    if scores.len() != pool.len() {
        return Err(Error::config(format!(
            "residual function returned {} values for {} candidates",
            scores.len(),
            pool.len()
        )));
    }
    Ok(top_k_indices(&scores, cfg.top_k)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// Indices of the `k` largest `|scores|`, ordered by decreasing magnitude.
/// NaN scores rank first so they cannot hide.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let key = |i: usize| {
        let v = scores[i].abs();
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl CollocationSet {
    pub fn new(interior: Vec<Point>, boundary: Vec<BoundaryPoint>) -> Self {
        CollocationSet {
            interior,
            boundary,
            provenance: Vec::new(),
        }
    }

    pub fn interior_flat(&self) -> Vec<f64> {
        self.interior.iter().flatten().copied().collect()
    }

    pub fn boundary_flat(&self) -> Vec<f64> {
        self.boundary.iter().flat_map(|b| b.x).collect()
    }

    pub fn add_interior(&mut self, points: &[Point], note: impl Into<String>) {
        self.interior.extend_from_slice(points);
        self.provenance.push(note.into());
    }

    /// CSV with header `x1,x2,kind,side`; `kind` is `interior` or `boundary`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let io = |e| csv_io(path, e);
        w.write_record(["x1", "x2", "kind", "side"]).map_err(io)?;
        for p in &self.interior {
            w.write_record([fmt_f64(p[0]), fmt_f64(p[1]), "interior".into(), String::new()])
                .map_err(io)?;
        }
        for b in &self.boundary {
            w.write_record([
                fmt_f64(b.x[0]),
                fmt_f64(b.x[1]),
                "boundary".into(),
                b.side.name().into(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["x1", "x2", "kind", "side"] {
            return Err(load_err(path, 1, "expected header x1,x2,kind,side"));
        }
        let mut set = CollocationSet::default();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_io(path, e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| load_err(path, line, "bad coordinate"))
            };
            let x = [num(0)?, num(1)?];
            match rec.get(2) {
                Some("interior") => set.interior.push(x),
                Some("boundary") => {
                    let side = rec
                        .get(3)
                        .unwrap_or("")
                        .parse::<Side>()
                        .map_err(|_| load_err(path, line, "bad boundary side"))?;
                    set.boundary.push(BoundaryPoint { x, side });
                }
                _ => return Err(load_err(path, line, "kind must be interior or boundary")),
            }
        }
        set.provenance.push(format!("loaded from {}", path.display()));
        Ok(set)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn load_err(path: &Path, line: u64, msg: &str) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => load_err(path, line, &format!("{other:?}")),
    }
}
