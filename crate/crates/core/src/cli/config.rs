//! Run configuration files. Every section is optional; omitted values come
//! from the preset selected by `scale` and the benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::losses::{Formulation, StageSchedule};
use crate::netcore::TwoScaleConfig;
use crate::problems::{check_wellposedness, default_centers, make_benchmark, BenchmarkId, Point, ProblemSpec};
use crate::sampling::{BoundaryDist, InteriorMode, RarConfig};
use crate::training::{ContinuationConfig, LossWeights, LrSchedule, StageSettings, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 3x100 networks, 150x150 interior and 250 boundary points per side,
    /// 80000 epochs.
    Paper,
    /// 3x50 networks, 60x60 and 100 per side, 20000 epochs.
    Desk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub center_y: Point,
    pub center_w: Point,
}

impl NetworkConfig {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![5];
        sizes.extend(&self.hidden);
        sizes.push(1);
        sizes
    }

    pub fn two_scale(&self) -> Result<(TwoScaleConfig, TwoScaleConfig)> {
        Ok((
            TwoScaleConfig::new(self.gamma, self.center_y.to_vec())?,
            TwoScaleConfig::new(self.gamma, self.center_w.to_vec())?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollocationConfig {
    pub interior: [usize; 2],
    pub interior_mode: InteriorMode,
    pub boundary_per_side: usize,
    pub boundary_dist: BoundaryDist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
    /// Nodes per axis of the exported grids and of the L1 quadrature.
    pub grid: [usize; 2],
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub benchmark: BenchmarkId,
    pub formulation: Formulation,
    pub eps: f64,
    pub beta: f64,
    pub seed: u64,
    pub network: NetworkConfig,
    pub collocation: CollocationConfig,
    pub weights: LossWeights,
    pub lr: LrSchedule,
    pub continuation: ContinuationConfig,
    pub rar: Option<RarConfig>,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Preset for `benchmark` at `eps` with a single continuation stage.
    pub fn preset(benchmark: BenchmarkId, formulation: Formulation, eps: f64, scale: Scale) -> Self {
        let (hidden, n, per_side, epochs) = match scale {
            Scale::Paper => (100, 150, 250, 80_000),
            Scale::Desk => (50, 60, 100, 20_000),
        };
        let (center_y, center_w) = default_centers(benchmark);
        let boundary_dist = match benchmark {
            BenchmarkId::ExpBoundaryLayer => BoundaryDist::BetaHalf,
            _ => BoundaryDist::Uniform,
        };
        RunConfig {
            benchmark,
            formulation,
            eps,
            beta: 1.0,
            seed: 0,
            network: NetworkConfig { hidden: vec![hidden; 3], gamma: -1.0, center_y, center_w },
            collocation: CollocationConfig {
                interior: [n, n],
                interior_mode: InteriorMode::Grid,
                boundary_per_side: per_side,
                boundary_dist,
            },
            weights: LossWeights::default_for(formulation),
            lr: LrSchedule::default(),
            continuation: ContinuationConfig::single(eps, epochs),
            rar: None,
            output: OutputConfig {
                dir: PathBuf::from("runs").join(format!("{}-{}", benchmark.name(), formulation.name())),
                log_every: 100,
                checkpoint_every: Some(5000),
                grid: [200, 200],
            },
        }
    }

    pub fn problem(&self, eps: f64) -> Result<ProblemSpec> {
        make_benchmark(self.benchmark, eps, self.beta)
    }

    pub fn train_config(&self, parallel: bool) -> TrainConfig {
        TrainConfig {
            continuation: self.continuation,
            rar: self.rar,
            stage: StageSettings {
                weights: self.weights.clone(),
                lr: self.lr,
                log_every: self.output.log_every,
                checkpoint_every: self.output.checkpoint_every,
                parallel,
            },
            seed: self.seed,
        }
    }

    /// Semantic checks, including well-posedness at every continuation level.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.continuation.eps_target != self.eps {
            return Err(Error::config("continuation target must equal eps"));
        }
        let stages = self.continuation.stages()?;
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(Error::config(format!(
                "network.hidden must list positive widths, got {:?}",
                self.network.hidden
            )));
        }
        let (cy, cw) = self.network.two_scale()?;
        let c = &self.collocation;
        if c.interior[0] == 0 || c.interior[1] == 0 {
            return Err(Error::config("collocation.interior needs positive counts"));
        }
        if let Some(rar) = &self.rar {
            rar.validate()?;
        }
        let o = &self.output;
        if o.grid[0] < 2 || o.grid[1] < 2 {
            return Err(Error::config("output.grid needs at least 2 nodes per axis"));
        }
        self.train_config(false).stage.validate()?;
        for eps in stages {
            let spec = self.problem(eps)?;
            for (name, cfg) in [("y", &cy), ("w", &cw)] {
                if !cfg.center_within(&spec.domain.lower, &spec.domain.upper) {
                    return Err(Error::config(format!("center_{name} lies outside the domain")));
                }
            }
            let report = check_wellposedness(&spec, 1000, self.seed);
            if !report.passed {
                return Err(Error::config(format!(
                    "problem at eps {eps} is not well posed: c - div(zeta)/2 = {} < c0 = {} at {:?}",
                    report.min_margin, report.c0, report.argmin
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    benchmark: BenchmarkId,
    formulation: Formulation,
    eps: f64,
    seed: u64,
    beta: Option<f64>,
    scale: Option<Scale>,
    network: Option<RawNetwork>,
    collocation: Option<RawCollocation>,
    weights: Option<RawWeights>,
    lr: Option<RawLr>,
    continuation: Option<RawContinuation>,
    rar: Option<RawRar>,
    output: Option<RawOutput>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Centers {
    Auto(String),
    Explicit { y: Point, w: Point },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    hidden: Option<Vec<usize>>,
    gamma: Option<f64>,
    centers: Option<Centers>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCollocation {
    interior: Option<[usize; 2]>,
    interior_mode: Option<InteriorMode>,
    boundary_per_side: Option<usize>,
    boundary_dist: Option<BoundaryDist>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    #[serde(default)]
    breakpoints: Vec<u64>,
    values: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    first: Option<RawSchedule>,
    second: Option<RawSchedule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLr {
    initial: Option<f64>,
    decay: Option<f64>,
    step: Option<u64>,
    floor: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawContinuation {
    eps0: Option<f64>,
    ell: Option<f64>,
    epochs_per_stage: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRar {
    enabled: Option<bool>,
    pool_size: Option<usize>,
    top_k: Option<usize>,
    period: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    log_every: Option<u64>,
    checkpoint_every: Option<u64>,
    grid: Option<[usize; 2]>,
}

fn line_of_offset(text: &str, offset: usize) -> u64 {
    text[..offset.min(text.len())].matches('\n').count() as u64 + 1
}

/// Line of the first `key = ...` assignment, optionally inside `[section]`.
fn line_of_key(text: &str, section: Option<&str>, key: &str) -> Option<u64> {
    let mut current: Option<String> = None;
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            continue;
        }
        let in_section = match section {
            None => current.is_none(),
            Some(s) => current.as_deref() == Some(s),
        };
        if in_section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(n as u64 + 1);
                }
            }
        }
    }
    section.and_then(|s| {
        text.lines()
            .position(|l| l.trim() == format!("[{s}]"))
            .map(|n| n as u64 + 1)
    })
}

fn schedule(raw: RawSchedule) -> Result<StageSchedule> {
    StageSchedule::new(raw.breakpoints, raw.values)
}

/// Parses a config; `path` only labels errors.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let load = |line: u64, msg: String| Error::Load { path: path.to_path_buf(), line, msg };
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(0);
        load(line, e.message().to_string())
    })?;
    let at = |section: Option<&str>, key: &str, e: Error| {
        let msg = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        load(line_of_key(text, section, key).unwrap_or(0), msg)
    };
    let scale = raw.scale.unwrap_or(Scale::Paper);
    let mut cfg = RunConfig::preset(raw.benchmark, raw.formulation, raw.eps, scale);
    cfg.seed = raw.seed;
    if let Some(b) = raw.beta {
        cfg.beta = b;
    }
    if let Some(n) = raw.network {
        if let Some(h) = n.hidden {
            cfg.network.hidden = h;
        }
        if let Some(g) = n.gamma {
            cfg.network.gamma = g;
        }
        match n.centers {
            None => {}
            Some(Centers::Auto(s)) if s == "auto" => {}
            Some(Centers::Auto(s)) => {
                return Err(at(Some("network"), "centers", Error::config(format!(
                    "centers must be \"auto\" or {{ y = [..], w = [..] }}, got \"{s}\""
                ))))
            }
            Some(Centers::Explicit { y, w }) => {
                cfg.network.center_y = y;
                cfg.network.center_w = w;
            }
        }
    }
    if let Some(c) = raw.collocation {
        let t = &mut cfg.collocation;
        t.interior = c.interior.unwrap_or(t.interior);
        t.interior_mode = c.interior_mode.unwrap_or(t.interior_mode);
        t.boundary_per_side = c.boundary_per_side.unwrap_or(t.boundary_per_side);
        t.boundary_dist = c.boundary_dist.unwrap_or(t.boundary_dist);
    }
    if let Some(w) = raw.weights {
        if let Some(s) = w.first {
            cfg.weights.first = schedule(s).map_err(|e| at(Some("weights"), "first", e))?;
        }
        if let Some(s) = w.second {
            cfg.weights.second = schedule(s).map_err(|e| at(Some("weights"), "second", e))?;
        }
    }
    if let Some(l) = raw.lr {
        let t = &mut cfg.lr;
        t.initial = l.initial.unwrap_or(t.initial);
        t.decay = l.decay.unwrap_or(t.decay);
        t.step = l.step.unwrap_or(t.step);
        t.floor = l.floor.unwrap_or(t.floor);
        cfg.lr.validate().map_err(|e| at(Some("lr"), "initial", e))?;
    }
    cfg.continuation.eps_target = cfg.eps;
    cfg.continuation.eps0 = cfg.eps;
    if let Some(c) = raw.continuation {
        let t = &mut cfg.continuation;
        t.eps0 = c.eps0.unwrap_or(t.eps0);
        t.ell = c.ell.unwrap_or(t.ell);
        t.epochs_per_stage = c.epochs_per_stage.unwrap_or(t.epochs_per_stage);
        t.validate().map_err(|e| at(Some("continuation"), "eps0", e))?;
    }
    if let Some(r) = raw.rar {
        if r.enabled.unwrap_or(true) {
            let d = RarConfig::default();
            let rar = RarConfig {
                pool_size: r.pool_size.unwrap_or(d.pool_size),
                top_k: r.top_k.unwrap_or(d.top_k),
                period: r.period.unwrap_or(d.period),
            };
            rar.validate().map_err(|e| at(Some("rar"), "top_k", e))?;
            cfg.rar = Some(rar);
        }
    }
    if let Some(o) = raw.output {
        let t = &mut cfg.output;
        if let Some(d) = o.dir {
            t.dir = d;
        }
        t.log_every = o.log_every.unwrap_or(t.log_every);
        if let Some(c) = o.checkpoint_every {
            t.checkpoint_every = (c > 0).then_some(c);
        }
        t.grid = o.grid.unwrap_or(t.grid);
    }
    cfg.validate().map_err(|e| {
        let key = match &e {
            Error::Config(m) if m.starts_with("beta") => "beta",
            Error::Config(m) if m.contains("network.hidden") => return at(Some("network"), "hidden", e),
            Error::Config(m) if m.contains("center") => return at(Some("network"), "centers", e),
            Error::Config(m) if m.contains("collocation") => return at(Some("collocation"), "interior", e),
            Error::Config(m) if m.contains("output") || m.contains("log_every") => {
                return at(Some("output"), "grid", e)
            }
            _ => "eps",
        };
        at(None, key, e)
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config(text, Path::new("test.toml"))
    }

    fn load_line(r: Result<RunConfig>) -> u64 {
        match r {
            Err(Error::Load { line, .. }) => line,
            other => panic!("expected a load error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_uses_paper_preset() {
        let cfg = parse("benchmark = \"exp-boundary-layer\"\nformulation = \"optimality\"\neps = 0.01\nseed = 3\n").unwrap();
        assert_eq!(cfg.network.layer_sizes(), vec![5, 100, 100, 100, 1]);
        assert_eq!(cfg.collocation.interior, [150, 150]);
        assert_eq!(cfg.collocation.boundary_per_side, 250);
        assert_eq!(cfg.collocation.boundary_dist, BoundaryDist::BetaHalf);
        assert_eq!(cfg.continuation.epochs_per_stage, 80_000);
        assert_eq!(cfg.continuation.stages().unwrap(), vec![0.01]);
        assert_eq!((cfg.network.center_y, cfg.network.center_w), ([1.0, 1.0], [0.0, 0.0]));
        assert_eq!(cfg.seed, 3);
        assert!(cfg.rar.is_none());
    }

    #[test]
    fn sections_override_preset() {
        let cfg = parse(
            r#"
benchmark = "interior-layer"
formulation = "penalized"
eps = 5e-4
seed = 1
scale = "desk"

[network]
hidden = [16, 16]
centers = { y = [0.5, 0.5], w = [0.0, 0.5] }

[continuation]
eps0 = 0.1
ell = 10
epochs_per_stage = 7

[rar]
top_k = 10
pool_size = 100
period = 3

[weights]
first = { values = [2.0] }
"#,
        )
        .unwrap();
        assert_eq!(cfg.network.layer_sizes(), vec![5, 16, 16, 1]);
        assert_eq!(cfg.collocation.interior, [60, 60]);
        assert_eq!(cfg.collocation.boundary_dist, BoundaryDist::Uniform);
        assert_eq!(cfg.continuation.stages().unwrap(), vec![0.1, 0.01, 0.001, 5e-4]);
        assert_eq!(cfg.rar, Some(RarConfig { pool_size: 100, top_k: 10, period: 3 }));
        assert_eq!(cfg.weights.at(50_000), (2.0, 10_000.0));
        assert_eq!(cfg.network.center_w, [0.0, 0.5]);
    }

    #[test]
    fn errors_point_at_lines() {
        let base = "formulation = \"optimality\"\neps = 0.01\nseed = 0\n";
        assert_eq!(load_line(parse(&format!("{base}benchmark = \"bogus\"\n"))), 4);
        assert_eq!(load_line(parse(&format!("benchmark = \"interior-layer\"\n{base}colour = 1\n"))), 5);
        assert_eq!(
            load_line(parse("benchmark = \"interior-layer\"\nformulation = \"optimality\"\neps = -1\nseed = 0\n")),
            3
        );
        assert_eq!(
            load_line(parse(&format!("benchmark = \"interior-layer\"\n{base}\n[network]\nhidden = [0]\n"))),
            7
        );
        assert_eq!(
            load_line(parse(&format!("benchmark = \"interior-layer\"\n{base}[continuation]\neps0 = 0.001\n"))),
            6
        );
        assert!(parse("benchmark = \"interior-layer\"\nformulation = \"optimality\"\neps = 0.01\n").is_err());
    }
}
