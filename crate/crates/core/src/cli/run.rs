use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{Formulation, LossBreakdown};
use crate::metrics_io::{export_values, l1_error_values, load_reference, write_history, write_json, EvalGrid, ReferenceField};
use crate::netcore::{eval_values, init_params, kernel_name};
use crate::problems::{exact_solution, BenchmarkId, ProblemSpec};
use crate::sampling::{sample_boundary, sample_interior, CollocationSet};
use crate::training::{derive_seed, load_checkpoint, save_checkpoint, successive_train, TrainHooks, TrainState};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `output.dir`.
    pub out: Option<PathBuf>,
    /// Reference grid: a CSV for the state, or a directory with `y.csv`
    /// and optionally `p.csv`.
    pub reference: Option<PathBuf>,
    pub threads: usize,
    /// Continue from `<out>/checkpoint`.
    pub resume: bool,
    pub quiet: bool,
}

/// Deterministic outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub benchmark: BenchmarkId,
    pub formulation: Formulation,
    pub eps: f64,
    pub beta: f64,
    pub seed: u64,
    pub stages: Vec<f64>,
    pub epochs: u64,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub n_params: usize,
    pub final_loss: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_u: Option<f64>,
}

/// Machine-dependent cost of a run, kept apart from the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub epochs_run: u64,
    pub seconds_per_epoch: f64,
    pub threads: usize,
    pub kernels: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub timing: Timing,
    pub state: TrainState,
    pub dir: PathBuf,
}

/// Reference values of `y` and `p` on an evaluation grid.
pub enum Reference {
    Exact(BenchmarkId),
    Grid {
        y: Option<ReferenceField>,
        p: Option<ReferenceField>,
        /// The grids hold the solution at this `eps` only.
        eps: f64,
    },
    Absent,
}

impl Reference {
    pub fn for_run(cfg: &RunConfig, path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) if p.is_dir() => {
                let y = p.join("y.csv");
                let adj = p.join("p.csv");
                Ok(Reference::Grid {
                    y: Some(load_reference(&y)?),
                    p: if adj.exists() { Some(load_reference(&adj)?) } else { None },
                    eps: cfg.eps,
                })
            }
            Some(p) => Ok(Reference::Grid { y: Some(load_reference(p)?), p: None, eps: cfg.eps }),
            None if cfg.benchmark.has_exact_solution() => Ok(Reference::Exact(cfg.benchmark)),
            None => Ok(Reference::Absent),
        }
    }

    pub fn values(&self, nodes: &[[f64; 2]], eps: f64) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        match self {
            Reference::Exact(id) => {
                let v: Vec<(f64, f64)> = nodes
                    .iter()
                    .map(|&x| exact_solution(*id, x, eps).unwrap_or((f64::NAN, f64::NAN)))
                    .collect();
                (Some(v.iter().map(|a| a.0).collect()), Some(v.iter().map(|a| a.1).collect()))
            }
            Reference::Grid { y, p, eps: at } if *at == eps => {
                let sample = |f: &ReferenceField| nodes.iter().map(|&x| f.value(x)).collect();
                (y.as_ref().map(sample), p.as_ref().map(sample))
            }
            _ => (None, None),
        }
    }
}

/// Errors of both networks against a reference on a fixed grid.
pub struct ErrorProbe {
    pub grid: EvalGrid,
    nodes: Vec<[f64; 2]>,
    flat: Vec<f64>,
    reference: Reference,
    beta: f64,
    cache: Option<(f64, Option<Vec<f64>>, Option<Vec<f64>>)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FieldErrors {
    pub y: Option<f64>,
    pub p: Option<f64>,
    pub u: Option<f64>,
    /// Error of the second network's own variable.
    pub w: Option<f64>,
}

impl ErrorProbe {
    pub fn new(grid: EvalGrid, reference: Reference, beta: f64) -> Self {
        let nodes = grid.nodes();
        let flat = nodes.iter().flatten().copied().collect();
        ErrorProbe { grid, nodes, flat, reference, beta, cache: None }
    }

    /// Network values of `y` and the second variable on the grid.
    pub fn net_values(&self, state: &TrainState) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            eval_values(&state.params_y, &state.cfg_y, &self.flat, state.eps_current)?,
            eval_values(&state.params_w, &state.cfg_w, &self.flat, state.eps_current)?,
        ))
    }

    pub fn errors(&mut self, state: &TrainState) -> Result<FieldErrors> {
        let eps = state.eps_current;
        if self.cache.as_ref().map(|c| c.0) != Some(eps) {
            let (y, p) = self.reference.values(&self.nodes, eps);
            self.cache = Some((eps, y, p));
        }
        let (_, ry, rp) = self.cache.as_ref().unwrap();
        if ry.is_none() && rp.is_none() {
            return Ok(FieldErrors::default());
        }
        let (vy, vw) = self.net_values(state)?;
        let beta = self.beta;
        let mut out = FieldErrors::default();
        if let Some(ry) = ry {
            out.y = Some(l1_error_values(&vy, ry, &self.grid)?);
        }
        if let Some(rp) = rp {
            let (p, u): (Vec<f64>, Vec<f64>) = match state.formulation {
                Formulation::Optimality => vw.iter().map(|&p| (p, -p / beta)).unzip(),
                Formulation::Penalized => vw.iter().map(|&u| (-beta * u, u)).unzip(),
            };
            let ru: Vec<f64> = rp.iter().map(|&p| -p / beta).collect();
            out.p = Some(l1_error_values(&p, rp, &self.grid)?);
            out.u = Some(l1_error_values(&u, &ru, &self.grid)?);
            out.w = match state.formulation {
                Formulation::Optimality => out.p,
                Formulation::Penalized => out.u,
            };
        }
        Ok(out)
    }
}

pub fn build_collocation(cfg: &RunConfig, spec: &ProblemSpec) -> CollocationSet {
    let c = &cfg.collocation;
    let interior = sample_interior(
        &spec.domain,
        c.interior_mode,
        c.interior[0],
        c.interior[1],
        derive_seed(cfg.seed, 3, 0),
    );
    let boundary = sample_boundary(&spec.domain, c.boundary_per_side, c.boundary_dist, derive_seed(cfg.seed, 4, 0));
    let mut set = CollocationSet::new(interior, boundary);
    set.provenance.push(format!(
        "interior {:?} {}x{}, boundary {:?} {} per side, seed {}",
        c.interior_mode, c.interior[0], c.interior[1], c.boundary_dist, c.boundary_per_side, cfg.seed
    ));
    set
}

pub fn initial_state(cfg: &RunConfig) -> Result<TrainState> {
    let sizes = cfg.network.layer_sizes();
    let (cy, cw) = cfg.network.two_scale()?;
    TrainState::new(
        cfg.formulation,
        init_params(&sizes, derive_seed(cfg.seed, 1, 0))?,
        cy,
        init_params(&sizes, derive_seed(cfg.seed, 2, 0))?,
        cw,
        cfg.continuation.eps0,
    )
}

struct RunHooks<'a> {
    cfg: &'a RunConfig,
    probe: ErrorProbe,
    checkpoint_dir: PathBuf,
    quiet: bool,
    started: Instant,
}

impl TrainHooks for RunHooks<'_> {
    fn problem(&mut self, eps: f64) -> Result<ProblemSpec> {
        self.cfg.problem(eps)
    }

    fn errors(&mut self, state: &TrainState) -> Result<Option<(f64, f64)>> {
        let e = self.probe.errors(state)?;
        Ok(match (e.y, e.w) {
            (None, None) => None,
            (y, w) => Some((y.unwrap_or(f64::NAN), w.unwrap_or(f64::NAN))),
        })
    }

    fn checkpoint(&mut self, state: &TrainState, colloc: &CollocationSet) -> Result<()> {
        save_checkpoint(&self.checkpoint_dir, state, colloc)
    }

    fn stage_started(&mut self, state: &TrainState, _spec: &ProblemSpec) {
        if !self.quiet {
            eprintln!(
                "stage {} eps {} from epoch {} ({:.1}s)",
                state.stage,
                state.eps_current,
                state.stage_epoch,
                self.started.elapsed().as_secs_f64()
            );
        }
    }

    fn stage_finished(&mut self, state: &TrainState) {
        if !self.quiet {
            if let Some(row) = state.history.last() {
                eprintln!(
                    "stage {} done: epoch {} loss {:.4e} ({:.1}s)",
                    state.stage,
                    row.epoch,
                    row.total,
                    self.started.elapsed().as_secs_f64()
                );
            }
        }
    }
}

fn final_loss(state: &TrainState) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(row) = state.history.last() {
        out.insert("total".to_string(), row.total);
        for (name, v) in LossBreakdown::component_names(state.formulation).iter().zip(&row.components) {
            out.insert(name.to_string(), *v);
        }
    }
    out
}

/// Trains per `cfg` and writes `history.csv`, `grid_y.csv`, `grid_w.csv`,
/// `collocation.csv`, `checkpoint/`, `summary.json` and `timing.json`.
pub fn run_experiment(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let reference = Reference::for_run(cfg, opts.reference.as_deref())?;
    let target = cfg.problem(cfg.eps)?;
    let grid = EvalGrid::new(target.domain, cfg.output.grid[0], cfg.output.grid[1])?;
    let checkpoint_dir = dir.join("checkpoint");
    let (mut state, mut colloc) = if opts.resume {
        load_checkpoint(&checkpoint_dir)?
    } else {
        let first = cfg.problem(cfg.continuation.eps0)?;
        (initial_state(cfg)?, build_collocation(cfg, &first))
    };
    if state.formulation != cfg.formulation || state.params_y.layer_sizes() != cfg.network.layer_sizes() {
        return Err(Error::config("checkpoint does not match the configuration"));
    }
    let started = Instant::now();
    let start_epoch = state.epoch;
    let mut hooks = RunHooks {
        cfg,
        probe: ErrorProbe::new(grid, reference, cfg.beta),
        checkpoint_dir,
        quiet: opts.quiet,
        started,
    };
    let train_cfg = cfg.train_config(opts.threads > 1);
    let result = successive_train(&mut state, &mut colloc, &train_cfg, &mut hooks);
    let wall = started.elapsed().as_secs_f64();
    write_history(&state.history, &dir.join("history.csv"))?;
    result?;
    // Saved without the closing row of the last stage, which a resumed run
    // appends again when it finishes that stage.
    let mut resumable = state.clone();
    resumable.history.rows.pop();
    save_checkpoint(&hooks.checkpoint_dir, &resumable, &colloc)?;
    colloc.write_csv(&dir.join("collocation.csv"))?;

    let probe = &mut hooks.probe;
    let (vy, vw) = probe.net_values(&state)?;
    export_values(&vy, &probe.grid, &dir.join("grid_y.csv"))?;
    export_values(&vw, &probe.grid, &dir.join("grid_w.csv"))?;
    let errors = probe.errors(&state)?;
    let summary = RunSummary {
        benchmark: cfg.benchmark,
        formulation: cfg.formulation,
        eps: cfg.eps,
        beta: cfg.beta,
        seed: cfg.seed,
        stages: cfg.continuation.stages()?,
        epochs: state.epoch,
        n_interior: colloc.interior.len(),
        n_boundary: colloc.boundary.len(),
        n_params: state.params_y.len() + state.params_w.len(),
        final_loss: final_loss(&state),
        l1_y: errors.y,
        l1_p: errors.p,
        l1_u: errors.u,
    };
    let epochs_run = state.epoch - start_epoch;
    let timing = Timing {
        wall_seconds: wall,
        epochs_run,
        seconds_per_epoch: if epochs_run > 0 { wall / epochs_run as f64 } else { 0.0 },
        threads: opts.threads.max(1),
        kernels: kernel_name().to_string(),
    };
    write_json(&summary, &dir.join("summary.json"))?;
    write_json(&timing, &dir.join("timing.json"))?;
    Ok(RunOutcome { summary, timing, state, dir })
}

/// Writes the initial collocation set of a run for inspection.
pub fn sample_dump(cfg: &RunConfig, out: &Path) -> Result<CollocationSet> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec = cfg.problem(cfg.continuation.eps0)?;
    let set = build_collocation(cfg, &spec);
    set.write_csv(&out.join("collocation.csv"))?;
    Ok(set)
}
