//! Adam on the concatenated parameters of both networks, full-batch stage
//! training and the eps-continuation driver with residual-based refinement.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    loss_and_gradient, loss_value, refinement_scores, weight_at_epoch, CollocationData,
    Formulation, LossBreakdown, StageSchedule,
};
use crate::metrics_io::{read_history, read_manifest, write_history, write_manifest};
use crate::netcore::blob::{decode_blob, encode_blob, load_params, save_params};
use crate::netcore::{eval_net, EvalOptions, MlpParams, NetPair, TwoScaleConfig};
use crate::problems::ProblemSpec;
use crate::sampling::{rar_select, CollocationSet, RarConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Clears the moments and the step counter.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }
}

/// One Adam step over parameter segments laid end to end. Nothing is
/// modified when an error is returned.
pub fn adam_step(adam: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
    let n_params: usize = params.iter().map(|p| p.len()).sum();
    let n_grads: usize = grads.iter().map(|g| g.len()).sum();
    if params.len() != grads.len()
        || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        || n_params != adam.len()
    {
        return Err(Error::config(format!(
            "Adam state holds {} moments, parameters {n_params}, gradient {n_grads}",
            adam.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grads.iter().flat_map(|g| g.iter()).position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite gradient entry {i}"), None));
    }
    adam.t += 1;
    let t = adam.t.min(i32::MAX as u64) as i32;
    let (b1, b2) = (adam.beta1, adam.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let mut k = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        for (p, &g) in p.iter_mut().zip(g.iter()) {
            let m = &mut adam.m[k];
            let v = &mut adam.v[k];
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + adam.eps_hat);
            k += 1;
        }
    }
    Ok(())
}

/// `initial * decay^floor(t / step)`, never below `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub step: u64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 1e-3, decay: 0.9, step: 2000, floor: 1e-5 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::config(format!("lr.initial must be positive, got {}", self.initial)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("lr.decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.step == 0 {
            return Err(Error::config("lr.step must be at least 1"));
        }
        if !(self.floor > 0.0 && self.floor <= self.initial) {
            return Err(Error::config(format!(
                "lr.floor must lie in (0, initial], got {}",
                self.floor
            )));
        }
        Ok(())
    }

    pub fn at(&self, t: u64) -> f64 {
        let k = (t / self.step).min(i32::MAX as u64) as i32;
        (self.initial * self.decay.powi(k)).max(self.floor)
    }
}

/// The two loss weights: `(alpha_y, alpha_p)` or `(alpha_1, alpha_2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub first: StageSchedule,
    pub second: StageSchedule,
}

impl LossWeights {
    pub fn default_for(formulation: Formulation) -> Self {
        match formulation {
            Formulation::Optimality => LossWeights {
                first: StageSchedule::boundary_default(),
                second: StageSchedule::boundary_default(),
            },
            Formulation::Penalized => LossWeights {
                first: StageSchedule::residual_penalty_default(),
                second: StageSchedule::boundary_penalty_default(),
            },
        }
    }

    pub fn at(&self, epoch: u64) -> (f64, f64) {
        (weight_at_epoch(&self.first, epoch), weight_at_epoch(&self.second, epoch))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationConfig {
    pub eps0: f64,
    pub ell: f64,
    pub eps_target: f64,
    pub epochs_per_stage: u64,
}

impl ContinuationConfig {
    /// A single stage directly at `eps`.
    pub fn single(eps: f64, epochs: u64) -> Self {
        ContinuationConfig { eps0: eps, ell: 10.0, eps_target: eps, epochs_per_stage: epochs }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_target > 0.0 && self.eps_target.is_finite()) {
            return Err(Error::config(format!(
                "continuation target eps must be positive, got {}",
                self.eps_target
            )));
        }
        if !(self.eps0 >= self.eps_target && self.eps0.is_finite()) {
            return Err(Error::config(format!(
                "continuation needs eps_target <= eps0, got {} > {}",
                self.eps_target, self.eps0
            )));
        }
        if !(self.ell > 1.0 && self.ell.is_finite()) {
            return Err(Error::config(format!("continuation factor ell must exceed 1, got {}", self.ell)));
        }
        Ok(())
    }

    /// `eps_0, eps_1, ...` with `eps_{k+1} = max(eps_k / ell, eps_target)`,
    /// ending with a single stage at the target.
    pub fn stages(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let mut out = vec![self.eps0];
        let mut eps = self.eps0;
        while eps > self.eps_target {
            eps = (eps / self.ell).max(self.eps_target);
            out.push(eps);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: u64,
    pub eps: f64,
    pub total: f64,
    /// In the order of `LossBreakdown::component_names`.
    pub components: Vec<f64>,
    pub l1_y: Option<f64>,
    pub l1_w: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub formulation: Formulation,
    pub rows: Vec<HistoryRow>,
}

impl TrainingHistory {
    pub fn new(formulation: Formulation) -> Self {
        TrainingHistory { formulation, rows: Vec::new() }
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params_y: MlpParams,
    /// Adjoint network (optimality) or control network (penalized).
    pub params_w: MlpParams,
    pub cfg_y: TwoScaleConfig,
    pub cfg_w: TwoScaleConfig,
    pub adam: AdamState,
    /// Steps taken over the whole run.
    pub epoch: u64,
    pub stage: usize,
    /// Steps taken in the current stage.
    pub stage_epoch: u64,
    pub eps_current: f64,
    pub formulation: Formulation,
    pub history: TrainingHistory,
}

impl TrainState {
    pub fn new(
        formulation: Formulation,
        params_y: MlpParams,
        cfg_y: TwoScaleConfig,
        params_w: MlpParams,
        cfg_w: TwoScaleConfig,
        eps: f64,
    ) -> Result<Self> {
        for (name, p, c) in [("y", &params_y, &cfg_y), ("second", &params_w, &cfg_w)] {
            if p.input_dim() != c.feature_dim() {
                return Err(Error::config(format!(
                    "{name} network takes {} inputs but the two-scale map produces {}",
                    p.input_dim(),
                    c.feature_dim()
                )));
            }
            if *p.layer_sizes().last().unwrap() != 1 {
                return Err(Error::config(format!("{name} network must have a scalar output")));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {eps}")));
        }
        let n = params_y.len() + params_w.len();
        Ok(TrainState {
            params_y,
            params_w,
            cfg_y,
            cfg_w,
            adam: AdamState::new(n),
            epoch: 0,
            stage: 0,
            stage_epoch: 0,
            eps_current: eps,
            formulation,
            history: TrainingHistory::new(formulation),
        })
    }

    /// Both networks with the features evaluated at the current `eps`.
    pub fn nets(&self) -> NetPair<'_> {
        NetPair {
            params_y: &self.params_y,
            cfg_y: &self.cfg_y,
            params_w: &self.params_w,
            cfg_w: &self.cfg_w,
            eps: self.eps_current,
        }
    }
}

/// Callbacks invoked by the training loop.
pub trait TrainHooks {
    /// The problem solved at continuation level `eps`.
    fn problem(&mut self, eps: f64) -> Result<ProblemSpec>;

    /// `(L1(y), L1(w))` for the history, when a reference exists.
    fn errors(&mut self, _state: &TrainState) -> Result<Option<(f64, f64)>> {
        Ok(None)
    }

    fn checkpoint(&mut self, _state: &TrainState, _colloc: &CollocationSet) -> Result<()> {
        Ok(())
    }

    fn stage_started(&mut self, _state: &TrainState, _spec: &ProblemSpec) {}

    fn stage_finished(&mut self, _state: &TrainState) {}
}

/// Hooks that only supply the problem.
pub struct ProblemHooks<F>(pub F);

impl<F: FnMut(f64) -> Result<ProblemSpec>> TrainHooks for ProblemHooks<F> {
    fn problem(&mut self, eps: f64) -> Result<ProblemSpec> {
        (self.0)(eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub weights: LossWeights,
    pub lr: LrSchedule,
    pub log_every: u64,
    /// Stage epochs between checkpoints.
    pub checkpoint_every: Option<u64>,
    pub parallel: bool,
}

impl StageSettings {
    pub fn new(formulation: Formulation) -> Self {
        StageSettings {
            weights: LossWeights::default_for(formulation),
            lr: LrSchedule::default(),
            log_every: 100,
            checkpoint_every: None,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.log_every == 0 {
            return Err(Error::config("log_every must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    fn opts(&self) -> EvalOptions {
        EvalOptions { parallel: self.parallel }
    }
}

fn history_row(
    state: &TrainState,
    breakdown: &LossBreakdown,
    errors: Option<(f64, f64)>,
    lr: f64,
) -> HistoryRow {
    HistoryRow {
        epoch: state.epoch,
        eps: state.eps_current,
        total: breakdown.total(),
        components: breakdown.components(),
        l1_y: errors.map(|e| e.0),
        l1_w: errors.map(|e| e.1),
        lr,
    }
}

/// Runs `n_epochs` full-batch Adam steps on both networks at once, starting
/// from `state.stage_epoch`. Loss weights and learning rate follow the stage
/// epoch. A row is logged before the step whenever the stage epoch is a
/// multiple of `log_every`. On error the state of the last completed step is
/// kept.
pub fn train_stage(
    state: &mut TrainState,
    spec: &ProblemSpec,
    colloc: &CollocationSet,
    settings: &StageSettings,
    n_epochs: u64,
    hooks: &mut dyn TrainHooks,
) -> Result<()> {
    settings.validate()?;
    if n_epochs == 0 {
        return Ok(());
    }
    if spec.eps != state.eps_current {
        return Err(Error::config(format!(
            "problem eps {} differs from the training eps {}",
            spec.eps, state.eps_current
        )));
    }
    let data = CollocationData::new(spec, colloc)?;
    for _ in 0..n_epochs {
        let s = state.stage_epoch;
        let weights = settings.weights.at(s);
        let lr = settings.lr.at(s);
        let (breakdown, gy, gw) =
            loss_and_gradient(state.formulation, &data, &state.nets(), weights, settings.opts())?;
        let row = if s % settings.log_every == 0 {
            let errors = hooks.errors(state)?;
            Some(history_row(state, &breakdown, errors, lr))
        } else {
            None
        };
        {
            let TrainState { params_y, params_w, adam, .. } = &mut *state;
            let mut segments = [params_y.as_mut_slice(), params_w.as_mut_slice()];
            adam_step(adam, &mut segments, &[gy.as_slice(), gw.as_slice()], lr)?;
        }
        state.history.rows.extend(row);
        state.stage_epoch += 1;
        state.epoch += 1;
        if let Some(every) = settings.checkpoint_every {
            if state.stage_epoch % every == 0 {
                hooks.checkpoint(state, colloc)?;
            }
        }
    }
    Ok(())
}

/// Appends a row for the current parameters without stepping.
pub fn log_current(
    state: &mut TrainState,
    spec: &ProblemSpec,
    colloc: &CollocationSet,
    settings: &StageSettings,
    hooks: &mut dyn TrainHooks,
) -> Result<()> {
    let data = CollocationData::new(spec, colloc)?;
    let s = state.stage_epoch;
    let breakdown = loss_value(
        state.formulation,
        &data,
        &state.nets(),
        settings.weights.at(s),
        settings.opts(),
    )?;
    let errors = hooks.errors(state)?;
    let row = history_row(state, &breakdown, errors, settings.lr.at(s));
    state.history.rows.push(row);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub continuation: ContinuationConfig,
    pub rar: Option<RarConfig>,
    pub stage: StageSettings,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for `(stream, index)` derived from a run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

/// Seed of the refinement pool drawn at `(stage, stage_epoch)`.
pub fn rar_seed(seed: u64, stage: usize, stage_epoch: u64) -> u64 {
    derive_seed(seed, 1000 + stage as u64, stage_epoch)
}

fn refine(
    state: &TrainState,
    spec: &ProblemSpec,
    colloc: &mut CollocationSet,
    rar: &RarConfig,
    seed: u64,
) -> Result<()> {
    let nets = state.nets();
    let seed = rar_seed(seed, state.stage, state.stage_epoch);
    let added = rar_select(
        |pool| refinement_scores(state.formulation, spec, &nets, pool),
        &spec.domain,
        rar,
        seed,
    )?;
    colloc.add_interior(
        &added,
        format!(
            "rar: {} points at stage {} epoch {} (eps {})",
            added.len(),
            state.stage,
            state.stage_epoch,
            state.eps_current
        ),
    );
    Ok(())
}

/// Successive training over the continuation levels. Each stage trains
/// `epochs_per_stage` steps on the problem at `eps_k`; refinement runs every
/// `rar.period` stage epochs and after every stage except the last. The next
/// stage starts from the current parameters with fresh Adam moments.
///
/// A state restored from a checkpoint resumes where it stopped and produces
/// the same result as an uninterrupted run.
pub fn successive_train(
    state: &mut TrainState,
    colloc: &mut CollocationSet,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<()> {
    cfg.stage.validate()?;
    if let Some(rar) = &cfg.rar {
        rar.validate()?;
    }
    let stages = cfg.continuation.stages()?;
    let n = cfg.continuation.epochs_per_stage;
    if state.stage >= stages.len() || state.eps_current != stages[state.stage] {
        return Err(Error::config(format!(
            "state at stage {} with eps {} does not match the continuation levels {stages:?}",
            state.stage, state.eps_current
        )));
    }
    while state.stage < stages.len() {
        let spec = hooks.problem(state.eps_current)?;
        hooks.stage_started(state, &spec);
        loop {
            let s = state.stage_epoch;
            if s >= n {
                break;
            }
            let mut next = n;
            if let Some(rar) = &cfg.rar {
                if s > 0 && s % rar.period == 0 {
                    refine(state, &spec, colloc, rar, cfg.seed)?;
                }
                next = next.min((s / rar.period + 1) * rar.period);
            }
            train_stage(state, &spec, colloc, &cfg.stage, next - s, hooks)?;
        }
        log_current(state, &spec, colloc, &cfg.stage, hooks)?;
        hooks.stage_finished(state);
        if state.stage + 1 == stages.len() {
            break;
        }
        if let Some(rar) = &cfg.rar {
            refine(state, &spec, colloc, rar, cfg.seed)?;
        }
        state.stage += 1;
        state.stage_epoch = 0;
        state.eps_current = stages[state.stage];
        state.adam.reset();
    }
    Ok(())
}

/// `u = -p / beta` from the adjoint network.
pub fn recover_control(
    params_p: &MlpParams,
    cfg_p: &TwoScaleConfig,
    x: &[f64],
    eps: f64,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::config(format!("beta must be positive, got {beta}")));
    }
    Ok(-eval_net(params_p, cfg_p, x, eps)?.value / beta)
}

const CHECKPOINT_MAGIC: &str = "twoscale-ocp checkpoint";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes a checkpoint directory. The previous checkpoint at `dir` is only
/// replaced once the new one is complete.
pub fn save_checkpoint(dir: &Path, state: &TrainState, colloc: &CollocationSet) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::config(format!("bad checkpoint path {}", dir.display())))?;
    let tmp = dir.with_file_name(format!("{}.partial", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let a = &state.adam;
    write_manifest(
        &tmp.join("manifest.txt"),
        CHECKPOINT_MAGIC,
        &[
            ("formulation", state.formulation.name().to_string()),
            ("epoch", state.epoch.to_string()),
            ("stage", state.stage.to_string()),
            ("stage_epoch", state.stage_epoch.to_string()),
            ("eps_current", state.eps_current.to_string()),
            ("adam_t", a.t.to_string()),
            ("adam_beta1", a.beta1.to_string()),
            ("adam_beta2", a.beta2.to_string()),
            ("adam_eps_hat", a.eps_hat.to_string()),
            ("gamma_y", state.cfg_y.gamma.to_string()),
            ("center_y", join(&state.cfg_y.center)),
            ("gamma_w", state.cfg_w.gamma.to_string()),
            ("center_w", join(&state.cfg_w.center)),
        ],
    )?;
    save_params(&state.params_y, &tmp.join("params_y.bin"))?;
    save_params(&state.params_w, &tmp.join("params_w.bin"))?;
    for (file, data) in [("adam_m.bin", &a.m), ("adam_v.bin", &a.v)] {
        let path = tmp.join(file);
        fs::write(&path, encode_blob(&[("kind", file.trim_end_matches(".bin").into())], data))
            .map_err(|e| Error::io(&path, e))?;
    }
    colloc.write_csv(&tmp.join("collocation.csv"))?;
    write_history(&state.history, &tmp.join("history.csv"))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CollocationSet)> {
    let manifest_path = dir.join("manifest.txt");
    let m = read_manifest(&manifest_path, CHECKPOINT_MAGIC)?;
    let bad = |key: &str| Error::Load {
        path: manifest_path.clone(),
        line: 0,
        msg: format!("missing or invalid `{key}`"),
    };
    let get = |key: &str| m.get(key).map(String::as_str).ok_or_else(|| bad(key));
    let num = |key: &str| get(key)?.parse::<f64>().map_err(|_| bad(key));
    let int = |key: &str| get(key)?.parse::<u64>().map_err(|_| bad(key));
    let list = |key: &str| {
        get(key)?
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(key))
    };
    let formulation: Formulation = get("formulation")?.parse()?;
    let cfg_y = TwoScaleConfig::new(num("gamma_y")?, list("center_y")?)?;
    let cfg_w = TwoScaleConfig::new(num("gamma_w")?, list("center_w")?)?;
    let params_y = load_params(&dir.join("params_y.bin"))?;
    let params_w = load_params(&dir.join("params_w.bin"))?;
    let mut state = TrainState::new(formulation, params_y, cfg_y, params_w, cfg_w, num("eps_current")?)?;
    state.epoch = int("epoch")?;
    state.stage = int("stage")? as usize;
    state.stage_epoch = int("stage_epoch")?;
    let adam = &mut state.adam;
    adam.t = int("adam_t")?;
    adam.beta1 = num("adam_beta1")?;
    adam.beta2 = num("adam_beta2")?;
    adam.eps_hat = num("adam_eps_hat")?;
    for (file, target) in [("adam_m.bin", &mut adam.m), ("adam_v.bin", &mut adam.v)] {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (_, data) = decode_blob(&bytes, &path)?;
        if data.len() != target.len() {
            return Err(Error::Load {
                path,
                line: 0,
                msg: format!("expected {} moments, found {}", target.len(), data.len()),
            });
        }
        *target = data;
    }
    let history = read_history(&dir.join("history.csv"))?;
    if history.formulation != formulation {
        return Err(bad("formulation"));
    }
    state.history = history;
    let colloc = CollocationSet::read_csv(&dir.join("collocation.csv"))?;
    Ok((state, colloc))
}
