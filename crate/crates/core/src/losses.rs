//! Residuals of the optimality system and the two training losses:
//!
//! * optimality-system loss `R_state + R_adj + B_y + B_p`, trained on the
//!   state/adjoint pair `(y, p)`;
//! * penalized loss `T + a1 R_pen + a2 B_y`, trained on the state/control
//!   pair `(y, u)`.
//!
//! Boundary terms penalize `|net - g|^2` with the traces `g` of the problem,
//! which reduces to `|net|^2` for homogeneous data. With no boundary points
//! the boundary terms are zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{
    forward_batch, loss_components, loss_param_gradient, Components, Derivatives, EvalOptions,
    FlatGradient, MlpParams, NetEval, NetPair, PointEval, PointGroup, PointwiseLoss, Seed,
    TwoScaleConfig, CHUNK_POINTS,
};
use crate::problems::{op_l, op_lstar, Point, ProblemSpec};
use crate::sampling::CollocationSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// Networks for `(y, p)`.
    Optimality,
    /// Networks for `(y, u)`.
    Penalized,
}

impl Formulation {
    pub fn name(self) -> &'static str {
        match self {
            Formulation::Optimality => "optimality",
            Formulation::Penalized => "penalized",
        }
    }

    /// Name of the variable carried by the second network.
    pub fn second_variable(self) -> &'static str {
        match self {
            Formulation::Optimality => "p",
            Formulation::Penalized => "u",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimality" => Ok(Formulation::Optimality),
            "penalized" => Ok(Formulation::Penalized),
            _ => Err(Error::config(format!(
                "unknown formulation `{s}` (expected optimality or penalized)"
            ))),
        }
    }
}

/// Piecewise-constant weight: `values[i]` on `[breakpoints[i-1], breakpoints[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    breakpoints: Vec<u64>,
    values: Vec<f64>,
}

impl StageSchedule {
    pub fn new(breakpoints: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != breakpoints.len() + 1 {
            return Err(Error::config(format!(
                "a schedule with {} breakpoints needs {} values, got {}",
                breakpoints.len(),
                breakpoints.len() + 1,
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "schedule breakpoints must be strictly ascending, got {breakpoints:?}"
            )));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("schedule values must be positive, got {values:?}")));
        }
        Ok(StageSchedule { breakpoints, values })
    }

    pub fn constant(value: f64) -> Result<Self> {
        StageSchedule::new(Vec::new(), vec![value])
    }

    pub fn breakpoints(&self) -> &[u64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `alpha_y = alpha_p`: 1000, 5000, 10000 switching at epochs 10000 and 30000.
    pub fn boundary_default() -> Self {
        StageSchedule::new(vec![10_000, 30_000], vec![1000.0, 5000.0, 10_000.0]).unwrap()
    }

    /// `alpha_1`: 100, 500, 1000.
    pub fn residual_penalty_default() -> Self {
        StageSchedule::new(vec![10_000, 30_000], vec![100.0, 500.0, 1000.0]).unwrap()
    }

    /// `alpha_2`: 1000, 5000, 10000.
    pub fn boundary_penalty_default() -> Self {
        Self::boundary_default()
    }
}

pub fn weight_at_epoch(s: &StageSchedule, epoch: u64) -> f64 {
    let idx = s.breakpoints.partition_point(|&b| b <= epoch);
    s.values[idx]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalityBreakdown {
    pub r_state: f64,
    pub r_adj: f64,
    /// Includes the weight `alpha_y`.
    pub b_y: f64,
    /// Includes the weight `alpha_p`.
    pub b_p: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenalizedBreakdown {
    pub tracking: f64,
    /// Unweighted mean squared state residual.
    pub r_pen: f64,
    /// Unweighted mean squared boundary mismatch.
    pub b_y: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "formulation", rename_all = "lowercase")]
pub enum LossBreakdown {
    Optimality(OptimalityBreakdown),
    Penalized(PenalizedBreakdown),
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        match self {
            LossBreakdown::Optimality(b) => b.total,
            LossBreakdown::Penalized(b) => b.total,
        }
    }

    pub fn component_names(formulation: Formulation) -> &'static [&'static str] {
        match formulation {
            Formulation::Optimality => &["r_state", "r_adj", "b_y", "b_p"],
            Formulation::Penalized => &["tracking", "r_pen", "b_y"],
        }
    }

    pub fn components(&self) -> Vec<f64> {
        match self {
            LossBreakdown::Optimality(b) => vec![b.r_state, b.r_adj, b.b_y, b.b_p],
            LossBreakdown::Penalized(b) => vec![b.tracking, b.r_pen, b.b_y],
        }
    }
}

/// `L y + p / beta - f` at `x`.
pub fn residual_state(x: Point, y: PointEval<'_>, p_value: f64, spec: &ProblemSpec) -> f64 {
    op_l(spec, y, x) + p_value / spec.beta - (spec.f)(x)
}

/// `L* p - y + y_d` at `x`.
pub fn residual_adjoint(x: Point, p: PointEval<'_>, y_value: f64, spec: &ProblemSpec) -> f64 {
    op_lstar(spec, p, x) - y_value + (spec.y_d)(x)
}

/// `L y - u - f` at `x`.
pub fn residual_penalized(x: Point, y: PointEval<'_>, u_value: f64, spec: &ProblemSpec) -> f64 {
    op_l(spec, y, x) - u_value - (spec.f)(x)
}

/// Problem data sampled at the collocation points, reused across epochs.
#[derive(Debug, Clone)]
pub struct CollocationData {
    pub interior: Vec<f64>,
    pub boundary: Vec<f64>,
    eps: f64,
    beta: f64,
    zeta: Vec<[f64; 2]>,
    c: Vec<f64>,
    div: Vec<f64>,
    f: Vec<f64>,
    y_d: Vec<f64>,
    g_y: Vec<f64>,
    g_p: Vec<f64>,
}

impl CollocationData {
    pub fn new(spec: &ProblemSpec, colloc: &CollocationSet) -> Result<Self> {
        if colloc.interior.is_empty() {
            return Err(Error::config("collocation set has no interior points"));
        }
        let int = &colloc.interior;
        let data = CollocationData {
            interior: colloc.interior_flat(),
            boundary: colloc.boundary_flat(),
            eps: spec.eps,
            beta: spec.beta,
            zeta: int.iter().map(|&x| spec.zeta.at(x)).collect(),
            c: int.iter().map(|&x| (spec.c)(x)).collect(),
            div: int.iter().map(|&x| spec.zeta.div(x)).collect(),
            f: int.iter().map(|&x| (spec.f)(x)).collect(),
            y_d: int.iter().map(|&x| (spec.y_d)(x)).collect(),
            g_y: colloc.boundary.iter().map(|b| (spec.g_y)(b.x)).collect(),
            g_p: colloc.boundary.iter().map(|b| (spec.g_p)(b.x)).collect(),
        };
        let bad = |v: &[f64]| v.iter().position(|x| !x.is_finite());
        for field in [&data.c, &data.div, &data.f, &data.y_d] {
            if let Some(i) = bad(field) {
                return Err(Error::numeric("non-finite problem data", Some(i)));
            }
        }
        for field in [&data.g_y, &data.g_p] {
            if let Some(i) = bad(field) {
                return Err(Error::numeric("non-finite boundary data", Some(int.len() + i)));
            }
        }
        Ok(data)
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len() / 2
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary.len() / 2
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

const INTERIOR: usize = 0;

/// The optimality-system loss as a sum of pointwise terms.
pub struct OptimalityLoss<'a> {
    pub data: &'a CollocationData,
    pub alpha_y: f64,
    pub alpha_p: f64,
}

impl PointwiseLoss for OptimalityLoss<'_> {
    fn groups(&self) -> Vec<PointGroup<'_>> {
        vec![
            PointGroup {
                points: &self.data.interior,
                y: Some(Derivatives::Full),
                w: Some(Derivatives::Full),
            },
            PointGroup {
                points: &self.data.boundary,
                y: Some(Derivatives::ValueOnly),
                w: Some(Derivatives::ValueOnly),
            },
        ]
    }

    fn term(&self, group: usize, i: usize, y: Option<PointEval<'_>>, w: Option<PointEval<'_>>, sy: Seed<'_>, sw: Seed<'_>) -> Components {
        let d = self.data;
        let (y, p) = (y.unwrap(), w.unwrap());
        if group == INTERIOR {
            let inv_n = 1.0 / d.n_interior() as f64;
            let z = d.zeta[i];
            let r_s = -d.eps * y.laplacian + z[0] * y.grad[0] + z[1] * y.grad[1] + d.c[i] * y.value
                + p.value / d.beta
                - d.f[i];
            let r_a = -d.eps * p.laplacian - z[0] * p.grad[0] - z[1] * p.grad[1]
                + (d.c[i] - d.div[i]) * p.value
                - y.value
                + d.y_d[i];
            let (ks, ka) = (2.0 * r_s * inv_n, 2.0 * r_a * inv_n);
            *sy.value += ks * d.c[i] - ka;
            sy.grad[0] += ks * z[0];
            sy.grad[1] += ks * z[1];
            *sy.laplacian += -ks * d.eps;
            *sw.value += ks / d.beta + ka * (d.c[i] - d.div[i]);
            sw.grad[0] -= ka * z[0];
            sw.grad[1] -= ka * z[1];
            *sw.laplacian += -ka * d.eps;
            [r_s * r_s * inv_n, r_a * r_a * inv_n, 0.0, 0.0]
        } else {
            let inv_n = 1.0 / d.n_boundary() as f64;
            let (ey, ep) = (y.value - d.g_y[i], p.value - d.g_p[i]);
            *sy.value += 2.0 * self.alpha_y * ey * inv_n;
            *sw.value += 2.0 * self.alpha_p * ep * inv_n;
            [0.0, 0.0, self.alpha_y * ey * ey * inv_n, self.alpha_p * ep * ep * inv_n]
        }
    }
}

impl OptimalityLoss<'_> {
    pub fn breakdown(c: Components) -> OptimalityBreakdown {
        OptimalityBreakdown {
            r_state: c[0],
            r_adj: c[1],
            b_y: c[2],
            b_p: c[3],
            total: c.iter().sum(),
        }
    }
}

/// The penalized loss as a sum of pointwise terms.
pub struct PenalizedLoss<'a> {
    pub data: &'a CollocationData,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl PointwiseLoss for PenalizedLoss<'_> {
    fn groups(&self) -> Vec<PointGroup<'_>> {
        vec![
            PointGroup {
                points: &self.data.interior,
                y: Some(Derivatives::Full),
                w: Some(Derivatives::ValueOnly),
            },
            PointGroup {
                points: &self.data.boundary,
                y: Some(Derivatives::ValueOnly),
                w: None,
            },
        ]
    }

    fn term(&self, group: usize, i: usize, y: Option<PointEval<'_>>, w: Option<PointEval<'_>>, sy: Seed<'_>, sw: Seed<'_>) -> Components {
        let d = self.data;
        let y = y.unwrap();
        if group == INTERIOR {
            let u = w.unwrap().value;
            let inv_n = 1.0 / d.n_interior() as f64;
            let z = d.zeta[i];
            let ey = y.value - d.y_d[i];
            let r = -d.eps * y.laplacian + z[0] * y.grad[0] + z[1] * y.grad[1] + d.c[i] * y.value
                - u
                - d.f[i];
            let kr = 2.0 * self.alpha1 * r * inv_n;
            *sy.value += ey * inv_n + kr * d.c[i];
            sy.grad[0] += kr * z[0];
            sy.grad[1] += kr * z[1];
            *sy.laplacian += -kr * d.eps;
            *sw.value += d.beta * u * inv_n - kr;
            [
                0.5 * (ey * ey + d.beta * u * u) * inv_n,
                self.alpha1 * r * r * inv_n,
                0.0,
                0.0,
            ]
        } else {
            let inv_n = 1.0 / d.n_boundary() as f64;
            let e = y.value - d.g_y[i];
            *sy.value += 2.0 * self.alpha2 * e * inv_n;
            [0.0, 0.0, self.alpha2 * e * e * inv_n, 0.0]
        }
    }
}

impl PenalizedLoss<'_> {
    pub fn breakdown(&self, c: Components) -> PenalizedBreakdown {
        PenalizedBreakdown {
            tracking: c[0],
            r_pen: c[1] / self.alpha1,
            b_y: c[2] / self.alpha2,
            total: c[0] + c[1] + c[2],
        }
    }
}

/// Evaluates a pointwise loss on prescribed fields instead of networks.
/// Used to check losses against closed-form solutions.
pub fn components_from_fields<L, Y, W>(loss: &L, y: Y, w: W) -> Components
where
    L: PointwiseLoss,
    Y: Fn(Point) -> NetEval,
    W: Fn(Point) -> NetEval,
{
    let mut total = [0.0; 4];
    let (mut v, mut lap) = ([0.0; 2], [0.0; 2]);
    let mut g = [[0.0; 2]; 2];
    for (gi, group) in loss.groups().iter().enumerate() {
        for (i, x) in group.points.chunks_exact(2).enumerate() {
            let x = [x[0], x[1]];
            let (ye, we) = (y(x), w(x));
            let [gy, gw] = &mut g;
            let [vy, vw] = &mut v;
            let [ly, lw] = &mut lap;
            let c = loss.term(
                gi,
                i,
                group.y.map(|_| ye.view()),
                group.w.map(|_| we.view()),
                Seed { value: vy, grad: gy, laplacian: ly },
                Seed { value: vw, grad: gw, laplacian: lw },
            );
            for (a, b) in total.iter_mut().zip(c) {
                *a += b;
            }
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
pub fn loss_optimality(
    py: &MlpParams,
    pp: &MlpParams,
    cfg_y: &TwoScaleConfig,
    cfg_p: &TwoScaleConfig,
    colloc: &CollocationSet,
    spec: &ProblemSpec,
    alpha_y: f64,
    alpha_p: f64,
) -> Result<OptimalityBreakdown> {
    let data = CollocationData::new(spec, colloc)?;
    let loss = OptimalityLoss { data: &data, alpha_y, alpha_p };
    let nets = NetPair { params_y: py, cfg_y, params_w: pp, cfg_w: cfg_p, eps: spec.eps };
    Ok(OptimalityLoss::breakdown(loss_components(&loss, &nets, EvalOptions::default())?))
}

#[allow(clippy::too_many_arguments)]
pub fn loss_penalized(
    py: &MlpParams,
    pu: &MlpParams,
    cfg_y: &TwoScaleConfig,
    cfg_u: &TwoScaleConfig,
    colloc: &CollocationSet,
    spec: &ProblemSpec,
    alpha1: f64,
    alpha2: f64,
) -> Result<PenalizedBreakdown> {
    let data = CollocationData::new(spec, colloc)?;
    let loss = PenalizedLoss { data: &data, alpha1, alpha2 };
    let nets = NetPair { params_y: py, cfg_y, params_w: pu, cfg_w: cfg_u, eps: spec.eps };
    Ok(loss.breakdown(loss_components(&loss, &nets, EvalOptions::default())?))
}

/// Breakdown plus exact gradients for either formulation.
pub fn loss_and_gradient(
    formulation: Formulation,
    data: &CollocationData,
    nets: &NetPair<'_>,
    weights: (f64, f64),
    opts: EvalOptions,
) -> Result<(LossBreakdown, FlatGradient, FlatGradient)> {
    match formulation {
        Formulation::Optimality => {
            let loss = OptimalityLoss { data, alpha_y: weights.0, alpha_p: weights.1 };
            let g = loss_param_gradient(&loss, nets, opts)?;
            Ok((LossBreakdown::Optimality(OptimalityLoss::breakdown(g.components)), g.grad_y, g.grad_w))
        }
        Formulation::Penalized => {
            let loss = PenalizedLoss { data, alpha1: weights.0, alpha2: weights.1 };
            let g = loss_param_gradient(&loss, nets, opts)?;
            Ok((LossBreakdown::Penalized(loss.breakdown(g.components)), g.grad_y, g.grad_w))
        }
    }
}

pub fn loss_value(
    formulation: Formulation,
    data: &CollocationData,
    nets: &NetPair<'_>,
    weights: (f64, f64),
    opts: EvalOptions,
) -> Result<LossBreakdown> {
    match formulation {
        Formulation::Optimality => {
            let loss = OptimalityLoss { data, alpha_y: weights.0, alpha_p: weights.1 };
            Ok(LossBreakdown::Optimality(OptimalityLoss::breakdown(loss_components(&loss, nets, opts)?)))
        }
        Formulation::Penalized => {
            let loss = PenalizedLoss { data, alpha1: weights.0, alpha2: weights.1 };
            Ok(LossBreakdown::Penalized(loss.breakdown(loss_components(&loss, nets, opts)?)))
        }
    }
}

/// RAR score at each point: `max(|R_state|, |R_adj|)` for the optimality
/// system, `|R_pen|` for the penalized loss.
pub fn refinement_scores(
    formulation: Formulation,
    spec: &ProblemSpec,
    nets: &NetPair<'_>,
    points: &[Point],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(CHUNK_POINTS) {
        let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
        let (y, _) = forward_batch(nets.params_y, nets.cfg_y, &flat, nets.eps, Derivatives::Full)?;
        let w_derivs = match formulation {
            Formulation::Optimality => Derivatives::Full,
            Formulation::Penalized => Derivatives::ValueOnly,
        };
        let (w, _) = forward_batch(nets.params_w, nets.cfg_w, &flat, nets.eps, w_derivs)?;
        for (i, &x) in chunk.iter().enumerate() {
            let (ye, we) = (y.point(i), w.point(i));
            let score = match formulation {
                Formulation::Optimality => residual_state(x, ye, we.value, spec)
                    .abs()
                    .max(residual_adjoint(x, we, ye.value, spec).abs()),
                Formulation::Penalized => residual_penalized(x, ye, we.value, spec).abs(),
            };
            out.push(score);
        }
    }
    Ok(out)
}
