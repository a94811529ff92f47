//! Finite-difference checks of parameter gradients and input derivatives.

use serde::Serialize;

use super::config::RunConfig;
use crate::error::Result;
use crate::losses::{loss_and_gradient, loss_value, CollocationData, Formulation};
use crate::netcore::{eval_net, init_params, EvalOptions, MlpParams, NetPair, TwoScaleConfig};
use crate::problems::{ProblemSpec, RectDomain};
use crate::sampling::{sample_boundary, sample_interior, BoundaryDist, CollocationSet, InteriorMode};
use crate::training::derive_seed;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub n_params: usize,
    /// Normwise relative error of the parameter gradient, per formulation.
    pub loss_gradient: Vec<(Formulation, f64)>,
    pub input_gradient: f64,
    pub input_laplacian: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.loss_gradient
            .iter()
            .map(|e| e.1)
            .fold(self.input_gradient.max(self.input_laplacian), f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= GRADCHECK_TOLERANCE
    }
}

/// `max |a - b| / max |b|`.
pub fn normwise_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of the loss in every parameter of both networks.
#[allow(clippy::too_many_arguments)]
pub fn fd_loss_gradient(
    formulation: Formulation,
    data: &CollocationData,
    params_y: &MlpParams,
    cfg_y: &TwoScaleConfig,
    params_w: &MlpParams,
    cfg_w: &TwoScaleConfig,
    eps: f64,
    weights: (f64, f64),
    h: f64,
) -> Result<Vec<f64>> {
    let total = |py: &MlpParams, pw: &MlpParams| -> Result<f64> {
        let nets = NetPair { params_y: py, cfg_y, params_w: pw, cfg_w, eps };
        Ok(loss_value(formulation, data, &nets, weights, EvalOptions::default())?.total())
    };
    let mut out = Vec::with_capacity(params_y.len() + params_w.len());
    for which in 0..2 {
        let n = if which == 0 { params_y.len() } else { params_w.len() };
        for i in 0..n {
            let (mut py, mut pw) = (params_y.clone(), params_w.clone());
            let target = if which == 0 { &mut py } else { &mut pw };
            let x0 = target.as_slice()[i];
            let step = h * x0.abs().max(1.0);
            target.as_mut_slice()[i] = x0 + step;
            let plus = total(&py, &pw)?;
            let target = if which == 0 { &mut py } else { &mut pw };
            target.as_mut_slice()[i] = x0 - step;
            let minus = total(&py, &pw)?;
            out.push((plus - minus) / (2.0 * step));
        }
    }
    Ok(out)
}

/// Analytic and finite-difference gradients of the loss; `corrupt` perturbs
/// the analytic one (a negative control).
#[allow(clippy::too_many_arguments)]
pub fn loss_gradient_error(
    formulation: Formulation,
    data: &CollocationData,
    params_y: &MlpParams,
    cfg_y: &TwoScaleConfig,
    params_w: &MlpParams,
    cfg_w: &TwoScaleConfig,
    eps: f64,
    weights: (f64, f64),
    h: f64,
    corrupt: bool,
) -> Result<f64> {
    let nets = NetPair { params_y, cfg_y, params_w, cfg_w, eps };
    let (_, gy, gw) = loss_and_gradient(formulation, data, &nets, weights, EvalOptions::default())?;
    let mut analytic = gy.0;
    analytic.extend(gw.0);
    if corrupt {
        let k = analytic.len() / 2;
        analytic[k] += 1e-3 * analytic.iter().map(|g| g.abs()).fold(0.0, f64::max).max(1.0);
    }
    let fd = fd_loss_gradient(formulation, data, params_y, cfg_y, params_w, cfg_w, eps, weights, h)?;
    Ok(normwise_error(&analytic, &fd))
}

/// Errors of the spatial gradient and Laplacian against central differences
/// with a step matched to the two-scale stretch.
pub fn input_derivative_errors(params: &MlpParams, cfg: &TwoScaleConfig, eps: f64, points: &[[f64; 2]]) -> Result<(f64, f64)> {
    let h = 1e-3 / cfg.scale(eps)?.max(1.0);
    let value = |x: [f64; 2]| eval_net(params, cfg, &x, eps).map(|e| e.value);
    let (mut ga, mut gf, mut la, mut lf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &x in points {
        let e = eval_net(params, cfg, &x, eps)?;
        let v0 = e.value;
        let mut lap = 0.0;
        for k in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let (vp, vm) = (value(xp)?, value(xm)?);
            ga.push(e.grad[k]);
            gf.push((vp - vm) / (2.0 * h));
            lap += (vp - 2.0 * v0 + vm) / (h * h);
        }
        la.push(e.laplacian);
        lf.push(lap);
    }
    Ok((normwise_error(&ga, &gf), normwise_error(&la, &lf)))
}

/// Small networks and collocation sets for the configured problem.
pub fn gradcheck(cfg: &RunConfig, spec: &ProblemSpec, corrupt: bool) -> Result<GradcheckReport> {
    let sizes = [5, 6, 6, 1];
    let (cy, cw) = cfg.network.two_scale()?;
    let py = init_params(&sizes, derive_seed(cfg.seed, 11, 0))?;
    let pw = init_params(&sizes, derive_seed(cfg.seed, 12, 0))?;
    let domain: RectDomain = spec.domain;
    let colloc = CollocationSet::new(
        sample_interior(&domain, InteriorMode::UniformRandom, 12, 1, derive_seed(cfg.seed, 13, 0)),
        sample_boundary(&domain, 2, BoundaryDist::Uniform, derive_seed(cfg.seed, 14, 0)),
    );
    let data = CollocationData::new(spec, &colloc)?;
    let mut loss_gradient = Vec::new();
    for f in [Formulation::Optimality, Formulation::Penalized] {
        let err = loss_gradient_error(f, &data, &py, &cy, &pw, &cw, spec.eps, (10.0, 10.0), 1e-6, corrupt)?;
        loss_gradient.push((f, err));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 15, 0));
    let points: Vec<[f64; 2]> = (0..20)
        .map(|_| domain.map_unit(rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)))
        .collect();
    let (g1, l1) = input_derivative_errors(&py, &cy, spec.eps, &points)?;
    let (g2, l2) = input_derivative_errors(&pw, &cw, spec.eps, &points)?;
    Ok(GradcheckReport {
        eps: spec.eps,
        n_params: py.len() + pw.len(),
        loss_gradient,
        input_gradient: g1.max(g2),
        input_laplacian: l1.max(l2),
    })
}
