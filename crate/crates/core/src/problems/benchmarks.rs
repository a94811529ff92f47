use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{constant_field, Convection, Point, ProblemSpec, RectDomain};
use crate::error::{Error, Result};
use crate::netcore::NetEval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkId {
    /// Exponential boundary layers, `zeta = (sqrt2/2, sqrt2/2)`.
    ExpBoundaryLayer,
    /// Interior layer along `x2 = 1/2`, `zeta = (1, 0)`.
    InteriorLayer,
    /// Exponential and parabolic layers, `f = y_d = 1`; no closed form.
    ParabolicLayers,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 3] = [
        BenchmarkId::ExpBoundaryLayer,
        BenchmarkId::InteriorLayer,
        BenchmarkId::ParabolicLayers,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkId::ExpBoundaryLayer => "exp-boundary-layer",
            BenchmarkId::InteriorLayer => "interior-layer",
            BenchmarkId::ParabolicLayers => "parabolic-layers",
        }
    }

    pub fn has_exact_solution(self) -> bool {
        !matches!(self, BenchmarkId::ParabolicLayers)
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchmarkId::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown benchmark `{s}` (expected exp-boundary-layer, interior-layer or parabolic-layers)"
                ))
            })
    }
}

/// `eta(z) = z^3 - (e^{(z-1)/eps} - e^{-1/eps}) / (1 - e^{-1/eps})` and its
/// first two derivatives.
///
/// Only `exp` of `(z - 1)/eps` and `-1/eps` is formed, both nonpositive for
/// `z <= 1`, so nothing overflows for small `eps`.
#[derive(Debug, Clone, Copy)]
pub struct Eta {
    eps: f64,
    tail: f64,
    denom: f64,
}

impl Eta {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::domain(format!("eta needs eps > 0, got {eps}")));
        }
        let tail = (-1.0 / eps).exp();
        Ok(Eta {
            eps,
            tail,
            denom: 1.0 - tail,
        })
    }

    fn layer(&self, z: f64) -> f64 {
        ((z - 1.0) / self.eps).exp()
    }

    pub fn value(&self, z: f64) -> f64 {
        z * z * z - (self.layer(z) - self.tail) / self.denom
    }

    pub fn d1(&self, z: f64) -> f64 {
        3.0 * z * z - self.layer(z) / (self.eps * self.denom)
    }

    pub fn d2(&self, z: f64) -> f64 {
        6.0 * z - self.layer(z) / (self.eps * self.eps * self.denom)
    }
}

pub fn eta(z: f64, eps: f64) -> Result<f64> {
    Ok(Eta::new(eps)?.value(z))
}

pub fn eta_d1(z: f64, eps: f64) -> Result<f64> {
    Ok(Eta::new(eps)?.d1(z))
}

pub fn eta_d2(z: f64, eps: f64) -> Result<f64> {
    Ok(Eta::new(eps)?.d2(z))
}

fn field(value: f64, grad: [f64; 2], laplacian: f64) -> NetEval {
    NetEval {
        value,
        grad: grad.to_vec(),
        laplacian,
    }
}

/// Exact state and adjoint with their gradients and Laplacians, where a
/// closed form exists.
pub fn exact_fields(id: BenchmarkId, x: Point, eps: f64) -> Option<(NetEval, NetEval)> {
    let [x1, x2] = x;
    match id {
        BenchmarkId::ExpBoundaryLayer => {
            let e = Eta::new(eps).ok()?;
            let (a, a1, a2) = (e.value(x1), e.d1(x1), e.d2(x1));
            let (b, b1, b2) = (e.value(x2), e.d1(x2), e.d2(x2));
            let y = field(a * b, [a1 * b, a * b1], a2 * b + a * b2);
            let (r1, s1) = (1.0 - x1, 1.0 - x2);
            let (c, c1, c2) = (e.value(r1), e.d1(r1), e.d2(r1));
            let (d, d1, d2) = (e.value(s1), e.d1(s1), e.d2(s1));
            let p = field(c * d, [-c1 * d, -c * d1], c2 * d + c * d2);
            Some((y, p))
        }
        BenchmarkId::InteriorLayer => {
            if !(eps > 0.0) {
                return None;
            }
            let q = (x2 - 0.5) / eps;
            let at = q.atan();
            let one = 1.0 - x1;
            let cube = one * one * one;
            let dq = 1.0 / (eps * (1.0 + q * q));
            let ddq = -2.0 * q / (eps * eps * (1.0 + q * q) * (1.0 + q * q));
            let y = field(
                cube * at,
                [-3.0 * one * one * at, cube * dq],
                6.0 * one * at + cube * ddq,
            );
            let (u, v) = (x1 * (1.0 - x1), x2 * (1.0 - x2));
            let p = field(
                u * v,
                [(1.0 - 2.0 * x1) * v, u * (1.0 - 2.0 * x2)],
                -2.0 * v - 2.0 * u,
            );
            Some((y, p))
        }
        BenchmarkId::ParabolicLayers => None,
    }
}

/// Exact `(y, p)` at `x`, or `None` for the parabolic-layer benchmark.
pub fn exact_solution(id: BenchmarkId, x: Point, eps: f64) -> Option<(f64, f64)> {
    exact_fields(id, x, eps).map(|(y, p)| (y.value, p.value))
}

/// Centers of the state and second network: the state's at the outflow,
/// the adjoint/control's at the inflow.
pub fn default_centers(id: BenchmarkId) -> (Point, Point) {
    match id {
        BenchmarkId::ExpBoundaryLayer => ([1.0, 1.0], [0.0, 0.0]),
        BenchmarkId::InteriorLayer | BenchmarkId::ParabolicLayers => ([1.0, 0.5], [0.0, 0.5]),
    }
}

/// Builds a benchmark instance. With an exact pair `(y*, p*)`, the data are
/// manufactured as `f = L y* + p*/beta`, `y_d = y* - L* p*` and the boundary
/// traces are those of `y*` and `p*`.
pub fn make_benchmark(id: BenchmarkId, eps: f64, beta: f64) -> Result<ProblemSpec> {
    if !(eps > 0.0) {
        return Err(Error::domain(format!("eps must be positive, got {eps}")));
    }
    if !(beta > 0.0) {
        return Err(Error::config(format!("beta must be positive, got {beta}")));
    }
    let zeta = match id {
        BenchmarkId::ExpBoundaryLayer => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            [h, h]
        }
        BenchmarkId::InteriorLayer | BenchmarkId::ParabolicLayers => [1.0, 0.0],
    };
    let c = 1.0;
    let spec = match id {
        BenchmarkId::ParabolicLayers => ProblemSpec {
            domain: RectDomain::unit_square(),
            eps,
            zeta: Convection::constant(zeta),
            c: constant_field(c),
            f: constant_field(1.0),
            y_d: constant_field(1.0),
            beta,
            g_y: constant_field(0.0),
            g_p: constant_field(0.0),
            c0: 1.0,
        },
        _ => {
            let exact = move |x: Point| exact_fields(id, x, eps).expect("closed form exists");
            let f = move |x: Point| {
                let (y, p) = exact(x);
                -eps * y.laplacian + zeta[0] * y.grad[0] + zeta[1] * y.grad[1] + c * y.value
                    + p.value / beta
            };
            let y_d = move |x: Point| {
                let (y, p) = exact(x);
                let lstar_p =
                    -eps * p.laplacian - zeta[0] * p.grad[0] - zeta[1] * p.grad[1] + c * p.value;
                y.value - lstar_p
            };
            ProblemSpec {
                domain: RectDomain::unit_square(),
                eps,
                zeta: Convection::constant(zeta),
                c: constant_field(c),
                f: Arc::new(f),
                y_d: Arc::new(y_d),
                beta,
                g_y: Arc::new(move |x| exact_solution(id, x, eps).unwrap().0),
                g_p: Arc::new(move |x| exact_solution(id, x, eps).unwrap().1),
                c0: 1.0,
            }
        }
    };
    spec.validate()?;
    Ok(spec)
}
