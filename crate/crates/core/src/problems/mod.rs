//! Optimal control problem instances: the state operator
//! `L y = -eps lap y + zeta . grad y + c y`, its formal adjoint
//! `L* p = -eps lap p - zeta . grad p + (c - div zeta) p`, and the data of
//! the tracking problem.

mod benchmarks;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netcore::PointEval;

pub use benchmarks::{
    default_centers, eta, eta_d1, eta_d2, exact_fields, exact_solution, make_benchmark,
    BenchmarkId, Eta,
};

pub type Point = [f64; 2];
pub type ScalarField = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;

pub fn constant_field(v: f64) -> ScalarField {
    Arc::new(move |_| v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectDomain {
    pub lower: Point,
    pub upper: Point,
}

impl RectDomain {
    pub fn new(lower: Point, upper: Point) -> Result<Self> {
        if !(upper[0] > lower[0] && upper[1] > lower[1]) {
            return Err(Error::config(format!(
                "domain upper corner {upper:?} must exceed lower corner {lower:?}"
            )));
        }
        Ok(RectDomain { lower, upper })
    }

    pub fn unit_square() -> Self {
        RectDomain {
            lower: [0.0, 0.0],
            upper: [1.0, 1.0],
        }
    }

    pub fn width(&self) -> f64 {
        self.upper[0] - self.lower[0]
    }

    pub fn height(&self) -> f64 {
        self.upper[1] - self.lower[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Maps unit-square coordinates onto the domain.
    pub fn map_unit(&self, s: f64, t: f64) -> Point {
        [
            self.lower[0] + s * self.width(),
            self.lower[1] + t * self.height(),
        ]
    }

    pub fn contains_open(&self, x: Point) -> bool {
        (0..2).all(|k| self.lower[k] < x[k] && x[k] < self.upper[k])
    }

    pub fn contains_closed(&self, x: Point) -> bool {
        (0..2).all(|k| self.lower[k] <= x[k] && x[k] <= self.upper[k])
    }
}

/// A convection field with its divergence supplied alongside.
#[derive(Clone)]
pub struct Convection {
    field: VectorField,
    divergence: ScalarField,
}

impl Convection {
    pub fn constant(v: [f64; 2]) -> Self {
        Convection {
            field: Arc::new(move |_| v),
            divergence: constant_field(0.0),
        }
    }

    pub fn new(field: VectorField, divergence: ScalarField) -> Self {
        Convection { field, divergence }
    }

    pub fn at(&self, x: Point) -> [f64; 2] {
        (self.field)(x)
    }

    pub fn div(&self, x: Point) -> f64 {
        (self.divergence)(x)
    }
}

/// A complete linear-quadratic optimal control instance.
#[derive(Clone)]
pub struct ProblemSpec {
    pub domain: RectDomain,
    pub eps: f64,
    pub zeta: Convection,
    pub c: ScalarField,
    pub f: ScalarField,
    pub y_d: ScalarField,
    pub beta: f64,
    /// Boundary trace of the state.
    pub g_y: ScalarField,
    /// Boundary trace of the adjoint.
    pub g_p: ScalarField,
    pub c0: f64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("domain", &self.domain)
            .field("eps", &self.eps)
            .field("beta", &self.beta)
            .field("c0", &self.c0)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// Homogeneous problem with constant coefficients and data.
    pub fn constant(
        domain: RectDomain,
        eps: f64,
        zeta: [f64; 2],
        c: f64,
        f: f64,
        y_d: f64,
        beta: f64,
    ) -> Result<Self> {
        let spec = ProblemSpec {
            domain,
            eps,
            zeta: Convection::constant(zeta),
            c: constant_field(c),
            f: constant_field(f),
            y_d: constant_field(y_d),
            beta,
            g_y: constant_field(0.0),
            g_p: constant_field(0.0),
            c0: (c).max(f64::MIN_POSITIVE),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps", self.eps), ("beta", self.beta), ("c0", self.c0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `c - div(zeta) / 2`, the coercivity margin at `x`.
    pub fn coercivity(&self, x: Point) -> f64 {
        (self.c)(x) - 0.5 * self.zeta.div(x)
    }
}

pub fn op_l(spec: &ProblemSpec, y: PointEval<'_>, x: Point) -> f64 {
    let z = spec.zeta.at(x);
    -spec.eps * y.laplacian + z[0] * y.grad[0] + z[1] * y.grad[1] + (spec.c)(x) * y.value
}

pub fn op_lstar(spec: &ProblemSpec, p: PointEval<'_>, x: Point) -> f64 {
    let z = spec.zeta.at(x);
    -spec.eps * p.laplacian - z[0] * p.grad[0] - z[1] * p.grad[1]
        + ((spec.c)(x) - spec.zeta.div(x)) * p.value
}

#[derive(Debug, Clone, PartialEq)]
pub struct WellposednessReport {
    pub passed: bool,
    /// Smallest observed `c - div(zeta)/2`.
    pub min_margin: f64,
    pub argmin: Point,
    pub c0: f64,
    pub n_samples: usize,
}

/// Radical inverse of `i` in base `b` (van der Corput).
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let mut inv = 1.0 / b as f64;
    let mut out = 0.0;
    while i > 0 {
        out += (i % b) as f64 * inv;
        i /= b;
        inv /= b as f64;
    }
    out
}

/// Checks `c - div(zeta)/2 >= c0` on a seeded-shift Halton point set.
pub fn check_wellposedness(spec: &ProblemSpec, n_samples: usize, seed: u64) -> WellposednessReport {
    let n_samples = n_samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 2] = [rng.random(), rng.random()];
    let mut min_margin = f64::INFINITY;
    let mut argmin = spec.domain.map_unit(0.5, 0.5);
    for i in 1..=n_samples as u64 {
        let mut s = (radical_inverse(i, 2) + shift[0]).fract();
        let mut t = (radical_inverse(i, 3) + shift[1]).fract();
        // keep strictly inside
        if s == 0.0 {
            s = 0.5;
        }
        if t == 0.0 {
            t = 0.5;
        }
        let x = spec.domain.map_unit(s, t);
        let m = spec.coercivity(x);
        if m < min_margin || m.is_nan() {
            min_margin = m;
            argmin = x;
        }
    }
    WellposednessReport {
        passed: min_margin >= spec.c0,
        min_margin,
        argmin,
        c0: spec.c0,
        n_samples,
    }
}
