//! Batched evaluation of a two-scale network together with its spatial
//! derivatives, and reverse accumulation of parameter gradients through
//! those derivatives.
//!
//! Every point contributes `2 + d` columns to the activation matrices: the
//! value, one first-order tangent per axis and the Laplacian. Columns are
//! grouped in blocks of `n` (all values, then tangent `0` for all points,
//! ..., then all Laplacians). For a hidden layer with `a = tanh(z)`,
//!
//! ```text
//! a     = tanh(z)
//! a'_k  = s1 z'_k                          s1 = 1 - tanh^2
//! lap a = s2 sum_k z'_k^2 + s1 lap z       s2 = -2 tanh s1
//! ```
//!
//! and the two-scale input map is affine in `x`, so the input tangents are
//! `e_k + eps^gamma e_{d+k}` with zero Laplacian. The reverse pass
//! differentiates these recurrences once more (`s3 = d s2 / dz`).

use std::cell::RefCell;

use super::kernels::{activate_row, activate_row_backward, gemm_nn, gemm_nt, Strided};
use super::mlp::MlpParams;
use super::twoscale::TwoScaleConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Derivatives {
    ValueOnly,
    Full,
}

impl Derivatives {
    fn blocks(self, d: usize) -> usize {
        match self {
            Derivatives::ValueOnly => 1,
            Derivatives::Full => 2 + d,
        }
    }
}

/// Value, spatial gradient and Laplacian of a network at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct NetEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub laplacian: f64,
}

/// Borrowed view of one point of a [`BatchEval`].
#[derive(Debug, Clone, Copy)]
pub struct PointEval<'a> {
    pub value: f64,
    pub grad: &'a [f64],
    pub laplacian: f64,
}

impl PointEval<'_> {
    pub fn to_owned(&self) -> NetEval {
        NetEval {
            value: self.value,
            grad: self.grad.to_vec(),
            laplacian: self.laplacian,
        }
    }
}

impl NetEval {
    pub fn view(&self) -> PointEval<'_> {
        PointEval {
            value: self.value,
            grad: &self.grad,
            laplacian: self.laplacian,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchEval {
    pub n: usize,
    pub d: usize,
    pub value: Vec<f64>,
    /// Point-major, `grad[i * d + k]`; empty for value-only evaluation.
    pub grad: Vec<f64>,
    /// Empty for value-only evaluation.
    pub laplacian: Vec<f64>,
}

impl BatchEval {
    pub fn point(&self, i: usize) -> PointEval<'_> {
        if self.grad.is_empty() {
            PointEval {
                value: self.value[i],
                grad: &[],
                laplacian: 0.0,
            }
        } else {
            PointEval {
                value: self.value[i],
                grad: &self.grad[i * self.d..(i + 1) * self.d],
                laplacian: self.laplacian[i],
            }
        }
    }
}

/// Adjoint seeds of the network outputs, laid out like [`BatchEval`].
#[derive(Debug, Clone)]
pub struct Seeds {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub laplacian: Vec<f64>,
}

impl Seeds {
    pub fn zeros(n: usize, d: usize, derivs: Derivatives) -> Self {
        match derivs {
            Derivatives::ValueOnly => Seeds {
                value: vec![0.0; n],
                grad: Vec::new(),
                laplacian: Vec::new(),
            },
            Derivatives::Full => Seeds {
                value: vec![0.0; n],
                grad: vec![0.0; n * d],
                laplacian: vec![0.0; n],
            },
        }
    }
}

/// Intermediate activations kept for the reverse pass.
#[derive(Debug)]
pub struct Tape {
    derivs: Derivatives,
    n: usize,
    d: usize,
    /// Input of layer `l` (index `l - 1`), row-major over all column blocks.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layer `l` (index `l - 1`).
    pre: Vec<Vec<f64>>,
}

thread_local! {
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A recycled buffer of length `len` with unspecified contents.
fn take_buffer(len: usize) -> Vec<f64> {
    let mut v = POOL.with(|p| p.borrow_mut().pop()).unwrap_or_default();
    if v.len() < len {
        v.resize(len, 0.0);
    } else {
        v.truncate(len);
    }
    v
}

fn give_back(v: Vec<f64>) {
    POOL.with(|p| {
        let mut p = p.borrow_mut();
        if p.len() < 64 {
            p.push(v);
        }
    });
}

impl Drop for Tape {
    fn drop(&mut self) {
        for v in self.inputs.drain(..).chain(self.pre.drain(..)) {
            give_back(v);
        }
    }
}

pub fn forward_batch(
    params: &MlpParams,
    cfg: &TwoScaleConfig,
    points: &[f64],
    eps: f64,
    derivs: Derivatives,
) -> Result<(BatchEval, Tape)> {
    let d = cfg.dim();
    if params.input_dim() != cfg.feature_dim() {
        return Err(Error::config(format!(
            "network input width {} does not match two-scale feature width {}",
            params.input_dim(),
            cfg.feature_dim()
        )));
    }
    if !points.len().is_multiple_of(d) {
        return Err(Error::config(format!(
            "flat point buffer of length {} is not a multiple of dimension {d}",
            points.len()
        )));
    }
    let s = cfg.scale(eps)?;
    let n = points.len() / d;
    let nb = derivs.blocks(d);
    let m = n * nb;

    let full = derivs == Derivatives::Full;
    let mut a = take_buffer(cfg.feature_dim() * m);
    a.fill(0.0);
    for (i, x) in points.chunks_exact(d).enumerate() {
        for k in 0..d {
            a[k * m + i] = x[k];
            a[(d + k) * m + i] = s * (x[k] - cfg.center[k]);
        }
        a[2 * d * m + i] = s;
    }
    if full {
        for k in 0..d {
            let col0 = (1 + k) * n;
            a[k * m + col0..k * m + col0 + n].fill(1.0);
            a[(d + k) * m + col0..(d + k) * m + col0 + n].fill(s);
        }
    }

    let num_layers = params.num_layers();
    let sizes = params.layer_sizes();
    let flat = params.as_slice();
    let mut tape = Tape {
        derivs,
        n,
        d,
        inputs: Vec::with_capacity(num_layers),
        pre: Vec::with_capacity(num_layers.saturating_sub(1)),
    };
    for l in 1..=num_layers {
        let (rows, cols) = (sizes[l], sizes[l - 1]);
        let off = params.layer_offset(l);
        let w = Strided::row_major(&flat[off..off + rows * cols], rows, cols);
        let b = &flat[off + rows * cols..off + rows * cols + rows];
        let mut z = take_buffer(rows * m);
        gemm_nn(w, &a, m, &mut z, false);
        for (zr, bias) in z.chunks_exact_mut(m).zip(b) {
            zr[..n].iter_mut().for_each(|v| *v += bias);
        }
        let prev = std::mem::replace(&mut a, z);
        tape.inputs.push(prev);
        if l < num_layers {
            let mut act = take_buffer(rows * m);
            for (zr, ar) in a.chunks_exact(m).zip(act.chunks_exact_mut(m)) {
                activate_row(zr, ar, n, d, full);
            }
            let z = std::mem::replace(&mut a, act);
            tape.pre.push(z);
        }
    }

    let out = &a[..m];
    let value = out[..n].to_vec();
    let (grad, laplacian) = if full {
        let mut grad = vec![0.0; n * d];
        for k in 0..d {
            let tan = &out[(1 + k) * n..(2 + k) * n];
            for i in 0..n {
                grad[i * d + k] = tan[i];
            }
        }
        (grad, out[(1 + d) * n..(2 + d) * n].to_vec())
    } else {
        (Vec::new(), Vec::new())
    };
    give_back(a);
    Ok((
        BatchEval {
            n,
            d,
            value,
            grad,
            laplacian,
        },
        tape,
    ))
}

/// Accumulates `sum_i seeds_i . d(outputs_i)/d(theta)` into `grad_out`
/// (flat parameter layout).
pub fn backward_batch(params: &MlpParams, tape: &Tape, seeds: &Seeds, grad_out: &mut [f64]) {
    assert_eq!(grad_out.len(), params.len(), "gradient buffer length");
    let (n, d, derivs) = (tape.n, tape.d, tape.derivs);
    let full = derivs == Derivatives::Full;
    let m = n * derivs.blocks(d);
    let mut g = take_buffer(m);
    g.fill(0.0);
    g[..n].copy_from_slice(&seeds.value);
    if full {
        for k in 0..d {
            for i in 0..n {
                g[(1 + k) * n + i] = seeds.grad[i * d + k];
            }
        }
        g[(1 + d) * n..(2 + d) * n].copy_from_slice(&seeds.laplacian);
    }

    let num_layers = params.num_layers();
    let sizes = params.layer_sizes();
    let flat = params.as_slice();
    for l in (1..=num_layers).rev() {
        let (rows, cols) = (sizes[l], sizes[l - 1]);
        if l < num_layers {
            let z = &tape.pre[l - 1];
            let act = &tape.inputs[l];
            for r in 0..rows {
                let span = r * m..(r + 1) * m;
                activate_row_backward(&mut g[span.clone()], &z[span.clone()], &act[span], n, d, full);
            }
        }
        let off = params.layer_offset(l);
        let (wgrad, rest) = grad_out[off..].split_at_mut(rows * cols);
        gemm_nt(&g, rows, &tape.inputs[l - 1], cols, m, wgrad);
        for (bg, gr) in rest[..rows].iter_mut().zip(g.chunks_exact(m)) {
            *bg += gr[..n].iter().sum::<f64>();
        }
        if l > 1 {
            let w = Strided::transposed(&flat[off..off + rows * cols], rows, cols);
            let mut prev = take_buffer(cols * m);
            gemm_nn(w, &g, m, &mut prev, false);
            give_back(std::mem::replace(&mut g, prev));
        }
    }
    give_back(g);
}

/// Value, gradient and Laplacian of the network at a single point.
pub fn eval_net(params: &MlpParams, cfg: &TwoScaleConfig, x: &[f64], eps: f64) -> Result<NetEval> {
    if x.len() != cfg.dim() {
        return Err(Error::config(format!(
            "point has dimension {}, expected {}",
            x.len(),
            cfg.dim()
        )));
    }
    let (batch, _) = forward_batch(params, cfg, x, eps, Derivatives::Full)?;
    let out = batch.point(0).to_owned();
    if !(out.value.is_finite() && out.laplacian.is_finite() && out.grad.iter().all(|g| g.is_finite())) {
        return Err(Error::numeric("non-finite network evaluation", Some(0)));
    }
    Ok(out)
}

/// Network values only, at many points.
pub fn eval_values(params: &MlpParams, cfg: &TwoScaleConfig, points: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len() / cfg.dim().max(1));
    for chunk in points.chunks(cfg.dim() * 1024) {
        let (batch, _) = forward_batch(params, cfg, chunk, eps, Derivatives::ValueOnly)?;
        out.extend(batch.value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::mlp::{forward, init_params};
    use crate::netcore::twoscale::two_scale_features;

    fn linear_selecting(feature: usize) -> MlpParams {
        let mut data = vec![0.0; 6];
        data[feature] = 1.0;
        MlpParams::from_flat(&[5, 1], data).unwrap()
    }

    #[test]
    fn linear_feature_network_gets_stretch_factor() {
        let cfg = TwoScaleConfig::new(-1.0, vec![1.0, 1.0]).unwrap();
        let p = linear_selecting(2);
        let e = eval_net(&p, &cfg, &[0.3, 0.4], 0.01).unwrap();
        assert!((e.grad[0] - 100.0).abs() < 1e-10);
        assert_eq!(e.grad[1], 0.0);
        assert_eq!(e.laplacian, 0.0);
        // halving eps doubles the gradient exactly
        let h = eval_net(&p, &cfg, &[0.3, 0.4], 0.005).unwrap();
        assert_eq!(h.grad[0], 2.0 * e.grad[0]);
    }

    #[test]
    fn constant_network_has_zero_derivatives() {
        let cfg = TwoScaleConfig::new(-1.0, vec![0.0, 0.0]).unwrap();
        let p = MlpParams::zeros(&[5, 7, 7, 1]).unwrap();
        let e = eval_net(&p, &cfg, &[0.2, 0.9], 0.05).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.grad, vec![0.0, 0.0]);
        assert_eq!(e.laplacian, 0.0);
    }

    #[test]
    fn batch_matches_plain_forward() {
        let cfg = TwoScaleConfig::new(-0.5, vec![1.0, 0.5]).unwrap();
        let p = init_params(&[5, 6, 6, 1], 3).unwrap();
        let pts = [0.1, 0.2, 0.7, 0.3, 0.95, 0.99];
        let (b, _) = forward_batch(&p, &cfg, &pts, 0.03, Derivatives::Full).unwrap();
        for (i, x) in pts.chunks(2).enumerate() {
            let f = forward(&p, &two_scale_features(x, 0.03, &cfg).unwrap()).unwrap();
            assert!((b.value[i] - f).abs() < 1e-14);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cfg = TwoScaleConfig::new(-1.0, vec![1.0, 1.0]).unwrap();
        let p = init_params(&[5, 10, 10, 1], 11).unwrap();
        let x = [0.3, 0.7];
        let eps = 0.05;
        let e = eval_net(&p, &cfg, &x, eps).unwrap();
        let f = |x: [f64; 2]| forward(&p, &two_scale_features(&x, eps, &cfg).unwrap()).unwrap();
        let h = 1e-5;
        let mut lap = 0.0;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(xp) - f(xm)) / (2.0 * h);
            assert!((fd - e.grad[k]).abs() <= 1e-6 * e.grad[k].abs().max(1.0));
            let h2 = 1e-4;
            let mut xp = x;
            let mut xm = x;
            xp[k] += h2;
            xm[k] -= h2;
            lap += (f(xp) - 2.0 * f(x) + f(xm)) / (h2 * h2);
        }
        assert!((lap - e.laplacian).abs() <= 1e-5 * e.laplacian.abs().max(1.0), "{lap} vs {}", e.laplacian);
    }
}
