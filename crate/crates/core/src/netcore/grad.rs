//! Exact parameter gradients of losses that are sums of pointwise terms in
//! the outputs (and spatial derivatives) of two networks.

use rayon::prelude::*;

use super::batch::{backward_batch, forward_batch, BatchEval, Derivatives, PointEval, Seeds};
use super::mlp::MlpParams;
use super::twoscale::TwoScaleConfig;
use crate::error::{Error, Result};

/// Points are processed in fixed-size chunks and the per-chunk partial sums
/// are reduced in chunk order, so results do not depend on thread count.
pub const CHUNK_POINTS: usize = 256;

/// Flat gradient in the [`MlpParams`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient(pub Vec<f64>);

impl FlatGradient {
    pub fn zeros(len: usize) -> Self {
        FlatGradient(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// The two networks a coupled loss depends on, at one value of `eps`.
#[derive(Debug, Clone, Copy)]
pub struct NetPair<'a> {
    pub params_y: &'a MlpParams,
    pub cfg_y: &'a TwoScaleConfig,
    pub params_w: &'a MlpParams,
    pub cfg_w: &'a TwoScaleConfig,
    pub eps: f64,
}

/// A set of points sharing which network outputs they need.
#[derive(Debug, Clone, Copy)]
pub struct PointGroup<'a> {
    /// Flat, point-major coordinates.
    pub points: &'a [f64],
    pub y: Option<Derivatives>,
    pub w: Option<Derivatives>,
}

/// Mutable adjoint of one network's outputs at one point.
pub struct Seed<'a> {
    pub value: &'a mut f64,
    pub grad: &'a mut [f64],
    pub laplacian: &'a mut f64,
}

/// Up to four named loss components, summed over points.
pub type Components = [f64; 4];

pub trait PointwiseLoss: Sync {
    fn groups(&self) -> Vec<PointGroup<'_>>;

    /// Contribution of point `index` of group `group`, with its partial
    /// derivatives written into the seeds. Networks not requested by the
    /// group are passed as `None` and their seeds are ignored.
    fn term(
        &self,
        group: usize,
        index: usize,
        y: Option<PointEval<'_>>,
        w: Option<PointEval<'_>>,
        seed_y: Seed<'_>,
        seed_w: Seed<'_>,
    ) -> Components;
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub components: Components,
    pub grad_y: FlatGradient,
    pub grad_w: FlatGradient,
}

impl LossGradient {
    pub fn total(&self) -> f64 {
        self.components.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Spread chunks over the global rayon pool.
    pub parallel: bool,
}

struct ChunkResult {
    components: Components,
    grad_y: Option<Vec<f64>>,
    grad_w: Option<Vec<f64>>,
}

fn seed_for<'a>(seeds: Option<&'a mut Seeds>, i: usize, d: usize, scratch: &'a mut [f64; 3], scratch_grad: &'a mut [f64]) -> Seed<'a> {
    match seeds {
        Some(s) if !s.grad.is_empty() => Seed {
            value: &mut s.value[i],
            grad: &mut s.grad[i * d..(i + 1) * d],
            laplacian: &mut s.laplacian[i],
        },
        Some(s) => {
            let [_, lap, _] = scratch;
            Seed {
                value: &mut s.value[i],
                grad: scratch_grad,
                laplacian: lap,
            }
        }
        None => {
            let [v, lap, _] = scratch;
            Seed {
                value: v,
                grad: scratch_grad,
                laplacian: lap,
            }
        }
    }
}

fn eval_chunk<L: PointwiseLoss + ?Sized>(
    loss: &L,
    nets: &NetPair<'_>,
    group_idx: usize,
    group: &PointGroup<'_>,
    start: usize,
    chunk: &[f64],
    point_offset: usize,
    with_grad: bool,
) -> Result<ChunkResult> {
    let d = nets.cfg_y.dim();
    let n = chunk.len() / d;
    let run = |params: &MlpParams, cfg: &TwoScaleConfig, derivs: Option<Derivatives>| -> Result<Option<(BatchEval, _, Derivatives)>> {
        derivs
            .map(|dv| forward_batch(params, cfg, chunk, nets.eps, dv).map(|(b, t)| (b, t, dv)))
            .transpose()
    };
    let ys = run(nets.params_y, nets.cfg_y, group.y)?;
    let ws = run(nets.params_w, nets.cfg_w, group.w)?;
    let mut seeds_y = ys.as_ref().map(|(_, _, dv)| Seeds::zeros(n, d, *dv));
    let mut seeds_w = ws.as_ref().map(|(_, _, dv)| Seeds::zeros(n, d, *dv));
    let mut components = [0.0; 4];
    let mut sy = [0.0; 3];
    let mut sw = [0.0; 3];
    let mut gy = vec![0.0; d];
    let mut gw = vec![0.0; d];
    for i in 0..n {
        let ye = ys.as_ref().map(|(b, _, _)| b.point(i));
        let we = ws.as_ref().map(|(b, _, _)| b.point(i));
        let c = loss.term(
            group_idx,
            start + i,
            ye,
            we,
            seed_for(seeds_y.as_mut(), i, d, &mut sy, &mut gy),
            seed_for(seeds_w.as_mut(), i, d, &mut sw, &mut gw),
        );
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "non-finite loss term",
                Some(point_offset + start + i),
            ));
        }
        for (acc, v) in components.iter_mut().zip(c) {
            *acc += v;
        }
    }
    let mut out = ChunkResult {
        components,
        grad_y: None,
        grad_w: None,
    };
    if with_grad {
        if let (Some((_, tape, _)), Some(seeds)) = (ys.as_ref(), seeds_y.as_ref()) {
            let mut g = vec![0.0; nets.params_y.len()];
            backward_batch(nets.params_y, tape, seeds, &mut g);
            out.grad_y = Some(g);
        }
        if let (Some((_, tape, _)), Some(seeds)) = (ws.as_ref(), seeds_w.as_ref()) {
            let mut g = vec![0.0; nets.params_w.len()];
            backward_batch(nets.params_w, tape, seeds, &mut g);
            out.grad_w = Some(g);
        }
    }
    Ok(out)
}

fn evaluate<L: PointwiseLoss + ?Sized>(
    loss: &L,
    nets: &NetPair<'_>,
    opts: EvalOptions,
    with_grad: bool,
) -> Result<LossGradient> {
    if nets.cfg_y.dim() != nets.cfg_w.dim() {
        return Err(Error::config("state and second network disagree on dimension"));
    }
    let d = nets.cfg_y.dim();
    let groups = loss.groups();
    let mut jobs = Vec::new();
    let mut offset = 0;
    for (gi, group) in groups.iter().enumerate() {
        for (ci, chunk) in group.points.chunks(CHUNK_POINTS * d).enumerate() {
            jobs.push((gi, ci * CHUNK_POINTS, chunk, offset));
        }
        offset += group.points.len() / d;
    }
    let run = |&(gi, start, chunk, off): &(usize, usize, &[f64], usize)| {
        eval_chunk(loss, nets, gi, &groups[gi], start, chunk, off, with_grad)
    };
    let results: Vec<Result<ChunkResult>> = if opts.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };

    let mut total = LossGradient {
        components: [0.0; 4],
        grad_y: FlatGradient::zeros(if with_grad { nets.params_y.len() } else { 0 }),
        grad_w: FlatGradient::zeros(if with_grad { nets.params_w.len() } else { 0 }),
    };
    for r in results {
        let r = r?;
        for (acc, v) in total.components.iter_mut().zip(r.components) {
            *acc += v;
        }
        if let Some(g) = r.grad_y {
            total.grad_y.0.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if let Some(g) = r.grad_w {
            total.grad_w.0.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok(total)
}

/// Loss components and exact gradients with respect to both parameter sets.
pub fn loss_param_gradient<L: PointwiseLoss + ?Sized>(
    loss: &L,
    nets: &NetPair<'_>,
    opts: EvalOptions,
) -> Result<LossGradient> {
    evaluate(loss, nets, opts, true)
}

/// Loss components only (no reverse pass).
pub fn loss_components<L: PointwiseLoss + ?Sized>(
    loss: &L,
    nets: &NetPair<'_>,
    opts: EvalOptions,
) -> Result<Components> {
    evaluate(loss, nets, opts, false).map(|g| g.components)
}
