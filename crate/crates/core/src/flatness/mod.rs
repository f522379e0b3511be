//! Curvature and flatness estimators: Hutchinson trace, power iteration,
//! the Gauss-Newton style `‖∇L‖²` proxy and local-entropy tools.

mod entropy;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use entropy::{
    entropy_quadrature, entropy_quadrature_adaptive, entropy_quadrature_fn, erf, local_entropy_quadratic_1d,
    sgld_entropy_grad, verify_theorem1, QuadratureGrid, SgldConfig, Theorem1Case, Theorem1Constants,
    THEOREM1_A_GRID, THEOREM1_GAMMA_GRID, THEOREM1_THETA_GRID,
};

use crate::autodiff::{Graph, NodeRef};
use crate::error::{Error, Result};
use crate::optimizees::{Batch, Optimizee};
use crate::rng::{self, Rng};

/// Probe count and power-iteration budget used unless configured otherwise.
pub const DEFAULT_PROBES: usize = 10;
pub const DEFAULT_POWER_ITERS: usize = 10;

/// Curvature summary at one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub hutchinson_trace: f64,
    pub top_abs_eig: f64,
    pub jacobian_trace: f64,
    pub entropy_grad: Vec<f64>,
    pub probes_used: usize,
    pub pi_iters_used: usize,
}

impl FlatnessReport {
    pub fn entropy_grad_norm(&self) -> f64 {
        norm(&self.entropy_grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatnessOptions {
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_pi_iters")]
    pub pi_iters: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_sgld_steps")]
    pub sgld_steps: usize,
}

fn default_probes() -> usize {
    DEFAULT_PROBES
}
fn default_pi_iters() -> usize {
    DEFAULT_POWER_ITERS
}
fn default_gamma() -> f64 {
    1.0
}
fn default_sgld_steps() -> usize {
    20
}

impl Default for FlatnessOptions {
    fn default() -> Self {
        Self { probes: DEFAULT_PROBES, pi_iters: DEFAULT_POWER_ITERS, gamma: 1.0, sgld_steps: 20 }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rademacher(p: usize, r: &mut Rng) -> Vec<f64> {
    (0..p).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

pub fn rademacher_probes(p: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 0, rng::tag::HUTCHINSON);
    (0..count).map(|_| rademacher(p, &mut r)).collect()
}

/// Unit vector drawn from the power-iteration stream of `seed`.
pub fn power_start(p: usize, seed: u64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed, 0, rng::tag::POWER);
    loop {
        let v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Mean of `vᵀ H v` over `probes`, recorded on the tape from existing gradient nodes.
pub fn hutchinson_node(g: &mut Graph, grads: &[NodeRef], theta: &[NodeRef], probes: &[Vec<f64>]) -> Result<NodeRef> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("hutchinson needs at least one probe".into()));
    }
    let mut terms = Vec::with_capacity(probes.len());
    for v in probes {
        let hv = g.hvp_from_grad(grads, theta, v)?;
        terms.push(g.weighted_sum(&hv, v));
    }
    Ok(g.mean(&terms))
}

/// Rayleigh quotient `vᵀ H v / vᵀ v` on the tape, with `v` held constant.
pub fn rayleigh_node(g: &mut Graph, grads: &[NodeRef], theta: &[NodeRef], v: &[f64]) -> Result<NodeRef> {
    let hv = g.hvp_from_grad(grads, theta, v)?;
    let q = g.weighted_sum(&hv, v);
    let vv: f64 = v.iter().map(|x| x * x).sum();
    Ok(g.scale(q, 1.0 / vv))
}

pub fn jacobian_trace_node(g: &mut Graph, grads: &[NodeRef]) -> NodeRef {
    g.dot(grads, grads)
}

/// Power iteration on tape-grown HVPs. Returns `(|vᵀHv|, v)` for the final unit `v`,
/// or `(0, v)` when `H v` vanishes.
pub fn power_iteration(
    g: &mut Graph,
    grads: &[NodeRef],
    theta: &[NodeRef],
    start: &[f64],
    iters: usize,
) -> Result<(f64, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::InvalidArgument("power iteration needs iters >= 1".into()));
    }
    let mut v = start.to_vec();
    for _ in 0..iters {
        let hv = g.hvp_from_grad(grads, theta, &v)?;
        let w = g.values(&hv);
        let n = norm(&w);
        if n < 1e-300 {
            return Ok((0.0, v));
        }
        v = w.into_iter().map(|x| x / n).collect();
    }
    let hv = g.hvp_from_grad(grads, theta, &v)?;
    let q: f64 = g.values(&hv).iter().zip(&v).map(|(a, b)| a * b).sum();
    Ok((q.abs(), v))
}

fn grad_setup(opt: &Optimizee, theta: &[f64], batch: &Batch) -> Result<(Graph, Vec<NodeRef>, Vec<NodeRef>)> {
    if theta.len() != opt.param_dim() {
        return Err(Error::DimMismatch { expected: opt.param_dim(), found: theta.len() });
    }
    let mut g = Graph::new();
    let th = g.leaves(theta);
    let l = opt.build_loss(&mut g, &th, batch);
    let grads = g.grad(l, &th)?.into_grads();
    Ok((g, th, grads))
}

/// Hutchinson estimate of `tr ∇²L̂` with `probes` Rademacher probes from `seed`.
pub fn hutchinson_trace(opt: &Optimizee, theta: &[f64], batch: &Batch, probes: usize, seed: u64) -> Result<f64> {
    hutchinson_trace_with(opt, theta, batch, &rademacher_probes(theta.len(), probes, seed))
}

pub fn hutchinson_trace_with(opt: &Optimizee, theta: &[f64], batch: &Batch, probes: &[Vec<f64>]) -> Result<f64> {
    let (mut g, th, grads) = grad_setup(opt, theta, batch)?;
    let n = hutchinson_node(&mut g, &grads, &th, probes)?;
    Ok(g.value(n))
}

/// Largest-modulus Hessian eigenvalue estimate after `iters` power steps.
pub fn top_abs_eigenvalue(opt: &Optimizee, theta: &[f64], batch: &Batch, iters: usize, seed: u64) -> Result<f64> {
    let (mut g, th, grads) = grad_setup(opt, theta, batch)?;
    Ok(power_iteration(&mut g, &grads, &th, &power_start(theta.len(), seed), iters)?.0)
}

/// `‖∇L̂‖²`.
pub fn jacobian_trace(opt: &Optimizee, theta: &[f64], batch: &Batch) -> Result<f64> {
    let (_, grad) = opt.loss_and_grad(theta, batch)?;
    Ok(grad.iter().map(|x| x * x).sum())
}

/// All estimators at once; each draws from its own stream of `seed`.
pub fn flatness_report(
    opt: &Optimizee,
    theta: &[f64],
    batch: &Batch,
    opts: &FlatnessOptions,
    seed: u64,
) -> Result<FlatnessReport> {
    let (mut g, th, grads) = grad_setup(opt, theta, batch)?;
    let gv = g.values(&grads);
    let jacobian_trace = gv.iter().map(|x| x * x).sum();
    let probes = rademacher_probes(theta.len(), opts.probes, seed);
    let h = hutchinson_node(&mut g, &grads, &th, &probes)?;
    let hutchinson_trace = g.value(h);
    let (top_abs_eig, _) = power_iteration(&mut g, &grads, &th, &power_start(theta.len(), seed), opts.pi_iters)?;
    drop(g);
    let sgld = SgldConfig::new(opts.gamma, opts.sgld_steps, rng::derive(seed, &[rng::tag::SGLD]));
    let entropy_grad = sgld_entropy_grad(opt, theta, batch, &sgld)?;
    Ok(FlatnessReport {
        hutchinson_trace,
        top_abs_eig,
        jacobian_trace,
        entropy_grad,
        probes_used: opts.probes,
        pi_iters_used: opts.pi_iters,
    })
}
