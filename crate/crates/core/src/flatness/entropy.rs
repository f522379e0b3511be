//! Local entropy `G(θ;γ) = log ∫ exp(−L(θ′) − γ/2 ‖θ − θ′‖²) dθ′`: the Langevin
//! estimate of its gradient, a grid quadrature for `p ≤ 2`, and the
//! curvature bound check on one-dimensional quadratics.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::norm;
use crate::error::{Error, Result};
use crate::optimizees::{make_quadratic_family, Batch, Optimizee};
use crate::rng;

/// Langevin chain settings for [`sgld_entropy_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct SgldConfig {
    pub gamma: f64,
    pub inner_steps: usize,
    pub step_size: f64,
    pub noise_scale: f64,
    pub burn_in: usize,
    pub seed: u64,
}

impl SgldConfig {
    /// Low-temperature defaults: `step = 0.1/γ`, `noise = 0.01·√(2·step)`, burn-in a fifth of the chain.
    pub fn new(gamma: f64, inner_steps: usize, seed: u64) -> Self {
        let step_size = 0.1 / gamma;
        Self {
            gamma,
            inner_steps,
            step_size,
            noise_scale: (2.0 * step_size).sqrt() * 0.01,
            burn_in: inner_steps / 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.inner_steps <= self.burn_in {
            return Err(Error::InvalidArgument("inner_steps must exceed burn_in".into()));
        }
        if !(self.step_size > 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument("step_size must be > 0 and noise_scale >= 0".into()));
        }
        Ok(())
    }
}

const EMA_WEIGHT: f64 = 0.75;
const CHAIN_LIMIT: f64 = 1e6;

/// Estimate of `−∇G = γ(θ − E[θ′])` from a Langevin chain started at `θ`.
///
/// The returned vector is plain data; callers that put it on a tape treat it as a constant.
pub fn sgld_entropy_grad(opt: &Optimizee, theta: &[f64], batch: &Batch, cfg: &SgldConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, 0, rng::tag::SGLD);
    let sd = cfg.noise_scale * cfg.step_size.sqrt();
    let mut x = theta.to_vec();
    let mut mean: Option<Vec<f64>> = None;
    for k in 0..cfg.inner_steps {
        let (_, grad) = opt.loss_and_grad(&x, batch).map_err(|_| Error::ChainDiverged { norm: f64::INFINITY })?;
        for ((xi, gi), ti) in x.iter_mut().zip(&grad).zip(theta) {
            let z: f64 = StandardNormal.sample(&mut r);
            *xi -= cfg.step_size * (gi + cfg.gamma * (*xi - ti));
            *xi += sd * z;
        }
        let n = norm(&x);
        if !(n <= CHAIN_LIMIT) {
            return Err(Error::ChainDiverged { norm: n });
        }
        if k >= cfg.burn_in {
            match mean.as_mut() {
                None => mean = Some(x.clone()),
                Some(m) => m.iter_mut().zip(&x).for_each(|(mi, xi)| *mi = (1.0 - EMA_WEIGHT) * *mi + EMA_WEIGHT * xi),
            }
        }
    }
    let mean = mean.expect("inner_steps > burn_in");
    Ok(theta.iter().zip(&mean).map(|(t, m)| cfg.gamma * (t - m)).collect())
}

/// Axis-aligned tensor grid centred on `θ`: `points` nodes on `[θ − w, θ + w]` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureGrid {
    pub half_width: f64,
    pub points: usize,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self { half_width: 10.0, points: 2001 }
    }
}

/// `ln(1e-12)`: boundary integrand must sit below this, relative to the peak.
const BOUNDARY_LOG_RATIO: f64 = -27.631021115928547;

/// Trapezoid-rule local entropy of an arbitrary loss, `p ∈ {1, 2}`.
pub fn entropy_quadrature_fn(
    loss: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    gamma: f64,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let p = theta.len();
    if p == 0 || p > 2 {
        return Err(Error::InvalidArgument(format!("quadrature supports p <= 2, got {p}")));
    }
    if grid.points < 3 || !(grid.half_width > 0.0) || !(gamma > 0.0) {
        return Err(Error::InvalidArgument("grid needs >= 3 points, positive width and gamma > 0".into()));
    }
    let n = grid.points;
    let h = 2.0 * grid.half_width / (n - 1) as f64;
    let axis = |t: f64, i: usize| t - grid.half_width + i as f64 * h;
    let weight = |i: usize| if i == 0 || i == n - 1 { 0.5f64.ln() } else { 0.0 };
    let mut logs = Vec::with_capacity(n.pow(p as u32));
    let mut peak = f64::NEG_INFINITY;
    let mut boundary = f64::NEG_INFINITY;
    let mut x = vec![0.0; p];
    let cols = if p == 2 { n } else { 1 };
    for i in 0..n {
        for j in 0..cols {
            x[0] = axis(theta[0], i);
            let mut w = weight(i);
            let mut edge = i == 0 || i == n - 1;
            if p == 2 {
                x[1] = axis(theta[1], j);
                w += weight(j);
                edge |= j == 0 || j == n - 1;
            }
            let d2: f64 = x.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
            let l = -loss(&x) - 0.5 * gamma * d2;
            if l.is_nan() {
                return Err(Error::NonFinite { node: 0 });
            }
            peak = peak.max(l);
            if edge {
                boundary = boundary.max(l);
            }
            logs.push(l + w);
        }
    }
    let log_ratio = boundary - peak;
    if log_ratio >= BOUNDARY_LOG_RATIO {
        return Err(Error::GridTooNarrow { log_ratio });
    }
    let s: f64 = logs.iter().map(|l| (l - peak).exp()).sum();
    Ok(peak + s.ln() + p as f64 * h.ln())
}

/// Local entropy of a full-batch optimizee loss with `param_dim ≤ 2`.
pub fn entropy_quadrature(opt: &Optimizee, theta: &[f64], gamma: f64, grid: &QuadratureGrid) -> Result<f64> {
    if theta.len() != opt.param_dim() {
        return Err(Error::DimMismatch { expected: opt.param_dim(), found: theta.len() });
    }
    let b = opt.full_batch();
    entropy_quadrature_fn(|x| opt.loss(x, &b).unwrap_or(f64::INFINITY), theta, gamma, grid)
}

/// Doubles the grid (same spacing) until the boundary test passes, at most eight times.
pub fn entropy_quadrature_adaptive(
    loss: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    gamma: f64,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let mut g = *grid;
    let mut last = None;
    for _ in 0..=8 {
        match entropy_quadrature_fn(&loss, theta, gamma, &g) {
            Err(e @ Error::GridTooNarrow { .. }) => {
                last = Some(e);
                g = QuadratureGrid { half_width: 2.0 * g.half_width, points: 2 * g.points - 1 };
            }
            other => return other,
        }
    }
    Err(last.expect("loop ran"))
}

/// Closed form for `L = ½aθ²`: `½ log(2π/(a+γ)) − aγθ²/(2(a+γ))`.
pub fn local_entropy_quadratic_1d(a: f64, gamma: f64, theta: f64) -> f64 {
    0.5 * (2.0 * PI / (a + gamma)).ln() - a * gamma * theta * theta / (2.0 * (a + gamma))
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Error function, absolute error below `1e-14` on the real line.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 3.0 {
        // erf(x) = 2/√π · e^{−x²} Σ (2x²)ⁿ x / (2n+1)!!, every term positive
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term > sum * 1e-17 {
            n += 1.0;
            term *= 2.0 * x2 / (2.0 * n + 1.0);
            sum += term;
        }
        FRAC_2_SQRT_PI * (-x2).exp() * sum
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Continued fraction for `erfc`, `x ≥ 3`.
fn erfc_cf(x: f64) -> f64 {
    let mut t = x;
    for n in (1..=120).rev() {
        t = x + (n as f64 / 2.0) / t;
    }
    (-x * x).exp() / (PI.sqrt() * t)
}

/// Constants of the curvature bound `D(x) ≤ −G ⇒ ‖∇²L‖ ≤ D⁻¹(−G)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Constants {
    pub m_radius: f64,
    pub m_lip: f64,
    pub rho_lip: f64,
    pub p: usize,
    pub gamma: f64,
    pub c_term: f64,
}

impl Theorem1Constants {
    /// Exact constants for `L = ½aθ²` in one dimension.
    pub fn quadratic_1d(a: f64, gamma: f64, theta: f64, m_radius: f64) -> Self {
        Self {
            m_radius,
            m_lip: a * (theta.abs() + m_radius),
            rho_lip: 0.0,
            p: 1,
            gamma,
            c_term: -erf(m_radius * (gamma / 2.0).sqrt()).ln(),
        }
    }

    /// Everything in `D` except `log(x + γ)`.
    fn offset(&self, loss_at_theta: f64) -> f64 {
        let p = self.p as f64;
        loss_at_theta + (p - 1.0) * self.gamma.ln()
            - self.m_radius * self.m_lip
            - 0.5 * p * (2.0 * PI).ln()
            - 0.5 * self.rho_lip * self.m_radius.powi(3)
            - self.c_term
    }

    pub fn d(&self, x: f64, loss_at_theta: f64) -> f64 {
        (x + self.gamma).ln() + self.offset(loss_at_theta)
    }

    pub fn d_inverse(&self, y: f64, loss_at_theta: f64) -> f64 {
        (y - self.offset(loss_at_theta)).exp() - self.gamma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Case {
    pub a: f64,
    pub gamma: f64,
    pub theta: f64,
    /// `‖∇²L‖ = a`.
    pub lhs: f64,
    /// `D⁻¹(−G)`.
    pub rhs: f64,
    pub d_at_lhs: f64,
    pub neg_g: f64,
    pub holds: bool,
}

pub const THEOREM1_A_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const THEOREM1_GAMMA_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const THEOREM1_THETA_GRID: [f64; 3] = [-1.0, 0.0, 1.0];

/// Checks the bound on `½aθ²` for every grid triple, with `G` from quadrature.
pub fn verify_theorem1(a_grid: &[f64], gamma_grid: &[f64], theta_grid: &[f64], m_radius: f64) -> Result<Vec<Theorem1Case>> {
    if !(m_radius > 0.0) {
        return Err(Error::InvalidArgument("m_radius must be > 0".into()));
    }
    let mut out = Vec::with_capacity(a_grid.len() * gamma_grid.len() * theta_grid.len());
    for &a in a_grid {
        let q = make_quadratic_family(1, (a, a), 0)?;
        let b = q.full_batch();
        for &gamma in gamma_grid {
            for &theta in theta_grid {
                let g = entropy_quadrature_adaptive(
                    |x| q.loss(x, &b).unwrap_or(f64::INFINITY),
                    &[theta],
                    gamma,
                    &QuadratureGrid::default(),
                )?;
                let neg_g = -g;
                let consts = Theorem1Constants::quadratic_1d(a, gamma, theta, m_radius);
                let loss = 0.5 * a * theta * theta;
                let d_at_lhs = consts.d(a, loss);
                out.push(Theorem1Case {
                    a,
                    gamma,
                    theta,
                    lhs: a,
                    rhs: consts.d_inverse(neg_g, loss),
                    d_at_lhs,
                    neg_g,
                    holds: d_at_lhs <= neg_g,
                });
            }
        }
    }
    Ok(out)
}
