use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{finite_difference_grad, max_relative_error, Graph, NodeRef};
use crate::error::{Error, Result};
use crate::flatness::{
    entropy_quadrature, hutchinson_node, jacobian_trace, local_entropy_quadratic_1d, power_iteration, power_start,
    sgld_entropy_grad, verify_theorem1, QuadratureGrid, SgldConfig, THEOREM1_A_GRID, THEOREM1_GAMMA_GRID,
    THEOREM1_THETA_GRID,
};
use crate::learned_optimizer::{MomentumTanhRule, UpdateRule};
use crate::meta::{objective_value, task_meta_gradient, MetaConfig, Regularizer};
use crate::optimizees::{
    make_blobs, make_logistic, make_quadratic_family, make_rosenbrock, make_tiny_mlp, Activation, Optimizee,
};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Theorem1,
    Estimators,
    Gradcheck,
    Eq5,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Theorem1, Suite::Estimators, Suite::Gradcheck, Suite::Eq5];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Theorem1 => "theorem1",
            Suite::Estimators => "estimators",
            Suite::Gradcheck => "gradcheck",
            Suite::Eq5 => "eq5",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite '{s}' (theorem1, estimators, gradcheck, eq5)")))
    }
}

/// One checked quantity: `value` must not exceed `tolerance` (errors) or,
/// for inequality cases, `value` is the slack and `tolerance` is 0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteCase {
    fn within(name: impl Into<String>, err: f64, tol: f64) -> Self {
        Self { name: name.into(), value: err, tolerance: tol, passed: err <= tol }
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub cases: Vec<SuiteCase>,
    pub elapsed_ms: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &SuiteCase> {
        self.cases.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn verify_suite(suite: Suite) -> Result<SuiteReport> {
    let start = Instant::now();
    let cases = match suite {
        Suite::Theorem1 => theorem1()?,
        Suite::Estimators => estimators()?,
        Suite::Gradcheck => gradcheck()?,
        Suite::Eq5 => eq5()?,
    };
    Ok(SuiteReport {
        suite,
        passed: cases.iter().all(|c| c.passed),
        cases,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn theorem1() -> Result<Vec<SuiteCase>> {
    Ok(verify_theorem1(&THEOREM1_A_GRID, &THEOREM1_GAMMA_GRID, &THEOREM1_THETA_GRID, 1.0)?
        .into_iter()
        .map(|c| SuiteCase {
            name: format!("a={} gamma={} theta={}", c.a, c.gamma, c.theta),
            value: c.lhs - c.rhs,
            tolerance: 0.0,
            passed: c.holds,
        })
        .collect())
}

/// `½ θᵀAθ` on a fresh tape; returns the graph, `θ` leaves and gradient nodes.
fn explicit_quadratic(a: &DMatrix<f64>, theta: &[f64]) -> Result<(Graph, Vec<NodeRef>, Vec<NodeRef>)> {
    let mut g = Graph::new();
    let th = g.leaves(theta);
    let rows: Vec<NodeRef> = (0..a.nrows())
        .map(|i| {
            let r: Vec<f64> = a.row(i).iter().copied().collect();
            g.weighted_sum(&th, &r)
        })
        .collect();
    let q = g.dot(&th, &rows);
    let l = g.scale(q, 0.5);
    let grads = g.grad(l, &th)?.into_grads();
    Ok((g, th, grads))
}

fn sign_patterns(p: usize) -> Vec<Vec<f64>> {
    (0..1usize << p).map(|m| (0..p).map(|i| if m >> i & 1 == 1 { 1.0 } else { -1.0 }).collect()).collect()
}

/// `Q diag(λ) Qᵀ` with a Haar-ish rotation from `seed`.
fn rotated(eigs: &[f64], seed: u64) -> DMatrix<f64> {
    let p = eigs.len();
    let mut r = rng::from_seed(seed);
    let m = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(&mut r));
    let q = m.qr().q();
    &q * DMatrix::from_diagonal(&DVector::from_column_slice(eigs)) * q.transpose()
}

fn estimators() -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0, 2.0, 3.0]));
    let (mut g, th, grads) = explicit_quadratic(&diag, &[0.3, -1.2, 0.7, 2.0])?;
    for (i, v) in sign_patterns(4).into_iter().enumerate().step_by(3) {
        let h = hutchinson_node(&mut g, &grads, &th, &[v])?;
        out.push(SuiteCase::within(format!("hutchinson diagonal, one probe #{i}"), (g.value(h) - 6.5).abs(), 1e-10));
    }

    let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let (mut g, th, grads) = explicit_quadratic(&a, &[1.0, -0.5])?;
    let h = hutchinson_node(&mut g, &grads, &th, &sign_patterns(2))?;
    out.push(SuiteCase::within("hutchinson [[2,1],[1,2]] enumeration", (g.value(h) - 4.0).abs(), 1e-10));
    let (q, _) = power_iteration(&mut g, &grads, &th, &power_start(2, 0), 100)?;
    out.push(SuiteCase::within("power iteration [[2,1],[1,2]], 100 iters", (q - 3.0).abs(), 1e-6));

    for (k, eigs) in [vec![4.0, 2.0, 1.0, 0.5, 0.25], vec![-3.0, 1.5, 1.0, -0.5, 0.1, 0.0], vec![1.0, 0.5, 0.5, 0.2]]
        .into_iter()
        .enumerate()
    {
        let a = rotated(&eigs, 100 + k as u64);
        let top = eigs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let theta = vec![0.1; eigs.len()];
        let (mut g, th, grads) = explicit_quadratic(&a, &theta)?;
        let (q, _) = power_iteration(&mut g, &grads, &th, &power_start(eigs.len(), k as u64), 10)?;
        out.push(SuiteCase::within(format!("power iteration 10 iters, spectrum {eigs:?}"), (q - top).abs() / top, 0.05));
    }

    let m = make_tiny_mlp(&[2, 20, 2], Activation::Sigmoid, Arc::new(make_blobs(40, 0, 2.0, 1.0, 1)))?;
    let b = m.full_batch();
    let mut r = rng::from_seed(5);
    for i in 0..3 {
        let th = m.init_theta(&mut r);
        let (_, gr) = m.loss_and_grad(&th, &b)?;
        let sq: f64 = gr.iter().map(|x| x * x).sum();
        out.push(SuiteCase::within(format!("jacobian_trace == |grad|^2 on mlp #{i}"), (jacobian_trace(&m, &th, &b)? - sq).abs(), 1e-12));
    }
    Ok(out)
}

fn random_point(p: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut r = rng::from_seed(seed);
    (0..p)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut r);
            scale * x
        })
        .collect()
}

fn gradcheck_optimizees() -> Result<Vec<(&'static str, Optimizee, f64)>> {
    let data = Arc::new(make_blobs(12, 0, 2.0, 1.0, 7));
    Ok(vec![
        ("quadratic p=10", make_quadratic_family(10, (0.5, 2.0), 3)?, 1.0),
        ("rosenbrock p=2", make_rosenbrock(2)?, 0.8),
        ("rosenbrock p=6", make_rosenbrock(6)?, 0.8),
        ("logistic", make_logistic(Arc::clone(&data))?, 1.0),
        ("mlp 2-5-2 sigmoid", make_tiny_mlp(&[2, 5, 2], Activation::Sigmoid, Arc::clone(&data))?, 1.0),
        ("mlp 2-4-3-2 relu", make_tiny_mlp(&[2, 4, 3, 2], Activation::Relu, data)?, 1.0),
    ])
}

fn gradcheck() -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for (k, (name, opt, scale)) in gradcheck_optimizees()?.into_iter().enumerate() {
        let b = opt.full_batch();
        let p = opt.param_dim();
        for j in 0..3u64 {
            let theta = random_point(p, 1000 * k as u64 + j, scale);
            let (_, ad) = opt.loss_and_grad(&theta, &b)?;
            let fd = finite_difference_grad(|x| opt.loss(x, &b).unwrap_or(f64::NAN), &theta, 1e-5);
            out.push(SuiteCase::within(format!("{name} grad #{j}"), max_relative_error(&ad, &fd, 1e-8), 1e-5));

            let v = random_point(p, 5000 + 1000 * k as u64 + j, 1.0);
            let mut g = Graph::new();
            let th = g.leaves(&theta);
            let l = opt.build_loss(&mut g, &th, &b);
            let hv = g.hvp(l, &th, &v)?;
            let eps = 1e-4;
            let shift = |s: f64| -> Vec<f64> { theta.iter().zip(&v).map(|(t, d)| t + s * d).collect() };
            let (_, gp) = opt.loss_and_grad(&shift(eps), &b)?;
            let (_, gm) = opt.loss_and_grad(&shift(-eps), &b)?;
            let fd_hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, c)| (a - c) / (2.0 * eps)).collect();
            out.push(SuiteCase::within(format!("{name} hvp #{j}"), max_relative_error(&hv, &fd_hv, 1e-6), 1e-4));
        }
    }

    let m = make_tiny_mlp(&[2, 3, 2], Activation::Sigmoid, Arc::new(make_blobs(8, 4, 2.0, 1.0, 5)))?;
    let rule = MomentumTanhRule;
    let phi = rule.init_phi(0);
    let theta0 = m.init_theta(&mut rng::from_seed(3));
    for reg in [Regularizer::None, Regularizer::HessianTrace, Regularizer::HessianEv, Regularizer::JacobianTrace, Regularizer::Entropy] {
        for second_order in [true, false] {
            let c = MetaConfig { regularizer: reg, lambda: 0.5, unroll: 3, meta_steps: 1, second_order, ..MetaConfig::default() };
            let tg = task_meta_gradient(&rule, &phi, &m, &theta0, &c, c.unroll, 9)?;
            let frozen = (!second_order).then_some(tg.inputs.as_slice());
            let f = |p: &[f64]| objective_value(&rule, p, &m, &theta0, &c, c.unroll, 9, &tg.aux, frozen).unwrap_or(f64::NAN);
            let fd = finite_difference_grad(f, &phi, 1e-6);
            out.push(SuiteCase::within(
                format!("meta-gradient {} (second_order={second_order})", reg.name()),
                max_relative_error(&tg.grad, &fd, 1e-7),
                1e-4,
            ));
        }
    }
    Ok(out)
}

fn eq5() -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for a in [0.5, 1.0, 4.0] {
        let q = make_quadratic_family(1, (a, a), 0)?;
        for (gamma, theta) in [(0.5, -1.0), (1.0, 2.0), (2.0, 0.5)] {
            let g = entropy_quadrature(&q, &[theta], gamma, &QuadratureGrid::default())?;
            let want = local_entropy_quadratic_1d(a, gamma, theta);
            out.push(SuiteCase::within(format!("quadrature a={a} gamma={gamma} theta={theta}"), (g - want).abs(), 1e-6));
        }
    }
    for (a, gamma, theta) in [(1.0, 1.0, 2.0), (1.0, 100.0, 2.0), (2.0, 1.0, -1.5)] {
        let q = make_quadratic_family(1, (a, a), 0)?;
        let b = q.full_batch();
        let mut sum = 0.0;
        for s in 0..20 {
            sum += sgld_entropy_grad(&q, &[theta], &b, &SgldConfig::new(gamma, 1000, s))?[0];
        }
        let want = a * gamma * theta / (a + gamma);
        out.push(SuiteCase::within(
            format!("sgld a={a} gamma={gamma} theta={theta}"),
            ((sum / 20.0) - want).abs() / want.abs(),
            0.10,
        ));
    }
    Ok(out)
}
