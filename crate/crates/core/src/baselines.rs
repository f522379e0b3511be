//! Hand-designed optimizers used as comparison points.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::flatness::{hutchinson_node, rademacher_probes, sgld_entropy_grad, SgldConfig, DEFAULT_PROBES};
use crate::optimizees::{Batch, BatchSchedule, Optimizee};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Sgd,
    Adam,
    Rmsprop,
    EntropySgd,
    SgdHessian,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Sgd => "sgd",
            BaselineKind::Adam => "adam",
            BaselineKind::Rmsprop => "rmsprop",
            BaselineKind::EntropySgd => "entropy_sgd",
            BaselineKind::SgdHessian => "sgd_hessian",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_decay")]
    pub decay: f64,
    /// Entropy-SGD scope, held fixed (no annealing).
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_sgld_steps")]
    pub sgld_steps: usize,
    /// Hutchinson penalty weight for `sgd_hessian`.
    #[serde(default = "d_lambda")]
    pub lambda_b: f64,
    #[serde(default = "d_probes")]
    pub probes: usize,
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_decay() -> f64 {
    0.9
}
fn d_gamma() -> f64 {
    1.0
}
fn d_sgld_steps() -> usize {
    20
}
fn d_lambda() -> f64 {
    1e-2
}
fn d_probes() -> usize {
    DEFAULT_PROBES
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            decay: d_decay(),
            gamma: d_gamma(),
            sgld_steps: d_sgld_steps(),
            lambda_b: d_lambda(),
            probes: d_probes(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(BaselineKind::Sgd, lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{}: {m}", self.kind.name())));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.decay) {
            return bad("betas and decay must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        match self.kind {
            BaselineKind::EntropySgd if !(self.gamma > 0.0) || self.sgld_steps < 2 => bad("needs gamma > 0 and sgld_steps >= 2"),
            BaselineKind::SgdHessian if self.probes == 0 || !(self.lambda_b >= 0.0) => bad("needs probes >= 1 and lambda_b >= 0"),
            _ => Ok(()),
        }
    }
}

/// Per-run optimizer memory: moment estimates, step counter and a stream seed
/// for the stochastic variants.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub seed: u64,
}

impl BaselineState {
    pub fn new(p: usize, seed: u64) -> Self {
        Self { t: 0, m: vec![0.0; p], v: vec![0.0; p], seed }
    }
}

/// Bias-corrected Adam direction; expects `st.t` already incremented.
pub(crate) fn adam_direction(st: &mut BaselineState, g: &[f64], beta1: f64, beta2: f64, eps: f64) -> Vec<f64> {
    let (c1, c2) = (1.0 - beta1.powi(st.t as i32), 1.0 - beta2.powi(st.t as i32));
    g.iter()
        .enumerate()
        .map(|(i, gi)| {
            st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
            st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
            (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps)
        })
        .collect()
}

pub(crate) fn rmsprop_direction(st: &mut BaselineState, g: &[f64], decay: f64, eps: f64) -> Vec<f64> {
    g.iter()
        .enumerate()
        .map(|(i, gi)| {
            st.v[i] = decay * st.v[i] + (1.0 - decay) * gi * gi;
            gi / (st.v[i].sqrt() + eps)
        })
        .collect()
}

/// Gradient of `L̂ + λ_b · tr̂ ∇²L̂` with fresh probes.
fn penalized_grad(opt: &Optimizee, theta: &[f64], batch: &Batch, lambda: f64, probes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let th = g.leaves(theta);
    let l = opt.build_loss(&mut g, &th, batch);
    let grads = g.grad(l, &th)?.into_grads();
    let h = hutchinson_node(&mut g, &grads, &th, &rademacher_probes(theta.len(), probes, seed))?;
    let hs = g.scale(h, lambda);
    let total = g.add(l, hs);
    g.backward_values(total, &th)
}

/// One update of a hand-designed optimizer.
pub fn baseline_step(
    cfg: &BaselineConfig,
    opt: &Optimizee,
    theta: &[f64],
    state: &BaselineState,
    batch: &Batch,
) -> Result<(Vec<f64>, BaselineState)> {
    let mut st = state.clone();
    st.t += 1;
    let step_seed = rng::derive(st.seed, &[st.t]);
    let dir: Vec<f64> = match cfg.kind {
        BaselineKind::Sgd => opt.loss_and_grad(theta, batch)?.1,
        BaselineKind::Adam => adam_direction(&mut st, &opt.loss_and_grad(theta, batch)?.1, cfg.beta1, cfg.beta2, cfg.eps),
        BaselineKind::Rmsprop => rmsprop_direction(&mut st, &opt.loss_and_grad(theta, batch)?.1, cfg.decay, cfg.eps),
        BaselineKind::EntropySgd => {
            let sg = SgldConfig::new(cfg.gamma, cfg.sgld_steps, step_seed);
            sgld_entropy_grad(opt, theta, batch, &sg)?
        }
        BaselineKind::SgdHessian => penalized_grad(opt, theta, batch, cfg.lambda_b, cfg.probes, step_seed)?,
    };
    let next: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t - cfg.lr * d).collect();
    if let Some(i) = next.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { node: i });
    }
    Ok((next, st))
}

/// Runs `steps` updates from `theta0`; returns the final `θ` and its full-batch loss.
pub fn run_baseline(
    cfg: &BaselineConfig,
    opt: &Optimizee,
    theta0: &[f64],
    steps: usize,
    schedule: &BatchSchedule,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let mut sampler = schedule.sampler(opt.n_train(), seed)?;
    let mut state = BaselineState::new(theta0.len(), seed);
    let mut theta = theta0.to_vec();
    for _ in 0..steps {
        let b = sampler.next_batch();
        (theta, state) = baseline_step(cfg, opt, &theta, &state, &b)?;
    }
    let final_loss = opt.loss(&theta, &opt.full_batch())?;
    Ok((theta, final_loss))
}

/// One grid candidate's outcome; `mean_final_loss` is `None` when it diverged.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridScore {
    pub lr: f64,
    pub mean_final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    pub best: BaselineConfig,
    pub scores: Vec<GridScore>,
}

/// A run counts as diverged if any loss is non-finite or the final loss
/// exceeds ten times the initial one.
const DIVERGENCE_FACTOR: f64 = 10.0;

/// Divergence rule shared by the grid search and the harness sweep.
pub fn is_diverged(initial_loss: f64, final_loss: f64) -> bool {
    !(final_loss.is_finite() && final_loss <= DIVERGENCE_FACTOR * initial_loss)
}

/// Picks the learning rate with the lowest mean final training loss over
/// every `(instance, seed)` pair. `θ⁰` comes from the instance's init sampler.
pub fn lr_grid_search_over(
    cfg: &BaselineConfig,
    instances: &[&Optimizee],
    grid: &[f64],
    budget: usize,
    seeds: &[u64],
) -> Result<GridSearchResult> {
    if grid.is_empty() || instances.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("grid, instances and seeds must be non-empty".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lr in grid {
        let c = BaselineConfig { lr, ..cfg.clone() };
        c.validate()?;
        let mut total = 0.0;
        let mut diverged = false;
        'runs: for opt in instances {
            for &s in seeds {
                let theta0 = opt.init_theta(&mut rng::stream(s, 0, rng::tag::INIT));
                let l0 = opt.loss(&theta0, &opt.full_batch())?;
                match run_baseline(&c, opt, &theta0, budget, &BatchSchedule::full(), s) {
                    Ok((_, lt)) if !is_diverged(l0, lt) => total += lt,
                    _ => {
                        diverged = true;
                        break 'runs;
                    }
                }
            }
        }
        let n = (instances.len() * seeds.len()) as f64;
        scores.push(GridScore { lr, mean_final_loss: (!diverged).then_some(total / n) });
    }
    let best = scores
        .iter()
        .filter_map(|s| s.mean_final_loss.map(|l| (s.lr, l)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::AllDiverged)?;
    Ok(GridSearchResult { best: BaselineConfig { lr: best.0, ..cfg.clone() }, scores })
}

pub fn lr_grid_search(
    cfg: &BaselineConfig,
    opt: &Optimizee,
    grid: &[f64],
    budget: usize,
    seeds: &[u64],
) -> Result<GridSearchResult> {
    lr_grid_search_over(cfg, &[opt], grid, budget, seeds)
}

/// Learning rates swept for SGD in the reference experiments.
pub const REFERENCE_SGD_GRID: [f64; 5] = [0.1, 0.01, 0.001, 0.0001, 0.00001];
