//! Meta-training: unroll a learned rule on an optimizee, form the (optionally
//! flatness-regularized) outer objective, and update `φ` by its gradient.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeRef};
use crate::baselines::{adam_direction, rmsprop_direction, BaselineState};
use crate::error::{Error, Result};
use crate::flatness::{
    flatness_report, hutchinson_node, jacobian_trace_node, power_iteration, power_start, rademacher_probes,
    rayleigh_node, sgld_entropy_grad, FlatnessOptions, FlatnessReport, SgldConfig, DEFAULT_POWER_ITERS,
    DEFAULT_PROBES,
};
use crate::learned_optimizer::UpdateRule;
use crate::optimizees::{BatchSampler, BatchSchedule, Optimizee, TaskSampler};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    HessianEv,
    HessianTrace,
    JacobianTrace,
    Entropy,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::HessianEv => "hessian_ev",
            Regularizer::HessianTrace => "hessian_trace",
            Regularizer::JacobianTrace => "jacobian_trace",
            Regularizer::Entropy => "entropy",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaOptimizerKind {
    Rmsprop,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub meta_steps: usize,
    pub unroll: usize,
}

/// Meta-training settings. `unroll` is the horizon `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub unroll: usize,
    pub regularizer: Regularizer,
    pub lambda: f64,
    pub gamma: f64,
    pub meta_optimizer: MetaOptimizerKind,
    pub meta_lr: f64,
    /// Second-moment decay of the meta-optimizer (Adam `β₂`, RMSProp decay).
    pub meta_beta2: f64,
    pub meta_steps: usize,
    /// Inner steps per tape segment; `None` keeps the whole unroll on one tape.
    pub truncation: Option<usize>,
    /// Keep the optimizee gradients fed to the rule on the tape.
    pub second_order: bool,
    /// Stages run in order; when present they must add up to `meta_steps` and end at `unroll`.
    pub curriculum: Option<Vec<CurriculumStage>>,
    pub seed: u64,
    pub tasks_per_step: usize,
    pub probes: usize,
    pub pi_iters: usize,
    pub sgld_steps: usize,
    /// Keep the power iterations of `hessian_ev` on the tape instead of detaching `v`.
    pub differentiate_power_iteration: bool,
    pub batch: BatchSchedule,
    /// Optional cap on the meta-gradient's Euclidean norm.
    pub grad_clip: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            unroll: 20,
            regularizer: Regularizer::None,
            lambda: 1e-2,
            gamma: 1.0,
            meta_optimizer: MetaOptimizerKind::Adam,
            meta_lr: 1e-3,
            meta_beta2: 0.9,
            meta_steps: 500,
            truncation: None,
            second_order: true,
            curriculum: None,
            seed: 0,
            tasks_per_step: 4,
            probes: DEFAULT_PROBES,
            pi_iters: DEFAULT_POWER_ITERS,
            sgld_steps: 20,
            differentiate_power_iteration: false,
            batch: BatchSchedule::full(),
            grad_clip: None,
        }
    }
}

/// Desk-scale defaults with the two-stage curriculum (300 steps at `T = 10`, then 200 at `T = 20`).
pub fn desk_curriculum() -> Vec<CurriculumStage> {
    vec![CurriculumStage { meta_steps: 300, unroll: 10 }, CurriculumStage { meta_steps: 200, unroll: 20 }]
}

/// Meta-optimizer settings of the reference MNIST runs, kept as a preset.
pub fn reference_preset() -> MetaConfig {
    MetaConfig { meta_optimizer: MetaOptimizerKind::Rmsprop, meta_lr: 1e-6, meta_beta2: 0.9, lambda: 5e-5, ..MetaConfig::default() }
}

/// Entropy-regularizer constants `(λ_H, λ_E, γ)` of the reference runs.
pub const REFERENCE_ENTROPY_PRESET: (f64, f64, f64) = (1e-10, 1e-6, 1e-4);

impl MetaConfig {
    pub fn desk() -> Self {
        Self { curriculum: Some(desk_curriculum()), ..Self::default() }
    }

    pub fn stages(&self) -> Vec<CurriculumStage> {
        match &self.curriculum {
            Some(c) if !c.is_empty() => c.clone(),
            _ => vec![CurriculumStage { meta_steps: self.meta_steps, unroll: self.unroll }],
        }
    }

    pub fn truncation_for(&self, unroll: usize) -> usize {
        self.truncation.unwrap_or(unroll).min(unroll)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.unroll == 0 {
            return bad("meta.unroll must be >= 1".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("meta.lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("meta.gamma must be > 0, got {}", self.gamma));
        }
        if !(self.meta_lr > 0.0) {
            return bad("meta.meta_lr must be > 0".into());
        }
        if !(self.meta_beta2 > 0.0 && self.meta_beta2 < 1.0) {
            return bad("meta.meta_beta2 must lie in (0, 1)".into());
        }
        if self.tasks_per_step == 0 || self.probes == 0 || self.pi_iters == 0 || self.sgld_steps < 2 {
            return bad("tasks_per_step, probes and pi_iters must be >= 1, sgld_steps >= 2".into());
        }
        if let Some(c) = &self.curriculum {
            if !c.is_empty() {
                let total: usize = c.iter().map(|s| s.meta_steps).sum();
                if total != self.meta_steps || c.last().map(|s| s.unroll) != Some(self.unroll) {
                    return bad(format!(
                        "curriculum covers {total} steps ending at T={:?}; meta_steps={} and unroll={} must match",
                        c.last().map(|s| s.unroll),
                        self.meta_steps,
                        self.unroll
                    ));
                }
            }
        }
        for s in self.stages() {
            if s.unroll == 0 {
                return bad("curriculum unroll must be >= 1".into());
            }
            if let Some(k) = self.truncation {
                if k == 0 || s.unroll % k != 0 {
                    return bad(format!("truncation {k} must divide unroll {}", s.unroll));
                }
            }
        }
        Ok(())
    }
}

/// Tape record of an unroll segment.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `θ⁰..θ^T` as nodes; `θ⁰` is a constant.
    pub thetas: Vec<Vec<NodeRef>>,
    /// Batch loss at each `θᵗ` before its update.
    pub losses: Vec<f64>,
    /// Gradients fed to the rule, by value.
    pub inputs: Vec<Vec<f64>>,
    pub state: Vec<NodeRef>,
}

impl Trajectory {
    pub fn final_theta(&self) -> &[NodeRef] {
        self.thetas.last().expect("trajectory holds θ⁰")
    }

    /// Curvature summary at the final iterate.
    pub fn final_flatness(&self, g: &Graph, opt: &Optimizee, opts: &FlatnessOptions, seed: u64) -> Result<FlatnessReport> {
        let th = g.values(self.final_theta());
        flatness_report(opt, &th, &opt.full_batch(), opts, seed)
    }
}

/// Records `steps` applications of `rule` on `g`, starting from constant `θ⁰`
/// and state. Step indices in errors are offset by `t0`.
#[allow(clippy::too_many_arguments)]
pub fn unroll<R: UpdateRule + ?Sized>(
    g: &mut Graph,
    rule: &R,
    phi: &[NodeRef],
    opt: &Optimizee,
    theta0: &[f64],
    state0: &[f64],
    steps: usize,
    sampler: &mut BatchSampler,
    second_order: bool,
    t0: usize,
) -> Result<Trajectory> {
    let mut theta = g.constants(theta0);
    let mut state = g.constants(state0);
    let mut thetas = Vec::with_capacity(steps + 1);
    let mut losses = Vec::with_capacity(steps);
    let mut inputs = Vec::with_capacity(steps);
    thetas.push(theta.clone());
    for t in 0..steps {
        let batch = sampler.next_batch();
        let diverged = |_| Error::UnrollDiverged(t0 + t);
        let grads = if second_order {
            let l = opt.build_loss(g, &theta, &batch);
            losses.push(g.value(l));
            g.grad(l, &theta).map_err(diverged)?.into_grads()
        } else {
            let (l, gv) = opt.loss_and_grad(&g.values(&theta), &batch).map_err(diverged)?;
            losses.push(l);
            g.constants(&gv)
        };
        inputs.push(g.values(&grads));
        let (delta, next) = rule.step_tape(g, phi, &grads, &state);
        theta = theta.iter().zip(&delta).map(|(&a, &d)| g.add(a, d)).collect();
        state = next;
        if theta.iter().any(|&n| !g.value(n).is_finite()) {
            return Err(Error::UnrollDiverged(t0 + t));
        }
        thetas.push(theta.clone());
    }
    Ok(Trajectory { thetas, losses, inputs, state })
}

/// Detached quantities the outer objective needs at `θ^T`: Hutchinson probes,
/// a power-iteration direction and start vector, and the Langevin entropy gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OuterAux {
    pub probes: Vec<Vec<f64>>,
    pub start: Vec<f64>,
    pub direction: Vec<f64>,
    pub entropy_dir: Vec<f64>,
}

pub fn outer_aux(opt: &Optimizee, theta: &[f64], cfg: &MetaConfig, seed: u64) -> Result<OuterAux> {
    let p = theta.len();
    let mut aux = OuterAux::default();
    if cfg.lambda == 0.0 {
        return Ok(aux);
    }
    match cfg.regularizer {
        Regularizer::None | Regularizer::JacobianTrace => {}
        Regularizer::HessianTrace => aux.probes = rademacher_probes(p, cfg.probes, seed),
        Regularizer::HessianEv => {
            aux.start = power_start(p, seed);
            let mut g = Graph::new();
            let th = g.leaves(theta);
            let l = opt.build_loss(&mut g, &th, &opt.full_batch());
            let grads = g.grad(l, &th)?.into_grads();
            aux.direction = power_iteration(&mut g, &grads, &th, &aux.start, cfg.pi_iters)?.1;
        }
        Regularizer::Entropy => {
            let sg = SgldConfig::new(cfg.gamma, cfg.sgld_steps, seed);
            aux.entropy_dir = sgld_entropy_grad(opt, theta, &opt.full_batch(), &sg)?;
        }
    }
    Ok(aux)
}

#[derive(Clone, Copy, Debug)]
pub struct OuterTerms {
    pub total: NodeRef,
    pub loss: NodeRef,
    /// Logged size of the regularizer; `0` when absent.
    pub reg_value: f64,
}

/// Outer objective at `θ^T`: the full-batch training loss plus `λ` times the
/// configured flatness term. The entropy term is `λ·⟨d, θ^T⟩` with `d` the
/// detached Langevin estimate of `−∇G`, so its gradient through `θ^T` is `λ·d`.
pub fn outer_loss(g: &mut Graph, opt: &Optimizee, theta: &[NodeRef], cfg: &MetaConfig, aux: &OuterAux) -> Result<OuterTerms> {
    let loss = opt.build_loss(g, theta, &opt.full_batch());
    if cfg.regularizer == Regularizer::None || cfg.lambda == 0.0 {
        return Ok(OuterTerms { total: loss, loss, reg_value: 0.0 });
    }
    let reg = match cfg.regularizer {
        Regularizer::None => unreachable!(),
        Regularizer::HessianTrace => {
            let grads = g.grad(loss, theta)?.into_grads();
            hutchinson_node(g, &grads, theta, &aux.probes)?
        }
        Regularizer::JacobianTrace => {
            let grads = g.grad(loss, theta)?.into_grads();
            jacobian_trace_node(g, &grads)
        }
        Regularizer::HessianEv if !cfg.differentiate_power_iteration => {
            let grads = g.grad(loss, theta)?.into_grads();
            rayleigh_node(g, &grads, theta, &aux.direction)?
        }
        Regularizer::HessianEv => {
            let grads = g.grad(loss, theta)?.into_grads();
            let mut v = g.constants(&aux.start);
            let hv_of = |g: &mut Graph, v: &[NodeRef]| -> Result<Vec<NodeRef>> {
                let gv = g.dot(&grads, v);
                Ok(g.grad(gv, theta)?.into_grads())
            };
            for _ in 0..cfg.pi_iters {
                let hv = hv_of(g, &v)?;
                let nn = g.dot(&hv, &hv);
                let n = g.sqrt(nn);
                v = hv.iter().map(|&x| g.div(x, n)).collect();
            }
            let hv = hv_of(g, &v)?;
            g.dot(&v, &hv)
        }
        Regularizer::Entropy => g.weighted_sum(theta, &aux.entropy_dir),
    };
    let reg_value = if cfg.regularizer == Regularizer::Entropy {
        cfg.lambda * crate::flatness::norm(&aux.entropy_dir)
    } else {
        cfg.lambda * g.value(reg)
    };
    let scaled = g.scale(reg, cfg.lambda);
    let total = g.add(loss, scaled);
    Ok(OuterTerms { total, loss, reg_value })
}

/// Meta-gradient of one optimizee instance.
#[derive(Clone, Debug)]
pub struct TaskGradient {
    /// Mean over segments of `∂(outer)/∂φ`.
    pub grad: Vec<f64>,
    /// Outer objective at the final segment.
    pub outer_loss: f64,
    pub reg_term: f64,
    pub final_theta: Vec<f64>,
    /// Largest tape size over segments.
    pub peak_nodes: usize,
    /// Gradients fed to the rule, one entry per inner step.
    pub inputs: Vec<Vec<f64>>,
    /// Detached terms of the last segment's outer objective.
    pub aux: OuterAux,
}

/// Unrolls `unroll_len` steps from `theta0`, cutting the tape every
/// `cfg.truncation` steps. Each segment contributes the gradient of the outer
/// objective at its own final iterate.
pub fn task_meta_gradient<R: UpdateRule + ?Sized>(
    rule: &R,
    phi: &[f64],
    opt: &Optimizee,
    theta0: &[f64],
    cfg: &MetaConfig,
    unroll_len: usize,
    seed: u64,
) -> Result<TaskGradient> {
    let trunc = cfg.truncation_for(unroll_len).max(1);
    let segments = unroll_len.div_ceil(trunc).max(1);
    let mut sampler = cfg.batch.sampler(opt.n_train(), seed)?;
    let mut theta = theta0.to_vec();
    let mut state = vec![0.0; rule.state_len() * theta0.len()];
    let mut grad = vec![0.0; phi.len()];
    let mut out = TaskGradient {
        grad: Vec::new(),
        outer_loss: 0.0,
        reg_term: 0.0,
        final_theta: Vec::new(),
        peak_nodes: 0,
        inputs: Vec::with_capacity(unroll_len),
        aux: OuterAux::default(),
    };
    for s in 0..segments {
        let steps = trunc.min(unroll_len - s * trunc);
        let mut g = Graph::with_capacity(1 << 16);
        let phin = g.leaves(phi);
        let traj = unroll(&mut g, rule, &phin, opt, &theta, &state, steps, &mut sampler, cfg.second_order, s * trunc)?;
        theta = g.values(traj.final_theta());
        state = g.values(&traj.state);
        let aux = outer_aux(opt, &theta, cfg, rng::derive(seed, &[s as u64]))
            .map_err(|_| Error::UnrollDiverged(s * trunc + steps))?;
        let terms = outer_loss(&mut g, opt, traj.final_theta(), cfg, &aux)?;
        let sg = g.backward_values(terms.total, &phin).map_err(|_| Error::UnrollDiverged(s * trunc + steps))?;
        grad.iter_mut().zip(&sg).for_each(|(a, b)| *a += b);
        out.peak_nodes = out.peak_nodes.max(g.len());
        out.outer_loss = g.value(terms.total);
        out.reg_term = terms.reg_value;
        out.inputs.extend(traj.inputs);
        out.aux = aux;
    }
    grad.iter_mut().for_each(|x| *x /= segments as f64);
    out.grad = grad;
    out.final_theta = theta;
    Ok(out)
}

/// Value of the outer objective as a function of `φ` alone, with the detached
/// terms in `aux` held fixed. With `frozen_inputs` the rule sees those
/// gradients instead of recomputing them, which is the objective whose
/// derivative the first-order meta-gradient is.
#[allow(clippy::too_many_arguments)]
pub fn objective_value<R: UpdateRule + ?Sized>(
    rule: &R,
    phi: &[f64],
    opt: &Optimizee,
    theta0: &[f64],
    cfg: &MetaConfig,
    unroll_len: usize,
    seed: u64,
    aux: &OuterAux,
    frozen_inputs: Option<&[Vec<f64>]>,
) -> Result<f64> {
    let mut sampler = cfg.batch.sampler(opt.n_train(), seed)?;
    let mut theta = theta0.to_vec();
    let mut state = vec![0.0; rule.state_len() * theta0.len()];
    for t in 0..unroll_len {
        let batch = sampler.next_batch();
        let z = match frozen_inputs {
            Some(z) => z[t].clone(),
            None => opt.loss_and_grad(&theta, &batch)?.1,
        };
        let d = rule.step_values(phi, &z, &mut state);
        theta.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
    let mut g = Graph::new();
    let th = g.leaves(&theta);
    let terms = outer_loss(&mut g, opt, &th, cfg, aux)?;
    Ok(g.value(terms.total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLogRecord {
    pub step: usize,
    pub outer_loss: f64,
    pub reg_term: f64,
    pub grad_norm_phi: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub phi: Vec<f64>,
    pub log: Vec<MetaLogRecord>,
    pub peak_nodes: usize,
    /// Meta-steps skipped because an unroll diverged.
    pub skipped_steps: usize,
}

const MAX_CONSECUTIVE_DIVERGENCES: usize = 5;

/// Seeds for instance `j` of meta-step `k`.
pub fn task_seed(seed: u64, step: usize, j: usize) -> u64 {
    rng::derive(seed, &[rng::tag::TASK, step as u64, j as u64])
}

pub fn meta_train<R: UpdateRule + ?Sized>(
    rule: &R,
    sampler: &TaskSampler,
    cfg: &MetaConfig,
    sink: Option<&mut dyn Write>,
) -> Result<MetaOutcome> {
    meta_train_from(rule, rule.init_phi(cfg.seed), sampler, cfg, sink)
}

/// Meta-trains starting from `phi`. Each meta-step draws `tasks_per_step`
/// fresh instances and `θ⁰`s, averages their meta-gradients and applies one
/// meta-optimizer update. A step whose unroll diverges is skipped; five in a
/// row abort with [`Error::MetaDiverged`].
pub fn meta_train_from<R: UpdateRule + ?Sized>(
    rule: &R,
    mut phi: Vec<f64>,
    sampler: &TaskSampler,
    cfg: &MetaConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<MetaOutcome> {
    cfg.validate()?;
    if phi.len() != rule.param_count() {
        return Err(Error::DimMismatch { expected: rule.param_count(), found: phi.len() });
    }
    let mut opt_state = BaselineState::new(phi.len(), cfg.seed);
    let mut log = Vec::new();
    let mut peak_nodes = 0;
    let mut skipped = 0;
    let mut consecutive = 0;
    let mut step = 0;
    for stage in cfg.stages() {
        for _ in 0..stage.meta_steps {
            let started = Instant::now();
            let results: Vec<Result<TaskGradient>> = (0..cfg.tasks_per_step)
                .into_par_iter()
                .map(|j| {
                    let ts = task_seed(cfg.seed, step, j);
                    let opt = sampler.instantiate(ts)?;
                    let theta0 = opt.init_theta(&mut rng::stream(ts, 0, rng::tag::INIT));
                    task_meta_gradient(rule, &phi, &opt, &theta0, cfg, stage.unroll, ts)
                })
                .collect();
            let mut grads = Vec::with_capacity(results.len());
            let mut diverged = false;
            for r in results {
                match r {
                    Ok(tg) if tg.grad.iter().all(|x| x.is_finite()) => grads.push(tg),
                    Ok(_) | Err(Error::UnrollDiverged(_)) | Err(Error::NonFinite { .. }) | Err(Error::ChainDiverged { .. }) => {
                        diverged = true
                    }
                    Err(e) => return Err(e),
                }
            }
            if diverged {
                skipped += 1;
                consecutive += 1;
                if consecutive >= MAX_CONSECUTIVE_DIVERGENCES {
                    return Err(Error::MetaDiverged(step));
                }
                step += 1;
                continue;
            }
            consecutive = 0;
            let n = grads.len() as f64;
            let mut mg = vec![0.0; phi.len()];
            for tg in &grads {
                mg.iter_mut().zip(&tg.grad).for_each(|(a, b)| *a += b / n);
                peak_nodes = peak_nodes.max(tg.peak_nodes);
            }
            let mut gn = crate::flatness::norm(&mg);
            if let Some(c) = cfg.grad_clip {
                if gn > c {
                    mg.iter_mut().for_each(|x| *x *= c / gn);
                    gn = c;
                }
            }
            opt_state.t += 1;
            let dir = match cfg.meta_optimizer {
                MetaOptimizerKind::Adam => adam_direction(&mut opt_state, &mg, 0.9, cfg.meta_beta2, 1e-8),
                MetaOptimizerKind::Rmsprop => rmsprop_direction(&mut opt_state, &mg, cfg.meta_beta2, 1e-8),
            };
            phi.iter_mut().zip(&dir).for_each(|(p, d)| *p -= cfg.meta_lr * d);
            let rec = MetaLogRecord {
                step,
                outer_loss: grads.iter().map(|t| t.outer_loss).sum::<f64>() / n,
                reg_term: grads.iter().map(|t| t.reg_term).sum::<f64>() / n,
                grad_norm_phi: gn,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            if let Some(w) = sink.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            log.push(rec);
            step += 1;
        }
    }
    Ok(MetaOutcome { phi, log, peak_nodes, skipped_steps: skipped })
}

/// Inference-only driver of a frozen rule.
pub struct L2oRunner<'a, R: UpdateRule + ?Sized> {
    rule: &'a R,
    phi: &'a [f64],
    state: Vec<f64>,
}

impl<'a, R: UpdateRule + ?Sized> L2oRunner<'a, R> {
    pub fn new(rule: &'a R, phi: &'a [f64], p: usize) -> Self {
        Self { rule, phi, state: vec![0.0; rule.state_len() * p] }
    }

    /// `θ + m(∇L̂(θ); φ)` on the given batch.
    pub fn step(&mut self, opt: &Optimizee, theta: &[f64], batch: &crate::optimizees::Batch) -> Result<Vec<f64>> {
        let (_, g) = opt.loss_and_grad(theta, batch)?;
        let d = self.rule.step_values(self.phi, &g, &mut self.state);
        let next: Vec<f64> = theta.iter().zip(&d).map(|(a, b)| a + b).collect();
        if let Some(i) = next.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { node: i });
        }
        Ok(next)
    }
}

/// One meta-test replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct TestRun {
    pub seed: u64,
    /// Full-batch training loss at `θ⁰..θ^iters` (shorter if the run diverged).
    pub train_loss: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub final_theta: Vec<f64>,
    pub diverged_at: Option<usize>,
    pub flatness: Option<FlatnessReport>,
}

/// Runs the frozen rule for `iters` steps from each seed's `θ⁰`.
#[allow(clippy::too_many_arguments)]
pub fn meta_test<R: UpdateRule + ?Sized>(
    rule: &R,
    phi: &[f64],
    opt: &Optimizee,
    iters: usize,
    seeds: &[u64],
    schedule: &BatchSchedule,
    flatness: Option<&FlatnessOptions>,
) -> Result<Vec<TestRun>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut theta = opt.init_theta(&mut rng::stream(seed, 0, rng::tag::INIT));
            let mut sampler = schedule.sampler(opt.n_train(), seed)?;
            let mut runner = L2oRunner::new(rule, phi, theta.len());
            let full = opt.full_batch();
            let mut train_loss = vec![opt.loss(&theta, &full)?];
            let mut diverged_at = None;
            for t in 0..iters {
                let b = sampler.next_batch();
                match runner.step(opt, &theta, &b).and_then(|n| opt.loss(&n, &full).map(|l| (n, l))) {
                    Ok((n, l)) => {
                        theta = n;
                        train_loss.push(l);
                    }
                    Err(_) => {
                        log::warn!("seed {seed}: {}", Error::UnrollDiverged(t));
                        diverged_at = Some(t);
                        break;
                    }
                }
            }
            let flatness = match (flatness, diverged_at) {
                (Some(o), None) => Some(flatness_report(opt, &theta, &full, o, seed)?),
                _ => None,
            };
            Ok(TestRun { seed, train_loss, test_accuracy: opt.test_accuracy(&theta), final_theta: theta, diverged_at, flatness })
        })
        .collect()
}
