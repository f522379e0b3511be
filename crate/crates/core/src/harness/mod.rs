//! Experiment orchestration: config parsing, seeded replicates, baseline
//! sweeps, CSV/JSON emission, summaries, verification suites and comparison.

mod compare;
mod config;
mod records;
mod verify;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

pub use compare::{compare, Comparison, ComparisonRow, REFERENCE_ACCURACY, REFERENCE_SECONDS_PER_ITER};
pub use config::{BaselineSpec, ExperimentConfig, LearnedSpec, MetaTestSpec, OptimizerSpec, RuleKind};
pub use records::{read_runs_csv, summarize, MetricStats, RunRecord, Summary, SummaryRow, CSV_HEADER, METRICS};
pub use verify::{verify_suite, Suite, SuiteCase, SuiteReport};

use crate::baselines::{baseline_step, is_diverged, run_baseline, BaselineConfig, BaselineState};
use crate::error::{Error, Result};
use crate::flatness::flatness_report;
use crate::learned_optimizer::{load_phi, save_phi, UpdateRule};
use crate::meta::{meta_train, L2oRunner};
use crate::optimizees::{BatchSchedule, Optimizee};
use crate::rng;

pub const THREADS_ENV: &str = "FLATL2O_THREADS";

/// Worker pool sized by `FLATL2O_THREADS`, else by available parallelism.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Iterations at which a run of `iters` steps is logged: every step up to
/// 1000, otherwise every `⌈iters/1000⌉`, always including 0 and `iters`.
pub fn logged_iters(iters: usize) -> Vec<usize> {
    let every = if iters <= 1000 { 1 } else { iters.div_ceil(1000) };
    let mut out: Vec<usize> = (0..=iters).step_by(every).collect();
    if *out.last().unwrap() != iters {
        out.push(iters);
    }
    out
}

/// Command-line overrides for [`run_experiment`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seeds: Option<usize>,
    pub log_flatness: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub summary: Summary,
    pub phi: Option<Vec<f64>>,
    /// Learning rate picked by the sweep, if one ran.
    pub best_lr: Option<f64>,
}

/// Sweep result for one `(lr, seed)` pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lr: f64,
    pub seed: u64,
    pub final_train_loss: f64,
    pub diverged: bool,
}

/// Runs an experiment end to end and writes `runs.csv`, `summary.json` and
/// `config-echo.json` (plus `train_log.jsonl` and `phi.bin` for learned
/// optimizers, `sweep.csv` for baseline sweeps) into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let mut cfg = cfg.clone();
    if let Some(n) = opts.seeds {
        cfg.meta_test.seeds = n;
    }
    cfg.validate()?;
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config-echo.json"), cfg.to_json() + "\n")?;
    let pool = thread_pool()?;
    pool.install(|| run_in_pool(&cfg, opts, out_dir))
}

fn run_in_pool(cfg: &ExperimentConfig, opts: &RunOptions, out_dir: PathBuf) -> Result<ExperimentOutcome> {
    let sampler = cfg.task.sampler().map_err(|e| match e {
        Error::Io(_) | Error::InvalidConfig(_) => Error::InvalidConfig(e.to_string()),
        other => other,
    })?;
    let instance = sampler.instantiate(cfg.instance_seed())?;
    let seeds = cfg.replicate_seeds();
    let method = cfg.optimizer.method_name(&cfg.meta);
    let (records, phi, best_lr) = match &cfg.optimizer {
        OptimizerSpec::Learned(spec) => {
            let rule = spec.build();
            let phi = match &spec.checkpoint {
                Some(p) => {
                    let phi = load_phi(p)?;
                    if phi.len() != rule.param_count() {
                        return Err(Error::InvalidConfig(format!(
                            "checkpoint holds {} parameters, rule needs {}",
                            phi.len(),
                            rule.param_count()
                        )));
                    }
                    phi
                }
                None => {
                    let mut log = BufWriter::new(fs::File::create(out_dir.join("train_log.jsonl"))?);
                    let out = meta_train(rule.as_ref(), &sampler, &cfg.meta, Some(&mut log))?;
                    log.flush()?;
                    out.phi
                }
            };
            save_phi(&out_dir.join("phi.bin"), &phi)?;
            let recs = replicate_runs(cfg, opts, &instance, &seeds, &|| Stepper::Learned(L2oRunner::new(rule.as_ref(), &phi, instance.param_dim())))?;
            (recs, Some(phi), None)
        }
        OptimizerSpec::Baseline(spec) => {
            let mut bc = spec.config.clone();
            let mut best = None;
            if let Some(grid) = &spec.lr_grid {
                let budget = spec.grid_budget.unwrap_or(cfg.meta_test.iters);
                let rows = sweep(&bc, &instance, grid, budget, &seeds, &cfg.meta_test.batch)?;
                write_sweep(&out_dir.join("sweep.csv"), &rows)?;
                let lr = best_lr_of(grid, &rows)?;
                bc.lr = lr;
                best = Some(lr);
            }
            let recs = replicate_runs(cfg, opts, &instance, &seeds, &|| Stepper::Baseline(bc.clone(), None))?;
            (recs, None, best)
        }
    };
    records::write_runs_csv(&out_dir.join("runs.csv"), &records)?;
    let summary = summarize(&cfg.name, &method, &records)?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(ExperimentOutcome { out_dir, records, summary, phi, best_lr })
}

enum Stepper<'a> {
    Learned(L2oRunner<'a, dyn UpdateRule + 'a>),
    Baseline(BaselineConfig, Option<BaselineState>),
}

impl Stepper<'_> {
    fn step(&mut self, opt: &Optimizee, theta: &[f64], batch: &crate::optimizees::Batch, seed: u64) -> Result<Vec<f64>> {
        match self {
            Stepper::Learned(r) => r.step(opt, theta, batch),
            Stepper::Baseline(cfg, st) => {
                let state = st.take().unwrap_or_else(|| BaselineState::new(theta.len(), seed));
                let (next, s) = baseline_step(cfg, opt, theta, &state, batch)?;
                *st = Some(s);
                Ok(next)
            }
        }
    }
}

fn replicate_runs<'a>(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    opt: &Optimizee,
    seeds: &[u64],
    make: &(dyn Fn() -> Stepper<'a> + Sync),
) -> Result<Vec<RunRecord>> {
    let per_seed: Vec<Result<Vec<RunRecord>>> = seeds
        .par_iter()
        .map(|&seed| run_replicate(cfg, opts, opt, seed, make()))
        .collect();
    let mut all = Vec::new();
    for r in per_seed {
        all.extend(r?);
    }
    all.sort_by_key(|r| (r.seed, r.iter));
    Ok(all)
}

fn run_replicate(cfg: &ExperimentConfig, opts: &RunOptions, opt: &Optimizee, seed: u64, mut stepper: Stepper<'_>) -> Result<Vec<RunRecord>> {
    let iters = cfg.meta_test.iters;
    let logged = logged_iters(iters);
    let full = opt.full_batch();
    let fopts = &cfg.meta_test.flatness;
    let started = Instant::now();
    let mut sampler = cfg.meta_test.batch.sampler(opt.n_train(), seed)?;
    let mut theta = opt.init_theta(&mut rng::stream(seed, 0, rng::tag::INIT));
    let mut out = Vec::with_capacity(logged.len());
    let mut next_log = 0;
    let record = |t: usize, theta: &[f64], with_flatness: bool| -> Result<RunRecord> {
        let train_loss = opt.loss(theta, &full)?;
        let flat = if with_flatness {
            flatness_report(opt, theta, &full, fopts, rng::derive(seed, &[t as u64]))
                .map_err(|e| log::warn!("seed {seed}, iter {t}: flatness skipped: {e}"))
                .ok()
        } else {
            None
        };
        Ok(RunRecord {
            seed,
            iter: t,
            train_loss,
            test_accuracy: opt.test_accuracy(theta).unwrap_or(-1.0),
            hutchinson_trace: flat.as_ref().map(|f| f.hutchinson_trace),
            top_abs_eig: flat.as_ref().map(|f| f.top_abs_eig),
            jacobian_trace: flat.as_ref().map(|f| f.jacobian_trace),
            entropy_grad_norm: flat.as_ref().map(|f| f.entropy_grad_norm()),
            wall_ms: if cfg.timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
        })
    };
    for t in 0..=iters {
        if logged.get(next_log) == Some(&t) {
            match record(t, &theta, t == iters || opts.log_flatness) {
                Ok(r) => out.push(r),
                Err(e) => {
                    log::warn!("seed {seed}: {} ({e})", Error::UnrollDiverged(t));
                    break;
                }
            }
            next_log += 1;
        }
        if t == iters {
            break;
        }
        let b = sampler.next_batch();
        match stepper.step(opt, &theta, &b, seed) {
            Ok(n) => theta = n,
            Err(e) => {
                log::warn!("seed {seed}: {} ({e})", Error::UnrollDiverged(t));
                break;
            }
        }
    }
    Ok(out)
}

fn sweep(cfg: &BaselineConfig, opt: &Optimizee, grid: &[f64], budget: usize, seeds: &[u64], schedule: &BatchSchedule) -> Result<Vec<SweepRow>> {
    let full = opt.full_batch();
    let pairs: Vec<(f64, u64)> = grid.iter().flat_map(|&lr| seeds.iter().map(move |&s| (lr, s))).collect();
    pairs
        .par_iter()
        .map(|&(lr, seed)| {
            let c = BaselineConfig { lr, ..cfg.clone() };
            c.validate()?;
            let theta0 = opt.init_theta(&mut rng::stream(seed, 0, rng::tag::INIT));
            let l0 = opt.loss(&theta0, &full)?;
            let lt = run_baseline(&c, opt, &theta0, budget, schedule, seed).map_or(f64::NAN, |(_, l)| l);
            Ok(SweepRow { lr, seed, final_train_loss: lt, diverged: is_diverged(l0, lt) })
        })
        .collect()
}

fn best_lr_of(grid: &[f64], rows: &[SweepRow]) -> Result<f64> {
    grid.iter()
        .filter_map(|&lr| {
            let rs: Vec<&SweepRow> = rows.iter().filter(|r| r.lr == lr).collect();
            if rs.iter().any(|r| r.diverged) {
                return None;
            }
            Some((lr, rs.iter().map(|r| r.final_train_loss).sum::<f64>() / rs.len() as f64))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(lr, _)| lr)
        .ok_or(Error::AllDiverged)
}

fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "lr,seed,final_train_loss,diverged")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.lr, r.seed, r.final_train_loss, r.diverged)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logging_cadence() {
        assert_eq!(logged_iters(3), vec![0, 1, 2, 3]);
        assert_eq!(logged_iters(1000).len(), 1001);
        let l = logged_iters(10_000);
        assert_eq!((l[1], l.len(), *l.last().unwrap()), (10, 1001, 10_000));
        let l = logged_iters(2500);
        assert_eq!(l[1], 3);
        assert_eq!(*l.last().unwrap(), 2500);
        assert!(l.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn best_lr_skips_diverged_candidates() {
        let rows = vec![
            SweepRow { lr: 1.0, seed: 0, final_train_loss: 0.0, diverged: true },
            SweepRow { lr: 0.1, seed: 0, final_train_loss: 0.5, diverged: false },
            SweepRow { lr: 0.01, seed: 0, final_train_loss: 0.9, diverged: false },
        ];
        assert_eq!(best_lr_of(&[1.0, 0.1, 0.01], &rows).unwrap(), 0.1);
        assert!(matches!(best_lr_of(&[1.0], &rows[..1]), Err(Error::AllDiverged)));
    }
}
