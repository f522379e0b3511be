//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr (not captured by the test harness), then asserts.
//! Heavy criteria take a shared lock so their timings are not inflated by
//! each other.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use flatl2o::autodiff::{finite_difference_grad, max_relative_error};
use flatl2o::baselines::{run_baseline, BaselineConfig};
use flatl2o::harness::{run_experiment, verify_suite, ExperimentConfig, RunOptions, Suite, SuiteReport};
use flatl2o::learned_optimizer::{LinearRule, LstmRule, MomentumTanhRule, UpdateRule};
use flatl2o::meta::{meta_test, meta_train, objective_value, task_meta_gradient, MetaConfig, Regularizer};
use flatl2o::optimizees::{make_blobs, make_quadratic_family, make_tiny_mlp, Activation, BatchSchedule, TaskSpec};
use flatl2o::rng;

static HEAVY: Mutex<()> = Mutex::new(());

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn suite_criterion(n: u32, suite: Suite, budget_s: f64) {
    let t = Instant::now();
    let r: SuiteReport = verify_suite(suite).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = r.failures().map(|c| c.name.clone()).collect::<Vec<_>>();
    let pass = r.passed && secs <= budget_s;
    report(n, pass, &format!("{suite}: {} cases, failures {worst:?}, {secs:.2} s of {budget_s} s", r.cases.len()));
    assert!(pass);
}

#[test]
fn criterion_1_gradcheck() {
    suite_criterion(1, Suite::Gradcheck, 30.0);
}

#[test]
fn criterion_2_estimators() {
    suite_criterion(2, Suite::Estimators, 10.0);
}

#[test]
fn criterion_3_local_entropy() {
    suite_criterion(3, Suite::Eq5, 60.0);
}

#[test]
fn criterion_4_entropy_hessian_bound() {
    let t = Instant::now();
    let r = verify_suite(Suite::Theorem1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = r.passed && r.cases.len() == 45 && secs <= 30.0;
    report(4, pass, &format!("{} of 45 grid cases hold, {secs:.2} s", r.cases.iter().filter(|c| c.passed).count()));
    assert!(pass);
}

#[test]
fn criterion_5_meta_gradient() {
    let t = Instant::now();
    let q = make_quadratic_family(1, (1.0, 1.0), 0).unwrap();
    let lin = MetaConfig { unroll: 1, meta_steps: 1, ..MetaConfig::default() };
    let g = task_meta_gradient(&LinearRule::default(), &[0.5], &q, &[1.0], &lin, 1, 0).unwrap().grad[0];
    let lin_ok = (g + 0.5).abs() <= 1e-8;

    let m = make_tiny_mlp(&[2, 3, 2], Activation::Sigmoid, std::sync::Arc::new(make_blobs(8, 4, 2.0, 1.0, 5))).unwrap();
    let rule = MomentumTanhRule;
    let phi = rule.init_phi(0);
    assert!(phi.len() <= 5);
    let theta0 = m.init_theta(&mut rng::from_seed(3));
    let mut worst = 0.0f64;
    for reg in [Regularizer::HessianTrace, Regularizer::HessianEv, Regularizer::JacobianTrace, Regularizer::Entropy] {
        let c = MetaConfig { regularizer: reg, lambda: 0.5, unroll: 3, meta_steps: 1, ..MetaConfig::default() };
        let tg = task_meta_gradient(&rule, &phi, &m, &theta0, &c, 3, 9).unwrap();
        let f = |p: &[f64]| objective_value(&rule, p, &m, &theta0, &c, 3, 9, &tg.aux, None).unwrap();
        worst = worst.max(max_relative_error(&tg.grad, &finite_difference_grad(f, &phi, 1e-6), 1e-7));
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = lin_ok && worst <= 1e-4 && secs <= 60.0;
    report(5, pass, &format!("linear rule {g:.12}, worst FD rel err {worst:.2e} over 4 regularizers, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn criterion_6_trace_penalty_is_inert_on_quadratics() {
    let rule = LstmRule::default();
    let phi = rule.init_phi(1);
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let q = make_quadratic_family(6, (0.5, 2.0), seed).unwrap();
        let th = q.init_theta(&mut rng::from_seed(seed));
        let base = MetaConfig { unroll: 5, meta_steps: 1, ..MetaConfig::default() };
        let reg = MetaConfig { regularizer: Regularizer::HessianTrace, lambda: 1e-2, ..base.clone() };
        let a = task_meta_gradient(&rule, &phi, &q, &th, &base, 5, seed).unwrap().grad;
        let b = task_meta_gradient(&rule, &phi, &q, &th, &reg, 5, seed).unwrap().grad;
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let pass = worst <= 1e-8;
    report(6, pass, &format!("max |difference| {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_7_beats_tuned_sgd_on_quadratics() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let spec = TaskSpec::Quadratic { p: 10, eig_range: (0.5, 2.0), samples: 1, test_samples: 0 };
    let sampler = spec.sampler().unwrap();
    let cfg = MetaConfig::desk();
    assert_eq!((cfg.unroll, cfg.meta_steps), (20, 500));
    let rule = LstmRule::default();
    let phi = meta_train(&rule, &sampler, &cfg, None).unwrap().phi;

    // Held-out instance i and its θ⁰ are shared by the learned optimizer and every SGD candidate.
    let grid = [0.01, 0.03, 0.1, 0.3];
    let mut l2o = 0.0;
    let mut sgd = [0.0; 4];
    for i in 0..100u64 {
        let opt = sampler.instantiate(rng::derive(12345, &[i])).unwrap();
        let run = meta_test(&rule, &phi, &opt, 20, &[i], &BatchSchedule::full(), None).unwrap();
        l2o += run[0].train_loss.last().unwrap() / 100.0;
        let th0 = opt.init_theta(&mut rng::stream(i, 0, rng::tag::INIT));
        for (k, &lr) in grid.iter().enumerate() {
            sgd[k] += run_baseline(&BaselineConfig::sgd(lr), &opt, &th0, 20, &BatchSchedule::full(), 0).unwrap().1 / 100.0;
        }
    }
    let (best_k, best) = sgd.iter().enumerate().fold((0, f64::INFINITY), |a, (k, &v)| if v < a.1 { (k, v) } else { a });
    let secs = t.elapsed().as_secs_f64();
    let pass = l2o < best && secs <= 300.0;
    report(
        7,
        pass,
        &format!("learned {l2o:.3e} vs SGD lr={} {best:.3e} (ratio {:.3}), {secs:.0} s", grid[best_k], l2o / best),
    );
    assert!(pass);
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn final_median(out: &flatl2o::harness::ExperimentOutcome, metric: &str) -> f64 {
    out.summary.final_[metric].median
}

#[test]
fn criterion_8_flatness_regularizers() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = ExperimentConfig::load(&configs_dir().join(format!("{name}.json"))).unwrap();
        assert_eq!((cfg.meta_test.seeds, cfg.meta.lambda), (10, 1e-2));
        run_experiment(&cfg, &RunOptions { out_dir: Some(tmp.path().join(name)), ..RunOptions::default() }).unwrap()
    };
    let plain = run("blobs_l2o");
    let hess = run("blobs_l2o_hessian");
    let ent = run("blobs_l2o_entropy");
    let acc = |o| final_median(o, "test_accuracy");
    let ht_ok = final_median(&hess, "hutchinson_trace") < final_median(&plain, "hutchinson_trace") && acc(&hess) >= acc(&plain);
    let ent_ok =
        final_median(&ent, "entropy_grad_norm") < final_median(&plain, "entropy_grad_norm") && acc(&ent) >= acc(&plain);
    let secs = t.elapsed().as_secs_f64();
    let pass = ht_ok && ent_ok && secs <= 900.0;
    report(
        8,
        pass,
        &format!(
            "hessian_trace arm {}: trace {:.4} vs {:.4}, acc {:.3} vs {:.3}; entropy arm {}: grad norm {:.4} vs {:.4}, acc {:.3} vs {:.3}; {secs:.0} s",
            if ht_ok { "ok" } else { "not met" },
            final_median(&hess, "hutchinson_trace"),
            final_median(&plain, "hutchinson_trace"),
            acc(&hess),
            acc(&plain),
            if ent_ok { "ok" } else { "not met" },
            final_median(&ent, "entropy_grad_norm"),
            final_median(&plain, "entropy_grad_norm"),
            acc(&ent),
            acc(&plain),
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_reruns_are_byte_identical() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let tmp = tempfile::tempdir().unwrap();
    let mut same = Vec::new();
    for name in ["quadratic_sgd", "blobs_sgd", "blobs_l2o_entropy"] {
        let mut cfg = ExperimentConfig::load(&configs_dir().join(format!("{name}.json"))).unwrap();
        cfg.meta.meta_steps = cfg.meta.meta_steps.min(10);
        cfg.meta.curriculum = None;
        cfg.meta_test.iters = cfg.meta_test.iters.min(50);
        cfg.timing = false;
        let bytes: Vec<Vec<u8>> = ["a", "b"]
            .iter()
            .map(|r| {
                let dir = tmp.path().join(name).join(r);
                let o = RunOptions { out_dir: Some(dir.clone()), seeds: Some(4), log_flatness: true };
                run_experiment(&cfg, &o).unwrap();
                std::fs::read(dir.join("runs.csv")).unwrap()
            })
            .collect();
        same.push((name, bytes[0] == bytes[1] && !bytes[0].is_empty()));
    }
    let pass = same.iter().all(|s| s.1);
    report(9, pass, &format!("runs.csv identical on rerun: {same:?}"));
    assert!(pass);
}
