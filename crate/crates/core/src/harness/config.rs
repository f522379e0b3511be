use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::flatness::FlatnessOptions;
use crate::learned_optimizer::{LinearRule, LstmRule, MomentumTanhRule, UpdateRule, DEFAULT_OUTPUT_SCALE, DEFAULT_P_TILDE};
use crate::meta::MetaConfig;
use crate::optimizees::{BatchSchedule, TaskSpec};

/// Parametric family of the learned update rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    #[default]
    Lstm,
    Linear,
    MomentumTanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnedSpec {
    pub rule: RuleKind,
    pub p_tilde: f64,
    pub output_scale: f64,
    /// Skip meta-training and load `φ` from this checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for LearnedSpec {
    fn default() -> Self {
        Self { rule: RuleKind::Lstm, p_tilde: DEFAULT_P_TILDE, output_scale: DEFAULT_OUTPUT_SCALE, checkpoint: None }
    }
}

impl LearnedSpec {
    pub fn build(&self) -> Box<dyn UpdateRule> {
        match self.rule {
            RuleKind::Lstm => Box::new(LstmRule { p_tilde: self.p_tilde, scale: self.output_scale, ..LstmRule::default() }),
            RuleKind::Linear => Box::new(LinearRule::default()),
            RuleKind::MomentumTanh => Box::new(MomentumTanhRule),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub config: BaselineConfig,
    /// Learning rates to sweep before the replicate runs; the best one is used.
    #[serde(default)]
    pub lr_grid: Option<Vec<f64>>,
    /// Steps per sweep run; defaults to the meta-test budget.
    #[serde(default)]
    pub grid_budget: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Learned(LearnedSpec),
    Baseline(BaselineSpec),
}

impl OptimizerSpec {
    pub fn method_name(&self, meta: &MetaConfig) -> String {
        match self {
            OptimizerSpec::Learned(_) if meta.regularizer == crate::meta::Regularizer::None => "l2o".into(),
            OptimizerSpec::Learned(_) => format!("l2o+{}", meta.regularizer.name()),
            OptimizerSpec::Baseline(b) => b.config.kind.name().into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTestSpec {
    pub iters: usize,
    pub seeds: usize,
    pub batch: BatchSchedule,
    /// Seed of the held-out optimizee instance; derived from the experiment seed if absent.
    pub instance_seed: Option<u64>,
    pub flatness: FlatnessOptions,
}

impl Default for MetaTestSpec {
    fn default() -> Self {
        Self { iters: 10_000, seeds: 10, batch: BatchSchedule::full(), instance_seed: None, flatness: FlatnessOptions::default() }
    }
}

/// One experiment: a task family, an optimizer (learned or hand-designed)
/// and the meta-test protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub meta_test: MetaTestSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Record wall-clock time in `runs.csv`. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every field and referenced file. All failures map to [`Error::InvalidConfig`].
    pub fn validate(&self) -> Result<()> {
        let invalid = |e: Error| match e {
            Error::InvalidConfig(_) => e,
            other => Error::InvalidConfig(other.to_string()),
        };
        self.task.validate().map_err(invalid)?;
        if self.meta_test.iters == 0 || self.meta_test.seeds == 0 {
            return Err(Error::InvalidConfig("meta_test.iters and meta_test.seeds must be >= 1".into()));
        }
        if self.meta_test.batch.batch_size == Some(0) {
            return Err(Error::InvalidConfig("meta_test.batch.batch_size must be >= 1".into()));
        }
        let f = &self.meta_test.flatness;
        if f.probes == 0 || f.pi_iters == 0 || !(f.gamma > 0.0) || f.sgld_steps < 2 {
            return Err(Error::InvalidConfig("meta_test.flatness needs probes, pi_iters >= 1, gamma > 0, sgld_steps >= 2".into()));
        }
        match &self.optimizer {
            OptimizerSpec::Learned(l) => {
                self.meta.validate()?;
                if !(l.p_tilde > 0.0) || !(l.output_scale > 0.0) {
                    return Err(Error::InvalidConfig("p_tilde and output_scale must be > 0".into()));
                }
                if let Some(p) = &l.checkpoint {
                    if !p.exists() {
                        return Err(Error::InvalidConfig(format!("checkpoint not found: {}", p.display())));
                    }
                }
            }
            OptimizerSpec::Baseline(b) => {
                b.config.validate()?;
                if let Some(g) = &b.lr_grid {
                    if g.is_empty() || g.iter().any(|lr| !(*lr > 0.0)) {
                        return Err(Error::InvalidConfig("lr_grid must be non-empty with positive entries".into()));
                    }
                }
                if b.grid_budget == Some(0) {
                    return Err(Error::InvalidConfig("grid_budget must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Replicate seeds `seed, seed+1, …`.
    pub fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.meta_test.seeds as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }

    pub fn instance_seed(&self) -> u64 {
        self.meta_test.instance_seed.unwrap_or_else(|| crate::rng::derive(self.seed, &[crate::rng::tag::TASK, u64::MAX]))
    }
}
