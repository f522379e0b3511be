//! Optimizee zoo: quadratic family, Rosenbrock, logistic regression and tiny
//! MLP classifiers, plus dataset generation and IDX ingestion.

mod batch;
mod dataset;
pub mod idx;
mod tasks;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use batch::{Batch, BatchSampler, BatchSchedule, Sampling};
pub use dataset::{make_blobs, Dataset, Label, LabelKind, Sample};
pub use idx::load_idx;
pub use tasks::{
    make_logistic, make_quadratic_family, make_quadratic_family_with, make_rosenbrock, make_tiny_mlp, Activation,
    InitSampler, Optimizee, OptimizeeKind,
};

use crate::error::{Error, Result};

/// Declarative dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Regenerated from the instance seed each time a task is drawn.
    Blobs { n_train: usize, n_test: usize, separation: f64, noise_sd: f64 },
    /// Training split from IDX files; optional test split from a second pair.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: usize,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// CSV files written by `ingest-idx` (`label,f0,f1,...`).
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let exists = |p: &PathBuf| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("file not found: {}", p.display())))
            }
        };
        match self {
            DatasetSpec::Blobs { n_train, noise_sd, separation, .. } => {
                if *n_train < 2 {
                    return Err(Error::InvalidConfig("blobs.n_train must be >= 2".into()));
                }
                if !(*noise_sd > 0.0) || !separation.is_finite() {
                    return Err(Error::InvalidConfig("blobs.noise_sd must be > 0".into()));
                }
                Ok(())
            }
            DatasetSpec::Idx { images, labels, test_images, test_labels, .. } => {
                exists(images)?;
                exists(labels)?;
                match (test_images, test_labels) {
                    (Some(i), Some(l)) => {
                        exists(i)?;
                        exists(l)
                    }
                    (None, None) => Ok(()),
                    _ => Err(Error::InvalidConfig("idx test split needs both test_images and test_labels".into())),
                }
            }
            DatasetSpec::Csv { train, test } => {
                exists(train)?;
                test.as_ref().map_or(Ok(()), exists)
            }
        }
    }

    fn load_fixed(&self) -> Result<Option<Arc<Dataset>>> {
        Ok(match self {
            DatasetSpec::Blobs { .. } => None,
            DatasetSpec::Idx { images, labels, limit, test_images, test_labels, test_limit } => {
                let mut d = load_idx(images, labels, *limit)?;
                if let (Some(ti), Some(tl)) = (test_images, test_labels) {
                    let t = load_idx(ti, tl, test_limit.unwrap_or(usize::MAX))?;
                    if t.feature_dim != d.feature_dim {
                        return Err(Error::ArchMismatch("IDX train/test image sizes differ".into()));
                    }
                    d.test = t.train;
                    if let (LabelKind::Class { classes: a }, LabelKind::Class { classes: b }) = (d.label_kind, t.label_kind) {
                        d.label_kind = LabelKind::Class { classes: a.max(b) };
                    }
                }
                Some(Arc::new(d))
            }
            DatasetSpec::Csv { train, test } => {
                let tr = Dataset::read_csv(train)?;
                let ts = match test {
                    Some(p) => Dataset::read_csv(p)?,
                    None => Vec::new(),
                };
                Some(Arc::new(Dataset::from_splits(tr, ts)?))
            }
        })
    }
}

fn default_samples() -> usize {
    1
}

/// Declarative task description; [`TaskSpec::sampler`] turns it into instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Quadratic {
        p: usize,
        eig_range: (f64, f64),
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default)]
        test_samples: usize,
    },
    Rosenbrock { p: usize },
    Logistic { dataset: DatasetSpec },
    Mlp { arch: Vec<usize>, activation: Activation, dataset: DatasetSpec },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Quadratic { p, eig_range: (lo, hi), samples, .. } => {
                if *p == 0 || *samples == 0 {
                    return Err(Error::InvalidConfig("quadratic needs p >= 1 and samples >= 1".into()));
                }
                if !(*lo > 0.0 && lo <= hi) {
                    return Err(Error::InvalidSpectrum { lo: *lo, hi: *hi });
                }
                Ok(())
            }
            TaskSpec::Rosenbrock { p } if *p < 2 => Err(Error::InvalidConfig("rosenbrock needs p >= 2".into())),
            TaskSpec::Rosenbrock { .. } => Ok(()),
            TaskSpec::Logistic { dataset } => dataset.validate(),
            TaskSpec::Mlp { arch, dataset, .. } => {
                if arch.len() < 2 {
                    return Err(Error::InvalidConfig("mlp.arch needs at least two layers".into()));
                }
                dataset.validate()
            }
        }
    }

    pub fn sampler(&self) -> Result<TaskSampler> {
        let fixed = match self {
            TaskSpec::Logistic { dataset } | TaskSpec::Mlp { dataset, .. } => dataset.load_fixed()?,
            _ => None,
        };
        Ok(TaskSampler { spec: self.clone(), fixed })
    }
}

/// Draws optimizee instances from a [`TaskSpec`]. File-backed datasets are
/// loaded once and shared.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    spec: TaskSpec,
    fixed: Option<Arc<Dataset>>,
}

impl TaskSampler {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn instantiate(&self, seed: u64) -> Result<Optimizee> {
        let data = |spec: &DatasetSpec| -> Arc<Dataset> {
            match (spec, &self.fixed) {
                (DatasetSpec::Blobs { n_train, n_test, separation, noise_sd }, _) => {
                    Arc::new(make_blobs(*n_train, *n_test, *separation, *noise_sd, seed))
                }
                (_, Some(d)) => Arc::clone(d),
                (_, None) => unreachable!("file dataset loaded at sampler construction"),
            }
        };
        match &self.spec {
            TaskSpec::Quadratic { p, eig_range, samples, test_samples } => {
                make_quadratic_family_with(*p, *eig_range, *samples, *test_samples, seed)
            }
            TaskSpec::Rosenbrock { p } => make_rosenbrock(*p),
            TaskSpec::Logistic { dataset } => make_logistic(data(dataset)),
            TaskSpec::Mlp { arch, activation, dataset } => make_tiny_mlp(arch, *activation, data(dataset)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_grad, max_relative_error, Graph};
    use crate::rng;

    fn blobs(sep: f64, noise: f64, seed: u64) -> Arc<Dataset> {
        Arc::new(make_blobs(40, 40, sep, noise, seed))
    }

    #[test]
    fn quadratic_unit_scalar() {
        let q = make_quadratic_family(1, (1.0, 1.0), 0).unwrap();
        assert_eq!(q.loss(&[0.0], &q.full_batch()).unwrap(), 0.0);
        assert_eq!(q.loss(&[2.0], &q.full_batch()).unwrap(), 2.0);
    }

    #[test]
    fn quadratic_with_degenerate_spectrum_has_scaled_identity_hessian() {
        let q = make_quadratic_family(2, (2.0, 2.0), 5).unwrap();
        let mut g = Graph::new();
        let th = g.leaves(&[0.4, -1.0]);
        let l = q.build_loss(&mut g, &th, &q.full_batch());
        assert_eq!(g.dense_hessian(l, &th).unwrap(), nalgebra::DMatrix::identity(2, 2) * 2.0);
    }

    #[test]
    fn quadratic_hessian_has_requested_spectrum() {
        let q = make_quadratic_family(10, (0.5, 2.0), 17).unwrap();
        let mut g = Graph::new();
        let th = g.leaves(&[0.3; 10]);
        let l = q.build_loss(&mut g, &th, &q.full_batch());
        let h = g.dense_hessian(l, &th).unwrap();
        let eig = h.clone().symmetric_eigen().eigenvalues;
        for e in eig.iter() {
            assert!(*e >= 0.5 - 1e-12 && *e <= 2.0 + 1e-12, "eigenvalue {e}");
        }
        assert!((h.trace() - eig.sum()).abs() < 1e-10);
    }

    #[test]
    fn invalid_spectrum_is_rejected() {
        assert!(matches!(make_quadratic_family(3, (0.0, 1.0), 0), Err(Error::InvalidSpectrum { .. })));
        assert!(matches!(make_quadratic_family(3, (2.0, 1.0), 0), Err(Error::InvalidSpectrum { .. })));
    }

    #[test]
    fn mlp_zero_theta_gives_log_two() {
        let m = make_tiny_mlp(&[2, 20, 2], Activation::Sigmoid, blobs(2.0, 1.0, 1)).unwrap();
        assert_eq!(m.param_dim(), 2 * 20 + 20 + 20 * 2 + 2);
        let l = m.loss(&vec![0.0; m.param_dim()], &m.full_batch()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logistic_zero_weights_give_log_two() {
        let lr = make_logistic(blobs(3.0, 1.0, 2)).unwrap();
        let l = lr.loss(&[0.0; 3], &lr.full_batch()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mlp_grad_matches_finite_differences() {
        // relu at zero sits on the kink, so it is checked at a random draw
        for (act, zero) in [(Activation::Sigmoid, true), (Activation::Relu, false)] {
            let m = make_tiny_mlp(&[2, 20, 2], act, blobs(2.0, 1.0, 4)).unwrap();
            let th = if zero { vec![0.0; m.param_dim()] } else { m.init_theta(&mut rng::from_seed(5)) };
            let b = m.full_batch();
            let (_, ad) = m.loss_and_grad(&th, &b).unwrap();
            let fd = finite_difference_grad(|x| m.loss(x, &b).unwrap(), &th, 1e-5);
            let e = max_relative_error(&ad, &fd, 1e-4);
            assert!(e <= 1e-5, "{act:?}: {e}");
        }
    }

    #[test]
    fn arch_mismatch_is_rejected() {
        let d = blobs(2.0, 1.0, 0);
        assert!(matches!(make_tiny_mlp(&[3, 5, 2], Activation::Relu, d.clone()), Err(Error::ArchMismatch(_))));
        assert!(matches!(make_tiny_mlp(&[2, 5, 3], Activation::Relu, d), Err(Error::ArchMismatch(_))));
    }

    #[test]
    fn empty_dataset_is_rejected_by_optimizee() {
        let d = Arc::new(Dataset { train: vec![], test: vec![], feature_dim: 4, label_kind: LabelKind::Class { classes: 2 } });
        assert!(matches!(make_tiny_mlp(&[4, 3, 2], Activation::Relu, d.clone()), Err(Error::EmptyDataset)));
        assert!(matches!(make_logistic(d), Err(Error::EmptyDataset)));
    }

    #[test]
    fn full_batch_loss_is_mean_of_sample_losses() {
        let tasks = [
            make_tiny_mlp(&[2, 20, 2], Activation::Sigmoid, blobs(2.0, 1.0, 9)).unwrap(),
            make_logistic(blobs(1.0, 1.0, 9)).unwrap(),
            make_quadratic_family_with(6, (0.5, 2.0), 7, 0, 3).unwrap(),
        ];
        for t in &tasks {
            let th = t.init_theta(&mut rng::from_seed(1));
            let full = t.loss(&th, &t.full_batch()).unwrap();
            let mean: f64 = (0..t.n_train())
                .map(|i| {
                    let mut g = Graph::new();
                    let n = g.leaves(&th);
                    let l = t.build_sample_loss(&mut g, &n, i);
                    g.value(l)
                })
                .sum::<f64>()
                / t.n_train() as f64;
            assert!((full - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_are_finite_and_non_negative_on_init_draws() {
        let tasks = [
            make_tiny_mlp(&[2, 20, 2], Activation::Relu, blobs(2.0, 1.0, 9)).unwrap(),
            make_logistic(blobs(1.0, 1.0, 9)).unwrap(),
            make_quadratic_family(4, (0.5, 2.0), 3).unwrap(),
            make_rosenbrock(2).unwrap(),
        ];
        let mut r = rng::from_seed(77);
        for t in &tasks {
            for _ in 0..1000 {
                let th = t.init_theta(&mut r);
                let l = t.loss(&th, &t.full_batch()).unwrap();
                assert!(l.is_finite() && l >= 0.0);
            }
        }
    }

    #[test]
    fn fan_in_init_has_zero_biases() {
        let m = make_tiny_mlp(&[2, 3, 2], Activation::Relu, blobs(2.0, 1.0, 1)).unwrap();
        let th = m.init_theta(&mut rng::from_seed(3));
        assert_eq!(&th[6..9], &[0.0; 3]);
        assert_eq!(&th[15..17], &[0.0; 2]);
    }

    /// Plain gradient descent on the logistic loss, as a reference linear classifier.
    fn fit_logistic(d: Arc<Dataset>) -> f64 {
        let lr = make_logistic(d).unwrap();
        let mut th = vec![0.0; 3];
        let b = lr.full_batch();
        for _ in 0..300 {
            let (_, g) = lr.loss_and_grad(&th, &b).unwrap();
            th.iter_mut().zip(&g).for_each(|(t, gi)| *t -= 0.5 * gi);
        }
        lr.test_accuracy(&th).unwrap()
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        assert_eq!(fit_logistic(Arc::new(make_blobs(200, 500, 10.0, 0.1, 21))), 1.0);
    }

    #[test]
    fn overlapping_blobs_are_at_chance() {
        let acc = fit_logistic(Arc::new(make_blobs(200, 1000, 0.0, 1.0, 21)));
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn task_spec_json_round_trip_and_sampling() {
        let spec = TaskSpec::Mlp {
            arch: vec![2, 20, 2],
            activation: Activation::Sigmoid,
            dataset: DatasetSpec::Blobs { n_train: 10, n_test: 4, separation: 2.0, noise_sd: 1.0 },
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<TaskSpec>(&text).unwrap(), spec);
        let s = spec.sampler().unwrap();
        let a = s.instantiate(1).unwrap();
        let b = s.instantiate(2).unwrap();
        assert_ne!(a.dataset().unwrap().train, b.dataset().unwrap().train);
        assert!(serde_json::from_str::<TaskSpec>(r#"{"rosenbrock":{"p":2,"q":1}}"#).is_err());
    }
}
