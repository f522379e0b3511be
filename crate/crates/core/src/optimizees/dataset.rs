use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Real(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Real,
    Class { classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
}

/// Train/test samples. Immutable once built; share behind an `Arc`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub feature_dim: usize,
    pub label_kind: LabelKind,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_test(&self) -> usize {
        self.test.len()
    }

    pub fn classes(&self) -> Option<usize> {
        match self.label_kind {
            LabelKind::Class { classes } => Some(classes),
            LabelKind::Real => None,
        }
    }

    /// Writes one split as CSV: `label,f0,f1,...`. Values use shortest round-trip formatting.
    pub fn write_csv(samples: &[Sample], path: &Path) -> Result<()> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut out = String::from("label");
        for i in 0..dim {
            write!(out, ",f{i}").unwrap();
        }
        out.push('\n');
        for s in samples {
            match s.label {
                Label::Class(c) => write!(out, "{c}").unwrap(),
                Label::Real(v) => write!(out, "{v:?}").unwrap(),
            }
            for f in &s.features {
                write!(out, ",{f:?}").unwrap();
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a split written by [`Dataset::write_csv`]. Integer labels become classes.
    pub fn read_csv(path: &Path) -> Result<Vec<Sample>> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::InvalidConfig(format!("{}: empty CSV", path.display())))?;
        let cols = header.split(',').count();
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::InvalidConfig(format!("{}:{}: expected {cols} fields", path.display(), n + 2)));
            }
            let bad = |f: &str| Error::InvalidConfig(format!("{}:{}: bad number '{f}'", path.display(), n + 2));
            let label = match fields[0].parse::<usize>() {
                Ok(c) => Label::Class(c),
                Err(_) => Label::Real(fields[0].parse().map_err(|_| bad(fields[0]))?),
            };
            let features = fields[1..].iter().map(|f| f.parse::<f64>().map_err(|_| bad(f))).collect::<Result<Vec<_>>>()?;
            samples.push(Sample { features, label });
        }
        Ok(samples)
    }

    /// Assembles a dataset from splits, inferring the label kind.
    pub fn from_splits(train: Vec<Sample>, test: Vec<Sample>) -> Result<Self> {
        let feature_dim = train.first().or(test.first()).map_or(0, |s| s.features.len());
        let mut max_class = None;
        let mut real = false;
        for s in train.iter().chain(&test) {
            if s.features.len() != feature_dim {
                return Err(Error::ArchMismatch(format!(
                    "sample has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::InvalidConfig("non-finite feature".into()));
            }
            match s.label {
                Label::Class(c) => max_class = Some(max_class.map_or(c, |m: usize| m.max(c))),
                Label::Real(_) => real = true,
            }
        }
        let label_kind = match (real, max_class) {
            (false, Some(m)) => LabelKind::Class { classes: (m + 1).max(2) },
            _ => LabelKind::Real,
        };
        Ok(Self { train, test, feature_dim, label_kind })
    }
}

/// Two isotropic Gaussian clusters centred at `(-separation/2, 0)` (class 0)
/// and `(+separation/2, 0)` (class 1). Labels alternate, so both splits are
/// balanced. Train samples are drawn first, then test samples, from one
/// seeded stream.
pub fn make_blobs(n_train: usize, n_test: usize, separation: f64, noise_sd: f64, seed: u64) -> Dataset {
    assert!(n_train >= 2, "make_blobs needs at least two training samples");
    assert!(noise_sd > 0.0, "make_blobs needs positive noise");
    let mut r = rng::stream(seed, 0, rng::tag::DATA);
    let noise = Normal::new(0.0, noise_sd).expect("valid normal");
    let mut draw = |i: usize| {
        let class = i % 2;
        let cx = if class == 0 { -separation / 2.0 } else { separation / 2.0 };
        Sample {
            features: vec![cx + noise.sample(&mut r), noise.sample(&mut r)],
            label: Label::Class(class),
        }
    };
    let train = (0..n_train).map(&mut draw).collect();
    let test = (0..n_test).map(&mut draw).collect();
    Dataset { train, test, feature_dim: 2, label_kind: LabelKind::Class { classes: 2 } }
}
