use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::records::{Summary, METRICS};
use crate::error::{Error, Result};

/// Reference Conv-MNIST test accuracies (%), shown next to desk-scale
/// results for orientation only. Nothing compares against them.
pub const REFERENCE_ACCURACY: [(&str, f64); 6] = [
    ("l2o", 92.74),
    ("l2o+hessian", 97.34),
    ("l2o+entropy", 97.87),
    ("sgd", 80.73),
    ("entropy_sgd", 97.54),
    ("sgd_hessian", 95.37),
];

/// Reference seconds per iteration for a hand-designed and a learned optimizer.
pub const REFERENCE_SECONDS_PER_ITER: [(&str, f64); 2] = [("sgd/adam", 0.045), ("l2o", 0.067)];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub dir: PathBuf,
    pub name: String,
    pub method: String,
    pub seeds: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub ms_per_iter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub rows: Vec<ComparisonRow>,
}

/// Final-iterate statistics of `metric` for each experiment directory.
pub fn compare(dirs: &[PathBuf], metric: &str) -> Result<Comparison> {
    if !METRICS.contains(&metric) {
        return Err(Error::UnknownMetric(metric.into()));
    }
    if dirs.len() < 2 {
        return Err(Error::InvalidArgument("compare needs at least two experiment directories".into()));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for d in dirs {
        let s = read_summary(d)?;
        let st = s.final_.get(metric);
        rows.push(ComparisonRow {
            dir: d.clone(),
            name: s.name,
            method: s.method,
            seeds: s.seeds.len(),
            median: st.map(|x| x.median),
            mean: st.map(|x| x.mean),
            sd: st.map(|x| x.sd),
            ms_per_iter: s.ms_per_iter,
        });
    }
    if rows.iter().all(|r| r.median.is_none()) {
        return Err(Error::UnknownMetric(metric.into()));
    }
    Ok(Comparison { metric: metric.into(), rows })
}

fn read_summary(dir: &Path) -> Result<Summary> {
    let p = dir.join("summary.json");
    let text = fs::read_to_string(&p)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", p.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6e}"))
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = format!("name,method,seeds,median_{m},mean_{m},sd_{m},ms_per_iter\n", m = self.metric);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.name, r.method, r.seeds, opt(r.median), opt(r.mean), opt(r.sd), r.ms_per_iter);
        }
        s
    }

    /// Aligned text table followed by the reference rows.
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!(
            "{:<w$}  {:<18}  {:>5}  {:>13}  {:>13}  {:>13}  {:>11}\n",
            "name", "method", "seeds", "median", "mean", "sd", "ms/iter"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:<18}  {:>5}  {:>13}  {:>13}  {:>13}  {:>11.4}",
                r.name,
                r.method,
                r.seeds,
                opt(r.median),
                opt(r.mean),
                opt(r.sd),
                r.ms_per_iter
            );
        }
        s.push_str("\nreference (Conv-MNIST test accuracy %, not reproduced here):\n");
        for (m, a) in REFERENCE_ACCURACY {
            let _ = writeln!(s, "  {m:<14} {a:>6.2}");
        }
        s.push_str("reference (seconds per iteration):\n");
        for (m, t) in REFERENCE_SECONDS_PER_ITER {
            let _ = writeln!(s, "  {m:<14} {t:>6.3}");
        }
        s
    }
}
