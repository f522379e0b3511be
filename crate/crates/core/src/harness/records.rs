use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "seed,iter,train_loss,test_accuracy,hutchinson_trace,top_abs_eig,jacobian_trace,entropy_grad_norm,wall_ms";

/// Metric columns of `runs.csv`, in order.
pub const METRICS: [&str; 7] =
    ["train_loss", "test_accuracy", "hutchinson_trace", "top_abs_eig", "jacobian_trace", "entropy_grad_norm", "wall_ms"];

/// One row of `runs.csv`. Flatness cells are `None` at iterations where the
/// estimators were not run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub iter: usize,
    pub train_loss: f64,
    /// −1 when the task has no test set.
    pub test_accuracy: f64,
    pub hutchinson_trace: Option<f64>,
    pub top_abs_eig: Option<f64>,
    pub jacobian_trace: Option<f64>,
    pub entropy_grad_norm: Option<f64>,
    pub wall_ms: f64,
}

impl RunRecord {
    pub fn metric(&self, name: &str) -> Result<Option<f64>> {
        Ok(match name {
            "train_loss" => Some(self.train_loss),
            "test_accuracy" => (self.test_accuracy >= 0.0).then_some(self.test_accuracy),
            "hutchinson_trace" => self.hutchinson_trace,
            "top_abs_eig" => self.top_abs_eig,
            "jacobian_trace" => self.jacobian_trace,
            "entropy_grad_norm" => self.entropy_grad_norm,
            "wall_ms" => Some(self.wall_ms),
            _ => return Err(Error::UnknownMetric(name.into())),
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub(crate) fn write_runs_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.iter,
            r.train_loss,
            r.test_accuracy,
            cell(r.hutchinson_trace),
            cell(r.top_abs_eig),
            cell(r.jacobian_trace),
            cell(r.entropy_grad_norm),
            r.wall_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::InvalidConfig(format!("{}: unexpected header", path.display())));
    }
    let bad = |n: usize| Error::InvalidConfig(format!("{}: malformed row {n}", path.display()));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(n + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 2));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(RunRecord {
                seed: f[0].parse().map_err(|_| bad(n + 2))?,
                iter: f[1].parse().map_err(|_| bad(n + 2))?,
                train_loss: num(f[2])?,
                test_accuracy: num(f[3])?,
                hutchinson_trace: opt(f[4])?,
                top_abs_eig: opt(f[5])?,
                jacobian_trace: opt(f[6])?,
                entropy_grad_norm: opt(f[7])?,
                wall_ms: num(f[8])?,
            })
        })
        .collect()
}

/// Across-seed statistics of one metric. `sd` uses the n−1 denominator and
/// is 0 for a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
}

impl MetricStats {
    /// `None` for an empty or non-finite sample, so summaries stay NaN-free.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let n = values.len();
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { n, median, mean, sd })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iter: usize,
    pub metrics: BTreeMap<String, MetricStats>,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    /// Statistics at each seed's last logged iterate.
    #[serde(rename = "final")]
    pub final_: BTreeMap<String, MetricStats>,
    /// Median over seeds of mean wall-clock milliseconds per iteration; 0 without timing.
    pub ms_per_iter: f64,
}

pub fn summarize(name: &str, method: &str, records: &[RunRecord]) -> Result<Summary> {
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.dedup();
    let mut iters: Vec<usize> = records.iter().map(|r| r.iter).collect();
    iters.sort_unstable();
    iters.dedup();
    let stats = |rs: &[&RunRecord]| -> Result<BTreeMap<String, MetricStats>> {
        let mut out = BTreeMap::new();
        for m in METRICS {
            let mut vals = Vec::new();
            for r in rs {
                if let Some(v) = r.metric(m)? {
                    vals.push(v);
                }
            }
            if let Some(s) = MetricStats::of(&vals) {
                out.insert(m.to_string(), s);
            }
        }
        Ok(out)
    };
    let mut rows = Vec::with_capacity(iters.len());
    for &t in &iters {
        let at: Vec<&RunRecord> = records.iter().filter(|r| r.iter == t).collect();
        rows.push(SummaryRow { iter: t, metrics: stats(&at)? });
    }
    let last: Vec<&RunRecord> = seeds
        .iter()
        .filter_map(|&s| records.iter().filter(|r| r.seed == s).max_by_key(|r| r.iter))
        .collect();
    let per_iter: Vec<f64> = last.iter().filter(|r| r.iter > 0).map(|r| r.wall_ms / r.iter as f64).collect();
    let ms_per_iter = MetricStats::of(&per_iter).map_or(0.0, |s| s.median);
    Ok(Summary { name: name.into(), method: method.into(), seeds, rows, final_: stats(&last)?, ms_per_iter })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, iter: usize, loss: f64) -> RunRecord {
        RunRecord {
            seed,
            iter,
            train_loss: loss,
            test_accuracy: -1.0,
            hutchinson_trace: (iter == 1).then_some(loss * 2.0),
            top_abs_eig: None,
            jacobian_trace: None,
            entropy_grad_norm: None,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn stats_hand_computed() {
        let s = MetricStats::of(&[1.0, 2.0, 4.0, 9.0]).unwrap();
        assert_eq!((s.n, s.median, s.mean), (4, 3.0, 4.0));
        assert!((s.sd - (38.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MetricStats::of(&[5.0]).unwrap().sd, 0.0);
        assert!(MetricStats::of(&[]).is_none());
        assert!(MetricStats::of(&[1.0, f64::NAN]).is_none());
    }

    #[test]
    fn csv_round_trip_keeps_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.csv");
        let rs = vec![rec(0, 0, 1.5), rec(0, 1, 0.25), rec(1, 0, 1.0 / 3.0)];
        write_runs_csv(&p, &rs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&format!("{CSV_HEADER}\n")));
        assert!(text.contains("\n0,0,1.5,-1,,,,,0\n"));
        assert_eq!(read_runs_csv(&p).unwrap(), rs);
    }

    #[test]
    fn summary_skips_missing_cells_and_absent_test_set() {
        let rs = vec![rec(0, 0, 1.0), rec(0, 1, 0.5), rec(1, 0, 3.0), rec(1, 1, 1.5)];
        let s = summarize("x", "sgd", &rs).unwrap();
        assert_eq!(s.seeds, vec![0, 1]);
        assert_eq!(s.rows.len(), 2);
        assert!(!s.rows[0].metrics.contains_key("hutchinson_trace"));
        assert!(!s.rows[0].metrics.contains_key("test_accuracy"));
        assert_eq!(s.rows[1].metrics["hutchinson_trace"].mean, 2.0);
        assert_eq!(s.final_["train_loss"].median, 1.0);
        assert!(matches!(rs[0].metric("loss"), Err(Error::UnknownMetric(_))));
    }
}
