use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use flatl2o::harness::{compare, run_experiment, verify_suite, ExperimentConfig, RunOptions, Suite};
use flatl2o::optimizees::{load_idx, Dataset};
use flatl2o::Error;

#[derive(Parser)]
#[command(name = "flatl2o", version, about = "Learned optimizers with flatness-aware meta-training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train (if learned) and run seeded replicates from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir or runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of replicate seeds (overrides the config).
        #[arg(long)]
        seeds: Option<usize>,
        /// Also compute flatness metrics at every logged iteration.
        #[arg(long)]
        log_flatness: bool,
    },
    /// Run an invariant battery and write report.json.
    Verify {
        #[arg(long)]
        suite: Suite,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Tabulate final-iterate medians of a metric across experiment directories.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        metric: String,
        /// Write the CSV form here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Convert an IDX image/label pair to CSV (label,f0,f1,...).
    IngestIdx {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => 2,
        Some(Error::MetaDiverged(_)) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.cmd {
        Cmd::Run { config, out, seeds, log_flatness } => {
            let cfg = ExperimentConfig::load(&config)?;
            let res = run_experiment(&cfg, &RunOptions { out_dir: out, seeds, log_flatness })?;
            let fin = &res.summary.final_;
            eprintln!(
                "{}: {} seeds, median final train_loss {}, wrote {}",
                res.summary.method,
                res.summary.seeds.len(),
                fin.get("train_loss").map_or("n/a".into(), |s| format!("{:.6e}", s.median)),
                res.out_dir.display()
            );
            if let Some(lr) = res.best_lr {
                eprintln!("sweep picked lr = {lr}");
            }
            Ok(0)
        }
        Cmd::Verify { suite, out } => {
            let report = verify_suite(suite)?;
            for c in &report.cases {
                println!("{} {}: {:.3e} (tol {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
            }
            fs::create_dir_all(&out)?;
            let path = out.join("report.json");
            fs::write(&path, report.to_json())
                .with_context(|| format!("writing {}", path.display()))?;
            let failed = report.failures().count();
            println!("{suite}: {} cases, {failed} failed, {:.0} ms", report.cases.len(), report.elapsed_ms);
            Ok(if failed == 0 { 0 } else { 1 })
        }
        Cmd::Compare { dirs, metric, csv } => {
            let cmp = compare(&dirs, &metric)?;
            print!("{}", cmp.to_table());
            match csv {
                Some(p) => fs::write(&p, cmp.to_csv()).with_context(|| format!("writing {}", p.display()))?,
                None => print!("\n{}", cmp.to_csv()),
            }
            Ok(0)
        }
        Cmd::IngestIdx { images, labels, limit, out } => {
            let d = load_idx(&images, &labels, limit)?;
            Dataset::write_csv(&d.train, &out)?;
            eprintln!("wrote {} samples ({} features) to {}", d.train.len(), d.feature_dim, out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
