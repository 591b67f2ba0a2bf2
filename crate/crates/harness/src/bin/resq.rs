use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use resq::data::{load_csv, write_csv, ColumnSelector, CsvOptions, SynthSpec};
use resq_harness::{
    compare_methods, default_study, grid_search, prepare, run_prepared, Comparison, ExperimentConfig, GridSpec,
    HarnessError, RunReport,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "resq", version, about = "Reservoir forecasting with uncertainty quantification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic seasonal series to CSV.
    Synth {
        #[arg(long, default_value_t = 2000)]
        length: usize,
        #[arg(long, default_value_t = 7)]
        period: usize,
        #[arg(long, default_value_t = 0.0)]
        trend: f64,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Destination CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a CSV column and print summary statistics.
    Ingest {
        path: PathBuf,
        /// Column name, or a zero-based index.
        #[arg(long, default_value = "0")]
        column: String,
        #[arg(long)]
        no_header: bool,
        #[arg(long, default_value_t = 3600)]
        step_secs: u64,
        /// Write the summary to this JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment config for all its seeded repetitions.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Grid-search hyperparameters on the validation split.
    Grid {
        config: PathBuf,
        /// Grid JSON; defaults to the standard search space for the method.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Evaluate candidates on this many threads.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Compare methods on one dataset and reservoir.
    Compare {
        /// Config files; with none given, the default synthetic study runs.
        configs: Vec<PathBuf>,
        /// Reservoir seed shared by all methods; defaults to the first config's.
        #[arg(long)]
        reservoir_seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Print a table from a metrics.json or comparison.json file.
    Report { path: PathBuf },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_report(r: &RunReport) {
    println!("{} ({}, {} params, {} runs)", r.label, r.method, r.n_params, r.n_runs);
    let rows = [("test", Some(&r.test)), ("test recalibrated", r.test_recalibrated.as_ref())];
    for (name, s) in rows {
        let Some(s) = s else { continue };
        println!(
            "  {name:<18} mse {}  cal {}  width95 {}  coverage95 {}  mcrps {}",
            s.mse, s.cal, s.width95, s.coverage95, s.mcrps
        );
    }
    println!("  validation mse {}  train secs {}", r.validation_mse, r.train_secs);
}

fn print_comparison(c: &Comparison) {
    println!("{:<12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>12}", "method", "mse", "cal", "cal_recal", "width95", "cover95", "mcrps", "train_secs");
    for r in &c.rows {
        let recal = r.test_recalibrated.map_or("-".to_string(), |s| format!("{:.4}", s.cal.mean));
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>10} {:>10.4} {:>10.4} {:>10.4} {:>12.3}",
            r.label, r.test.mse.mean, r.test.cal.mean, recal, r.test.width95.mean, r.test.coverage95.mean, r.test.mcrps.mean, r.train_secs.mean
        );
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { length, period, trend, noise_std, seed, out } => {
            let series = resq::data::synth_seasonal(&SynthSpec { length, period, trend, noise_std, seed })
                .map_err(|e| HarnessError::Stage { stage: resq_harness::Stage::Ingest, error: Box::new(e) })?;
            write_csv(&series, &out).with_context(|| format!("[output] writing {}", out.display()))?;
            println!("wrote {} values to {}", series.len(), out.display());
        }
        Command::Ingest { path, column, no_header, step_secs, out } => {
            let selector = match column.parse::<usize>() {
                Ok(i) => ColumnSelector::Index(i),
                Err(_) => ColumnSelector::Name(column),
            };
            let series = load_csv(&path, &selector, CsvOptions { has_header: !no_header, step_secs })
                .map_err(|e| HarnessError::Stage { stage: resq_harness::Stage::Ingest, error: Box::new(e) })?;
            let v = series.values();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let summary = serde_json::json!({
                "name": series.name,
                "length": v.len(),
                "step_secs": series.step_secs,
                "mean": mean,
                "std": std,
                "min": v.iter().copied().fold(f64::INFINITY, f64::min),
                "max": v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
            let text = serde_json::to_string_pretty(&summary)?;
            println!("{text}");
            if let Some(out) = out {
                std::fs::write(&out, text).with_context(|| format!("[output] writing {}", out.display()))?;
            }
        }
        Command::Run { config, common } => {
            let cfg = load_config(&config, common.seed)?;
            let prep = prepare(&cfg)?;
            let report = run_prepared(&cfg, &prep)?;
            print_report(&report);
            if let Some(dir) = common.out {
                report.write(&dir, Some(&prep))?;
                std::fs::write(dir.join("config.json"), cfg.to_json()).context("[output] writing config.json")?;
            }
        }
        Command::Grid { config, grid, threads, common } => {
            let cfg = load_config(&config, common.seed)?;
            let spec = match grid {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("[config] reading {}", p.display()))?;
                    serde_json::from_str::<GridSpec>(&text).context("[config] parsing grid")?
                }
                None => GridSpec::default_for(cfg.method),
            };
            println!("grid: {} candidates", spec.size());
            let result = grid_search(&spec, &cfg, threads)?;
            for (rank, e) in result.leaderboard.iter().enumerate().take(10) {
                println!(
                    "{:>3}. mse {:.5}  cal {:.4}  params {:>7}  {}",
                    rank + 1,
                    e.validation_mse,
                    e.validation_cal,
                    e.n_params,
                    serde_json::to_string(&e.candidate)?
                );
            }
            if !result.failures.is_empty() {
                println!("{} candidates failed", result.failures.len());
            }
            if let Some(dir) = common.out {
                std::fs::create_dir_all(&dir).context("[output] creating output directory")?;
                std::fs::write(dir.join("grid.json"), serde_json::to_string_pretty(&result)?).context("[output] writing grid.json")?;
                std::fs::write(dir.join("best_config.json"), result.best.to_json()).context("[output] writing best_config.json")?;
            }
        }
        Command::Compare { configs, reservoir_seed, common } => {
            let cfgs: Vec<ExperimentConfig> = if configs.is_empty() {
                default_study(common.seed.unwrap_or(0))
            } else {
                configs.iter().map(|p| load_config(p, common.seed)).collect::<Result<_>>()?
            };
            let rseed = reservoir_seed.unwrap_or(cfgs[0].reservoir.seed);
            let cmp = compare_methods(&cfgs, rseed)?;
            print_comparison(&cmp);
            if let Some(dir) = common.out {
                cmp.write(&dir)?;
            }
        }
        Command::Report { path } => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("[output] reading {}", path.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text).context("[output] parsing report")?;
            if value.is_array() {
                let rows: Vec<resq_harness::ComparisonRow> = serde_json::from_value(value)?;
                print_comparison(&Comparison { rows, reports: Vec::new() });
            } else if value.get("runs").is_some() {
                let report: RunReport = serde_json::from_value(value)?;
                print_report(&report);
            } else {
                bail!("[output] {} is neither a metrics nor a comparison file", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
