//! Aggregation of finished search runs into summary text and plot-ready
//! series: per-strategy means, per-iteration sampled-cost curves, and a
//! least-squares slope with confidence interval for each curve.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};

use eas_core::search::TrajectoryRecord;

use crate::stats::ols_slope_ci;
use crate::table::{parse_results_csv, read_jsonl, ResultRow};
use crate::{write_config, ExperimentConfig};

struct RunData {
    strategy: String,
    rows: Vec<ResultRow>,
    records: Vec<TrajectoryRecord>,
}

fn load_run(dir: &Path) -> Result<RunData> {
    let config_path = dir.join("config.json");
    let text = fs::read_to_string(&config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("{}: malformed config", config_path.display()))?;
    let search = config
        .search
        .with_context(|| format!("{}: not a search run (no search payload)", dir.display()))?;
    let (_oracle, rows) = parse_results_csv(&dir.join("results.csv"))?;
    let records = read_jsonl(&dir.join("trajectory.jsonl"))?;
    Ok(RunData { strategy: search.strategy.name().to_string(), rows, records })
}

/// Reads one or more search run directories, writes summary.txt, series.csv,
/// and slope.csv into `out`, and returns the summary text. Pure aggregation:
/// re-running over the same inputs reproduces every output byte.
pub fn cmd_report(runs: &[PathBuf], out: &Path, seed: u64) -> Result<String> {
    ensure!(!runs.is_empty(), "report needs at least one run directory");
    let mut grouped: BTreeMap<String, (Vec<ResultRow>, Vec<TrajectoryRecord>)> = BTreeMap::new();
    for dir in runs {
        let run = load_run(dir)?;
        let slot = grouped.entry(run.strategy).or_default();
        slot.0.extend(run.rows);
        slot.1.extend(run.records);
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_config(
        out,
        &ExperimentConfig {
            command: "report".into(),
            runs: runs.to_vec(),
            out: out.to_path_buf(),
            seed,
            ..Default::default()
        },
    )?;

    let mut series_csv = String::from("strategy,iteration,mean_sampled_cost\n");
    let mut slope_csv = String::from("strategy,slope,ci_lo,ci_hi\n");
    let mut summary = String::new();
    for (strategy, (rows, records)) in &grouped {
        let k = rows.len() as f64;
        let mean_best = rows.iter().map(|r| r.best_cost).sum::<f64>() / k;
        let mean_gap = rows.iter().map(|r| r.gap_percent).sum::<f64>() / k;
        let wall: u64 = rows.iter().map(|r| r.wall_ms).sum();
        writeln!(
            summary,
            "strategy={strategy} instances={} mean_best_cost={mean_best} \
             mean_gap_percent={mean_gap} total_wall_ms={wall}",
            rows.len()
        )
        .expect("string write");

        // Mean sampled cost over instances at each iteration.
        let mut per_iter: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for record in records {
            let slot = per_iter.entry(record.iteration).or_default();
            slot.0 += record.mean_sampled_cost;
            slot.1 += 1;
        }
        let series: Vec<(usize, f64)> =
            per_iter.into_iter().map(|(it, (sum, count))| (it, sum / count as f64)).collect();
        for (iteration, mean) in &series {
            writeln!(series_csv, "{strategy},{iteration},{mean}").expect("string write");
        }
        let xs: Vec<f64> = series.iter().map(|(it, _)| *it as f64).collect();
        let ys: Vec<f64> = series.iter().map(|(_, mean)| *mean).collect();
        if let Some(ci) = ols_slope_ci(&xs, &ys, 0.95) {
            writeln!(slope_csv, "{strategy},{},{},{}", ci.slope, ci.lo, ci.hi)
                .expect("string write");
            writeln!(
                summary,
                "strategy={strategy} series_slope={} slope_ci95=[{},{}]",
                ci.slope, ci.lo, ci.hi
            )
            .expect("string write");
        }
    }
    fs::write(out.join("series.csv"), &series_csv)?;
    fs::write(out.join("slope.csv"), &slope_csv)?;
    fs::write(out.join("summary.txt"), &summary)?;
    Ok(summary)
}
