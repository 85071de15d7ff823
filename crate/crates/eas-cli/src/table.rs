//! On-disk artifact formats: the per-instance result table, sweep rows, and
//! JSON-lines logs, with parsers that name the offending line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Where oracle costs came from. The exact solvers only accept small
/// instances; the reference heuristic runs at any size but is not optimal,
/// so the CSV header always names the source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleSource {
    Exact,
    Reference,
}

impl OracleSource {
    pub fn name(self) -> &'static str {
        match self {
            OracleSource::Exact => "exact",
            OracleSource::Reference => "reference-heuristic",
        }
    }
}

/// One searched instance in the result table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub instance_id: usize,
    pub strategy: String,
    pub best_cost: f64,
    pub oracle_cost: f64,
    /// 100 * (best - oracle) / oracle.
    pub gap_percent: f64,
    pub solutions_sampled: usize,
    pub wall_ms: u64,
}

pub const RESULTS_HEADER: &str =
    "instance_id,strategy,best_cost,oracle_cost,gap_percent,solutions_sampled,wall_ms";

pub fn results_csv(oracle: OracleSource, rows: &[ResultRow]) -> String {
    let mut out = format!("# oracle: {}\n{RESULTS_HEADER}\n", oracle.name());
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.instance_id,
            r.strategy,
            r.best_cost,
            r.oracle_cost,
            r.gap_percent,
            r.solutions_sampled,
            r.wall_ms
        )
        .expect("string write");
    }
    out
}

/// Parses a result table, returning the oracle source named in the header
/// and the rows. Any malformed line fails with its 1-based number.
pub fn parse_results_csv(path: &Path) -> Result<(String, Vec<ResultRow>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut oracle = None;
    let mut saw_header = false;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let at = |msg: String| anyhow!("{}:{}: {msg}", path.display(), idx + 1);
        if let Some(rest) = line.strip_prefix("# oracle:") {
            oracle = Some(rest.trim().to_string());
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != RESULTS_HEADER {
                return Err(at(format!("expected the header {RESULTS_HEADER:?}")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(at(format!("expected 7 fields, got {}", fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| at(format!("bad integer {s:?}")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| at(format!("bad number {s:?}")));
        rows.push(ResultRow {
            instance_id: int(fields[0])?,
            strategy: fields[1].to_string(),
            best_cost: num(fields[2])?,
            oracle_cost: num(fields[3])?,
            gap_percent: num(fields[4])?,
            solutions_sampled: int(fields[5])?,
            wall_ms: fields[6].parse().map_err(|_| at(format!("bad integer {:?}", fields[6])))?,
        });
    }
    let oracle =
        oracle.ok_or_else(|| anyhow!("{}: missing \"# oracle:\" line", path.display()))?;
    if !saw_header {
        bail!("{}: missing header line", path.display());
    }
    Ok((oracle, rows))
}

pub const SWEEP_HEADER: &str = "parameter,value,mean_best_cost";

pub fn sweep_csv(parameter: &str, rows: &[(f64, f64)]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for (value, mean_best) in rows {
        writeln!(out, "{parameter},{value},{mean_best}").expect("string write");
    }
    out
}

/// One line of the best-solution log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestLine {
    pub instance_id: usize,
    pub cost: f64,
    pub actions: Vec<usize>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Reads a JSON-lines file; a malformed record fails with its 1-based line
/// number. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}: malformed record", path.display(), idx + 1))
        })
        .collect()
}
