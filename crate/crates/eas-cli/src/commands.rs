//! The commands behind the `eas` binary. Every command that owns an output
//! directory writes the exact configuration it ran with as config.json, and
//! all numeric outputs are deterministic in (config, seed); wall-clock
//! columns are the one exception.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use eas_core::model::Model;
use eas_core::problems::{
    exact_optimum, exact_supported, generate_instance, read_instances, reference_heuristic,
    write_instances, Instance, ProblemKind,
};
use eas_core::search::{run_search, SearchConfig, TrajectoryRecord};
use eas_core::training::{curve_csv, train, TrainConfig};

use crate::table::{results_csv, write_jsonl, BestLine, OracleSource, ResultRow};
use crate::{with_workers, write_config, ExperimentConfig, SweepParam, SweepSpec};

pub fn kind_name(kind: ProblemKind) -> &'static str {
    match kind {
        ProblemKind::Tsp => "tsp",
        ProblemKind::Cvrp => "cvrp",
    }
}

/// Writes `count` freshly generated instances as JSON lines. Per-instance
/// seeds come from one master stream, so equal (seed, n, count) gives
/// byte-identical files.
pub fn cmd_gen(kind: ProblemKind, n: usize, count: usize, seed: u64, out: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<Instance> = (0..count)
        .map(|_| generate_instance(kind, n, rng.gen()))
        .collect::<Result<_, _>>()?;
    write_instances(out, &instances)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {count} {} instances (n={n}) to {}", kind_name(kind), out.display());
    Ok(())
}

/// Trains a checkpoint from scratch and stores it with its validation curve.
pub fn cmd_train(config: &TrainConfig, out: &Path) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_config(
        out,
        &ExperimentConfig {
            command: "train".into(),
            train: Some(*config),
            out: out.to_path_buf(),
            seed: config.seed,
            ..Default::default()
        },
    )?;
    let outcome = train(config)?;
    let checkpoint = out.join("checkpoint.bin");
    outcome.model.save(&checkpoint)?;
    fs::write(out.join("curve.csv"), curve_csv(&outcome.records))?;
    let val = outcome.records.last().map(|r| r.val_greedy_cost);
    println!(
        "trained {} steps (skipped {}), final validation greedy cost {}, checkpoint {}",
        config.steps,
        outcome.skipped_steps,
        val.map_or_else(|| "n/a".to_string(), |v| v.to_string()),
        checkpoint.display()
    );
    Ok(())
}

/// What `cmd_search` hands back for sweeps and stdout reporting.
pub struct SearchOutputs {
    pub rows: Vec<ResultRow>,
    pub oracle: OracleSource,
    pub mean_best_cost: f64,
    pub mean_gap_percent: f64,
}

/// Runs one strategy over an instance file and writes the result table,
/// trajectory log, and best-solution log. A kind mismatch between the
/// checkpoint and any instance is rejected before anything is written.
/// When `starts` is None it defaults to the smallest valid start count
/// across the file.
pub fn cmd_search(
    instances_path: &Path,
    checkpoint_path: &Path,
    mut config: SearchConfig,
    starts: Option<usize>,
    out: &Path,
) -> Result<SearchOutputs> {
    let instances = read_instances(instances_path)
        .with_context(|| format!("reading {}", instances_path.display()))?;
    ensure!(!instances.is_empty(), "{} holds no instances", instances_path.display());
    let model = Model::load(checkpoint_path)
        .with_context(|| format!("loading {}", checkpoint_path.display()))?;
    for (id, instance) in instances.iter().enumerate() {
        ensure!(
            instance.kind == model.config.kind,
            "instance {id} is {} but the checkpoint was trained for {}",
            kind_name(instance.kind),
            kind_name(model.config.kind)
        );
    }
    config.starts = match starts {
        Some(value) => value,
        None => instances.iter().map(Instance::customer_count).min().expect("nonempty"),
    };
    config.validate()?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_config(
        out,
        &ExperimentConfig {
            command: "search".into(),
            instances: Some(instances_path.to_path_buf()),
            checkpoint: Some(checkpoint_path.to_path_buf()),
            search: Some(config.clone()),
            out: out.to_path_buf(),
            seed: config.seed,
            ..Default::default()
        },
    )?;

    let (outcome, oracle, oracle_costs) = with_workers(|| -> Result<_> {
        let outcome = run_search(&model, &instances, &config)?;
        let (oracle, costs) = compute_oracle(&instances)?;
        Ok((outcome, oracle, costs))
    })??;

    let strategy = config.strategy.name();
    let rows: Vec<ResultRow> = outcome
        .results
        .iter()
        .zip(&oracle_costs)
        .map(|(res, &oracle_cost)| ResultRow {
            instance_id: res.instance_id,
            strategy: strategy.to_string(),
            best_cost: res.best.cost,
            oracle_cost,
            gap_percent: 100.0 * (res.best.cost - oracle_cost) / oracle_cost,
            solutions_sampled: res.solutions_sampled,
            wall_ms: res.records.iter().map(|r| r.wall_ms).sum(),
        })
        .collect();

    fs::write(out.join("results.csv"), results_csv(oracle, &rows))?;
    let records: Vec<&TrajectoryRecord> =
        outcome.results.iter().flat_map(|r| r.records.iter()).collect();
    write_jsonl(&out.join("trajectory.jsonl"), &records)?;
    let best: Vec<BestLine> = outcome
        .results
        .iter()
        .map(|r| BestLine {
            instance_id: r.instance_id,
            cost: r.best.cost,
            actions: r.best.actions.clone(),
        })
        .collect();
    write_jsonl(&out.join("best_solutions.jsonl"), &best)?;

    let k = rows.len() as f64;
    let mean_best_cost = rows.iter().map(|r| r.best_cost).sum::<f64>() / k;
    let mean_gap_percent = rows.iter().map(|r| r.gap_percent).sum::<f64>() / k;
    println!(
        "strategy={strategy} instances={} mean_best_cost={mean_best_cost} \
         mean_gap_percent={mean_gap_percent} oracle={} out={}",
        rows.len(),
        oracle.name(),
        out.display()
    );
    Ok(SearchOutputs { rows, oracle, mean_best_cost, mean_gap_percent })
}

/// Exact optima when every instance is small enough for the exact solvers,
/// the reference heuristic otherwise. The choice is per file, never mixed.
fn compute_oracle(instances: &[Instance]) -> Result<(OracleSource, Vec<f64>)> {
    let source = if instances.iter().all(exact_supported) {
        OracleSource::Exact
    } else {
        OracleSource::Reference
    };
    let costs = instances
        .par_iter()
        .map(|instance| match source {
            OracleSource::Exact => exact_optimum(instance).map_err(anyhow::Error::from),
            OracleSource::Reference => Ok(reference_heuristic(instance)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((source, costs))
}

/// One full search per value of the swept parameter, each in its own
/// subdirectory, on the same instances and seeds throughout.
pub fn cmd_sweep(
    instances_path: &Path,
    checkpoint_path: &Path,
    base: SearchConfig,
    starts: Option<usize>,
    param: SweepParam,
    values: &[f64],
    out: &Path,
) -> Result<()> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    if !param.applies_to(&base) {
        bail!("parameter {} does not apply to strategy {}", param.name(), base.strategy);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_config(
        out,
        &ExperimentConfig {
            command: "sweep".into(),
            instances: Some(instances_path.to_path_buf()),
            checkpoint: Some(checkpoint_path.to_path_buf()),
            search: Some(base.clone()),
            sweep: Some(SweepSpec { parameter: param, values: values.to_vec() }),
            out: out.to_path_buf(),
            seed: base.seed,
            ..Default::default()
        },
    )?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut config = base.clone();
        param.set(&mut config, value);
        let sub = out.join(format!("{}-{value}", param.name()));
        let outputs = cmd_search(instances_path, checkpoint_path, config, starts, &sub)?;
        rows.push((value, outputs.mean_best_cost));
    }
    fs::write(out.join("sweep.csv"), crate::table::sweep_csv(param.name(), &rows))?;
    Ok(())
}
