//! TSP and CVRP environments: instance generation, rollout state machine,
//! objective evaluation, unit-square symmetries, and exact or heuristic
//! oracles.

mod oracle;
mod state;

pub use oracle::{exact_optimum, exact_supported, reference_heuristic, reference_solution};
pub use state::{apply_action, feasible_mask, RolloutState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("{kind:?} instance needs at least {min} {unit}, got {got}")]
    TooSmall { kind: ProblemKind, min: usize, unit: &'static str, got: usize },
    #[error("node {node} out of range for an instance with {n} nodes")]
    UnknownNode { node: usize, n: usize },
    #[error("node {node} visited twice")]
    RepeatVisit { node: usize },
    #[error("action sequence ends with {missing} nodes unvisited")]
    Incomplete { missing: usize },
    #[error("demand {demand} of node {node} exceeds remaining capacity {remaining}")]
    CapacityExceeded { node: usize, demand: u32, remaining: u32 },
    #[error("depot visit at step {t} would create an empty route")]
    EmptyRoute { t: usize },
    #[error("state is terminal, no further actions allowed")]
    Terminal,
    #[error("instance with {got} {unit} exceeds the oracle limit of {limit}")]
    OracleLimit { got: usize, unit: &'static str, limit: usize },
    #[error("augmentation index {k} out of range 0..=7")]
    BadAugmentation { k: u8 },
    #[error("CVRP instance is missing demands or capacity")]
    MissingCvrpFields,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
}

/// A problem instance. `n` counts nodes; for CVRP that includes the depot at
/// index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub kind: ProblemKind,
    pub n: usize,
    pub coords: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demands: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
    pub seed: u64,
}

impl Instance {
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let [xi, yi] = self.coords[i];
        let [xj, yj] = self.coords[j];
        let dx = xi - xj;
        let dy = yi - yj;
        (dx * dx + dy * dy).sqrt()
    }

    /// Customer count; for TSP every node is a "customer".
    pub fn customer_count(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.n,
            ProblemKind::Cvrp => self.n - 1,
        }
    }

    pub fn demand(&self, node: usize) -> u32 {
        self.demands.as_ref().map_or(0, |d| d[node])
    }

    pub fn capacity(&self) -> u32 {
        self.capacity.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.coords.len() != self.n {
            return Err(ProblemError::UnknownNode { node: self.coords.len(), n: self.n });
        }
        if self.kind == ProblemKind::Cvrp {
            let demands = self.demands.as_ref().ok_or(ProblemError::MissingCvrpFields)?;
            let capacity = self.capacity.ok_or(ProblemError::MissingCvrpFields)?;
            if demands.len() != self.n || demands[0] != 0 {
                return Err(ProblemError::MissingCvrpFields);
            }
            for (node, &d) in demands.iter().enumerate() {
                if d > capacity {
                    return Err(ProblemError::CapacityExceeded {
                        node,
                        demand: d,
                        remaining: capacity,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Vehicle capacity by customer count, following the convention used across
/// uniform-random CVRP benchmarks.
pub fn capacity_for(customers: usize) -> u32 {
    if customers <= 20 {
        30
    } else if customers <= 50 {
        40
    } else {
        50
    }
}

/// Generates a uniform-random instance. For CVRP, `n` is the number of
/// customers; the depot is added as node 0.
pub fn generate_instance(
    kind: ProblemKind,
    n: usize,
    seed: u64,
) -> Result<Instance, ProblemError> {
    let nodes = match kind {
        ProblemKind::Tsp => {
            if n < 3 {
                return Err(ProblemError::TooSmall { kind, min: 3, unit: "nodes", got: n });
            }
            n
        }
        ProblemKind::Cvrp => {
            if n < 2 {
                return Err(ProblemError::TooSmall { kind, min: 2, unit: "customers", got: n });
            }
            n + 1
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 2]> =
        (0..nodes).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
    let (demands, capacity) = match kind {
        ProblemKind::Tsp => (None, None),
        ProblemKind::Cvrp => {
            let mut d = vec![0u32; nodes];
            for slot in d.iter_mut().skip(1) {
                *slot = rng.gen_range(1..=9);
            }
            (Some(d), Some(capacity_for(n)))
        }
    };
    Ok(Instance { kind, n: nodes, coords, demands, capacity, seed })
}

/// A complete rollout: the action sequence, its cost, and optionally the
/// per-step probability of each chosen action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub actions: Vec<usize>,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

/// Validates `actions` by replaying them through the state machine, then
/// returns the tour or route length.
pub fn solution_cost(instance: &Instance, actions: &[usize]) -> Result<f64, ProblemError> {
    let mut state = RolloutState::new(instance)?;
    for &a in actions {
        state.advance(instance, a)?;
    }
    if !state.is_terminal(instance) {
        let missing = instance.customer_count() - state.visited_count();
        return Err(ProblemError::Incomplete { missing });
    }
    Ok(route_length(instance, actions))
}

/// Length of a validated action sequence: closed tour for TSP, depot-anchored
/// walk for CVRP. Edges are summed left to right so equal paths produce
/// bit-identical totals.
pub(crate) fn route_length(instance: &Instance, actions: &[usize]) -> f64 {
    match instance.kind {
        ProblemKind::Tsp => {
            let mut total = 0.0;
            for w in actions.windows(2) {
                total += instance.dist(w[0], w[1]);
            }
            total + instance.dist(actions[actions.len() - 1], actions[0])
        }
        ProblemKind::Cvrp => {
            let mut total = 0.0;
            let mut prev = 0;
            for &a in actions {
                total += instance.dist(prev, a);
                prev = a;
            }
            total + instance.dist(prev, 0)
        }
    }
}

/// Applies the k-th unit-square symmetry (identity, three rotations, four
/// reflections) to all coordinates.
pub fn augment(instance: &Instance, k: u8) -> Result<Instance, ProblemError> {
    if k > 7 {
        return Err(ProblemError::BadAugmentation { k });
    }
    let coords = instance
        .coords
        .iter()
        .map(|&[x, y]| match k {
            0 => [x, y],
            1 => [y, 1.0 - x],
            2 => [1.0 - x, 1.0 - y],
            3 => [1.0 - y, x],
            4 => [1.0 - x, y],
            5 => [x, 1.0 - y],
            6 => [y, x],
            _ => [1.0 - y, 1.0 - x],
        })
        .collect();
    Ok(Instance { coords, ..instance.clone() })
}

/// Index of the symmetry that undoes `augment(_, k)`.
pub fn inverse_augmentation(k: u8) -> u8 {
    match k {
        1 => 3,
        3 => 1,
        other => other,
    }
}

/// Writes instances as one JSON object per line.
pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<(), ProblemError> {
    let mut out = BufWriter::new(File::create(path)?);
    for instance in instances {
        serde_json::to_writer(&mut out, instance)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL instance file and validates every instance.
pub fn read_instances(path: &Path) -> Result<Vec<Instance>, ProblemError> {
    let reader = BufReader::new(File::open(path)?);
    let mut instances = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let instance: Instance = serde_json::from_str(&line)?;
        instance.validate()?;
        instances.push(instance);
    }
    Ok(instances)
}
