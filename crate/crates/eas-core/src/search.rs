//! Search-time solvers over a frozen checkpoint: one-shot greedy decoding,
//! repeated sampling, full per-instance fine-tuning, and the three efficient
//! adaptation strategies that keep the checkpoint fixed while training a
//! small per-instance state (per-view compatibility keys, a residual query
//! adapter, or a directed-edge lookup table).
//!
//! Every strategy shares one driver. Per instance: encode each coordinate
//! view once (full fine-tuning re-encodes on its gradient tape instead),
//! then iterate sample -> incumbent update -> strategy update. Sampled
//! solutions are always costed against the original coordinates, and the
//! incumbent never gets worse. Gradient strategies descend on
//!
//!   (1/R) sum_r (C_r - b_k) log q(pi_r)  -  lambda (1/K) sum_k log q(best | view k)
//!
//! with b_k the mean sampled cost of rollout r's own view this iteration, so
//! each view's advantage weights sum to zero and a degenerate iteration moves
//! nothing. The baseline is per view: the views sample in different coordinate
//! frames, and a pooled baseline would turn frame-to-frame cost offsets into
//! gradient signal.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NamedParamSet, NodeId, Real, Tape, TapeError, Tensor};
use crate::model::net::{self, EmbNodes, QtableRef, StepMode};
use crate::model::{EmbeddingSet, Model, ModelConfig, ModelError, ResidualAdapter};
use crate::problems::{augment, solution_cost, Instance, ProblemError, ProblemKind, Solution};
use crate::training::{self, OptimizerState, TrainError};

/// Name of the trainable key tensor a per-view adaptation set carries.
const KEYS_NAME: &str = "eas.keys";

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("environment: {0}")]
    Problem(#[from] ProblemError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("autodiff: {0}")]
    Tape(#[from] TapeError),
    #[error("bad search config: {0}")]
    BadConfig(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("tables cover {a} and {b} nodes; blending needs equal shapes")]
    TableShapeMismatch { a: usize, b: usize },
    #[error("blend weight must lie in [0, 1], got {beta}")]
    BadBlendWeight { beta: Real },
    #[error("not a usable distribution: {0}")]
    BadDistribution(String),
    #[error("every rescored probability vanished")]
    DegenerateRescore,
    #[error("trace and probability lengths differ: {actions} actions vs {probs} probabilities")]
    TraceMismatch { actions: usize, probs: usize },
    #[error("node {node} is out of range for a table over {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("search finished without an incumbent")]
    EmptyIncumbent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Sampling,
    ActiveSearch,
    EasEmb,
    EasLay,
    EasTab,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Greedy,
        Strategy::Sampling,
        Strategy::ActiveSearch,
        Strategy::EasEmb,
        Strategy::EasLay,
        Strategy::EasTab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Sampling => "sampling",
            Strategy::ActiveSearch => "active-search",
            Strategy::EasEmb => "eas-emb",
            Strategy::EasLay => "eas-lay",
            Strategy::EasTab => "eas-tab",
        }
    }

    /// Whether the strategy trains anything at search time.
    pub fn adapts(self) -> bool {
        !matches!(self, Strategy::Greedy | Strategy::Sampling)
    }

    /// Gradient strategies keep their sampling tapes alive for the update.
    fn needs_gradients(self) -> bool {
        matches!(self, Strategy::ActiveSearch | Strategy::EasEmb | Strategy::EasLay)
    }

    /// Search-time learning rate when the caller does not override it.
    pub fn default_lr(self) -> Real {
        match self {
            Strategy::EasEmb | Strategy::EasLay => 1e-2,
            Strategy::ActiveSearch => 2.6e-4,
            Strategy::Greedy | Strategy::Sampling | Strategy::EasTab => 0.0,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SearchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| SearchError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchConfig {
    pub strategy: Strategy,
    /// Improvement iterations; greedy always runs exactly one.
    pub iterations: usize,
    /// Coordinate views sampled per iteration, identity first.
    pub augmentations: usize,
    /// Rollouts per view: start nodes for TSP, first customers for CVRP.
    pub starts: usize,
    /// Imitation weight on the incumbent's log-likelihood.
    pub lambda: Real,
    /// Steepness of the tabular rescore.
    pub alpha: Real,
    /// Strength of a tabular incumbent edge.
    pub sigma: Real,
    /// Step size for the strategy's optimizer; zero freezes it in place.
    pub lr: Real,
    pub seed: u64,
    /// Independent adaptation runs per instance sharing one incumbent.
    pub copies: usize,
    /// Adds the imitation term to full fine-tuning, which ignores lambda
    /// otherwise.
    pub active_search_il: bool,
}

impl SearchConfig {
    /// Defaults from the method description; `starts` is typically the
    /// instance's valid start count.
    pub fn standard(strategy: Strategy, starts: usize) -> SearchConfig {
        SearchConfig {
            strategy,
            iterations: 200,
            augmentations: 8,
            starts,
            lambda: 0.01,
            alpha: 1.0,
            sigma: 10.0,
            lr: strategy.default_lr(),
            seed: 0,
            copies: 1,
            active_search_il: false,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.iterations == 0 {
            return Err(SearchError::BadConfig("iterations must be positive".into()));
        }
        if self.augmentations == 0 || self.augmentations > 8 {
            return Err(SearchError::BadConfig(format!(
                "augmentations must lie in 1..=8, got {}",
                self.augmentations
            )));
        }
        if self.starts == 0 {
            return Err(SearchError::BadConfig("starts must be positive".into()));
        }
        if self.copies == 0 {
            return Err(SearchError::BadConfig("copies must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(SearchError::BadConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(SearchError::BadConfig(format!(
                "alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(SearchError::BadConfig(format!(
                "sigma must be finite and positive, got {}",
                self.sigma
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(SearchError::BadConfig(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Best solution seen so far. Replacement requires strictly lower cost, so
/// ties keep the earlier trace and the cost never increases.
#[derive(Clone, Debug, Default)]
pub struct Incumbent {
    best: Option<Solution>,
}

impl Incumbent {
    pub fn new() -> Incumbent {
        Incumbent { best: None }
    }

    pub fn best(&self) -> Option<&Solution> {
        self.best.as_ref()
    }

    pub fn cost(&self) -> Option<f64> {
        self.best.as_ref().map(|s| s.cost)
    }

    pub fn into_best(self) -> Option<Solution> {
        self.best
    }

    /// Adopts `candidate` iff strictly better. Returns whether it did.
    pub fn offer(&mut self, candidate: &Solution) -> bool {
        let better = match &self.best {
            None => true,
            Some(held) => candidate.cost < held.cost,
        };
        if better {
            self.best = Some(candidate.clone());
        }
        better
    }
}

/// Directed-edge bonus table over all node pairs, depot included. Entries
/// start at 1; a rebuild pins the current incumbent's edges and returns every
/// other entry to exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n: usize,
    flat: Vec<Real>,
}

impl QTable {
    pub fn new(n: usize) -> QTable {
        QTable { n, flat: vec![1.0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, from: usize, to: usize) -> Real {
        self.flat[from * self.n + to]
    }

    pub fn row(&self, from: usize) -> &[Real] {
        &self.flat[from * self.n..(from + 1) * self.n]
    }

    pub fn flat(&self) -> &[Real] {
        &self.flat
    }

    fn as_rescore(&self, alpha: Real) -> QtableRef<'_> {
        QtableRef { flat: &self.flat, n: self.n, alpha }
    }
}

/// Applies the tabular bias to one masked distribution: feasible entries
/// become p_a^alpha * row_a, renormalized proportionally; infeasible entries
/// stay zero. An all-ones row at alpha = 1 returns the input bit for bit.
pub fn eas_tab_rescore(
    probs: &[Real],
    row: &[Real],
    mask: &[bool],
    alpha: Real,
) -> Result<Vec<Real>, SearchError> {
    if probs.len() != row.len() || probs.len() != mask.len() {
        return Err(SearchError::BadDistribution(format!(
            "lengths differ: {} probabilities, {} table entries, {} mask flags",
            probs.len(),
            row.len(),
            mask.len()
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(SearchError::BadConfig(format!(
            "alpha must be finite and positive, got {alpha}"
        )));
    }
    let mut total: Real = 0.0;
    for a in 0..probs.len() {
        if !(row[a] > 0.0) {
            return Err(SearchError::BadDistribution(format!(
                "table entry {a} is not positive"
            )));
        }
        if mask[a] {
            if !(probs[a] > 0.0) {
                return Err(SearchError::BadDistribution(format!(
                    "feasible action {a} has no probability"
                )));
            }
        } else if probs[a] != 0.0 {
            return Err(SearchError::BadDistribution(format!(
                "masked action {a} has probability {}",
                probs[a]
            )));
        }
        total += probs[a];
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(SearchError::BadDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    let mut out = probs.to_vec();
    if !net::rescore_in_place(&mut out, row, alpha) {
        return Err(SearchError::DegenerateRescore);
    }
    Ok(out)
}

/// Rebuilds `table` for a new incumbent: every entry returns to 1, then each
/// incumbent transition (current node, action) gets max(1, sigma / q^alpha),
/// with q the frozen policy's probability of that action. `probs` must align
/// with `actions`; entry 0 covers the forced start and is ignored.
pub fn eas_tab_update(
    table: &mut QTable,
    actions: &[usize],
    probs: &[Real],
    sigma: Real,
    alpha: Real,
) -> Result<(), SearchError> {
    if actions.len() != probs.len() {
        return Err(SearchError::TraceMismatch { actions: actions.len(), probs: probs.len() });
    }
    if actions.len() < 2 {
        return Err(SearchError::BadDistribution(
            "an incumbent trace needs at least one transition".into(),
        ));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(SearchError::BadConfig(format!(
            "sigma must be finite and positive, got {sigma}"
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(SearchError::BadConfig(format!(
            "alpha must be finite and positive, got {alpha}"
        )));
    }
    for t in 1..actions.len() {
        for node in [actions[t - 1], actions[t]] {
            if node >= table.n {
                return Err(SearchError::NodeOutOfRange { node, n: table.n });
            }
        }
        if !(probs[t] > 0.0) || probs[t] > 1.0 + 1e-9 {
            return Err(SearchError::BadDistribution(format!(
                "step {t} has probability {}",
                probs[t]
            )));
        }
    }
    for entry in table.flat.iter_mut() {
        *entry = 1.0;
    }
    for t in 1..actions.len() {
        let q = probs[t];
        let scaled = if alpha == 1.0 { sigma / q } else { sigma / q.powf(alpha) };
        table.flat[actions[t - 1] * table.n + actions[t]] = scaled.max(1.0);
    }
    Ok(())
}

/// Elementwise (1 - beta) * local + beta * shared. The endpoints reproduce
/// their operand exactly.
pub fn blend_qtables(local: &QTable, shared: &QTable, beta: Real) -> Result<QTable, SearchError> {
    if local.n != shared.n {
        return Err(SearchError::TableShapeMismatch { a: local.n, b: shared.n });
    }
    if !beta.is_finite() || !(0.0..=1.0).contains(&beta) {
        return Err(SearchError::BadBlendWeight { beta });
    }
    let flat = local
        .flat
        .iter()
        .zip(&shared.flat)
        .map(|(&a, &b)| (1.0 - beta) * a + beta * b)
        .collect();
    Ok(QTable { n: local.n, flat })
}

/// One line of the per-iteration trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub instance_id: usize,
    pub iteration: usize,
    pub mean_sampled_cost: f64,
    pub best_sampled_cost: f64,
    pub incumbent_cost: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct InstanceResult {
    pub instance_id: usize,
    pub best: Solution,
    pub records: Vec<TrajectoryRecord>,
    /// Encoder passes this instance consumed.
    pub encode_count: usize,
    /// Complete solutions drawn, over all iterations, views, and copies.
    pub solutions_sampled: usize,
    /// Updates dropped because a gradient came back non-finite.
    pub skipped_updates: usize,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub results: Vec<InstanceResult>,
}

/// Per-copy adaptation state, discarded once the instance finishes.
enum Dyn {
    Frozen,
    /// Trainable compatibility keys, one set per coordinate view.
    Emb { sets: Vec<NamedParamSet>, opts: Vec<OptimizerState> },
    /// One residual adapter per view. Like the key sets, each augmented view
    /// adapts its own copy; the views sit in different coordinate frames, and
    /// one adapter pulled toward all of them at once degrades the policy.
    Lay { adapters: Vec<ResidualAdapter>, opts: Vec<OptimizerState> },
    /// Edge table plus the copy's own best solution feeding it.
    Tab { table: QTable, local: Incumbent },
    /// Full per-instance copy of the checkpoint.
    Active { model: Box<Model>, opt: OptimizerState },
}

struct CopyState {
    rng: ChaCha8Rng,
    dynp: Dyn,
    /// Best solution each view has sampled so far. Imitation pulls a view
    /// toward its own frame's incumbent; the frames disagree enough that
    /// replaying one frame's best into the others widens the distribution
    /// instead of sharpening it.
    view_best: Vec<Incumbent>,
    skipped: usize,
}

/// One view's sampling pass. Gradient strategies keep the tape for the
/// update phase; everything else drops it immediately.
struct ViewRun {
    tape: Option<Tape>,
    ids: BTreeMap<String, NodeId>,
    emb_nodes: EmbNodes,
    actions: Vec<Vec<usize>>,
    probs: Vec<Vec<Real>>,
    log_nodes: Vec<Option<NodeId>>,
    costs: Vec<f64>,
}

/// Runs the configured strategy over every instance. Instances are
/// independent and dispatched to parallel workers; each one's random stream
/// is fixed by (seed, position), so the outcome does not depend on
/// scheduling. Wall-clock fields aside, results are bit-reproducible.
pub fn run_search(
    model: &Model,
    instances: &[Instance],
    config: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    config.validate()?;
    let results = instances
        .par_iter()
        .enumerate()
        .map(|(id, instance)| search_instance(model, instance, id, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SearchOutcome { results })
}

fn max_starts(instance: &Instance) -> usize {
    match instance.kind {
        ProblemKind::Tsp => instance.n,
        ProblemKind::Cvrp => instance.customer_count(),
    }
}

/// SplitMix-style finalizer decorrelating per-instance streams regardless of
/// processing order.
fn mix_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Table blend weight: linear 0 -> 1 across the run.
fn blend_weight(iteration: usize, iterations: usize) -> Real {
    if iterations <= 1 {
        0.0
    } else {
        iteration as Real / (iterations - 1) as Real
    }
}

/// Per-view imitation weight, when the strategy uses the term at all.
fn il_weight(config: &SearchConfig) -> Option<Real> {
    let used = match config.strategy {
        Strategy::EasEmb | Strategy::EasLay => true,
        Strategy::ActiveSearch => config.active_search_il,
        Strategy::Greedy | Strategy::Sampling | Strategy::EasTab => false,
    };
    if used && config.lambda > 0.0 {
        Some(config.lambda / config.augmentations as Real)
    } else {
        None
    }
}

fn search_instance(
    model: &Model,
    instance: &Instance,
    instance_id: usize,
    config: &SearchConfig,
) -> Result<InstanceResult, SearchError> {
    if instance.kind != model.config.kind {
        return Err(ModelError::KindMismatch {
            expected: model.config.kind,
            got: instance.kind,
        }
        .into());
    }
    let limit = max_starts(instance);
    if config.starts > limit {
        return Err(SearchError::BadConfig(format!(
            "starts {} exceeds the {} valid start nodes",
            config.starts, limit
        )));
    }
    let starts = training::default_starts(instance.kind, config.starts);
    let iterations = if config.strategy == Strategy::Greedy { 1 } else { config.iterations };

    let views: Vec<Instance> = (0..config.augmentations as u8)
        .map(|k| augment(instance, k))
        .collect::<Result<_, _>>()?;

    // Every strategy but full fine-tuning encodes each view exactly once;
    // fine-tuning re-encodes on its gradient tape every iteration.
    let mut encode_count = 0usize;
    let embs: Vec<EmbeddingSet> = if config.strategy == Strategy::ActiveSearch {
        Vec::new()
    } else {
        views
            .iter()
            .map(|view| {
                encode_count += 1;
                model.encode(view)
            })
            .collect::<Result<_, _>>()?
    };

    let mut seed_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, instance_id));
    let mut copies: Vec<CopyState> = Vec::with_capacity(config.copies);
    for _ in 0..config.copies {
        let rng = ChaCha8Rng::seed_from_u64(seed_rng.gen());
        let dynp = match config.strategy {
            Strategy::Greedy | Strategy::Sampling => Dyn::Frozen,
            Strategy::EasEmb => {
                let mut sets = Vec::with_capacity(embs.len());
                let mut opts = Vec::with_capacity(embs.len());
                for emb in &embs {
                    let mut set = NamedParamSet::new();
                    set.insert(KEYS_NAME, emb.keys.clone(), true)?;
                    opts.push(OptimizerState::standard(&set));
                    sets.push(set);
                }
                Dyn::Emb { sets, opts }
            }
            Strategy::EasLay => {
                // Seeded off the instance stream, not the copy's sampling rng,
                // so a fresh (inert) adapter leaves the first iteration's
                // draws identical to plain sampling.
                let mut adapters = Vec::with_capacity(embs.len());
                let mut opts = Vec::with_capacity(embs.len());
                for _ in 0..embs.len() {
                    let adapter = ResidualAdapter::init(&model.config, seed_rng.gen());
                    opts.push(OptimizerState::standard(&adapter.params));
                    adapters.push(adapter);
                }
                Dyn::Lay { adapters, opts }
            }
            Strategy::EasTab => {
                Dyn::Tab { table: QTable::new(instance.n), local: Incumbent::new() }
            }
            Strategy::ActiveSearch => {
                let copy = model.clone();
                let opt = OptimizerState::standard(&copy.params);
                Dyn::Active { model: Box::new(copy), opt }
            }
        };
        let view_best = (0..views.len()).map(|_| Incumbent::new()).collect();
        copies.push(CopyState { rng, dynp, view_best, skipped: 0 });
    }

    let mut global = Incumbent::new();
    let mut shared_table = QTable::new(instance.n);
    let mut sampled = 0usize;
    let mut records = Vec::with_capacity(iterations);
    let il_w = il_weight(config);

    for iteration in 0..iterations {
        let tick = Instant::now();
        let beta = blend_weight(iteration, iterations);

        // Phase 1: sample every view of every copy.
        let mut runs: Vec<Vec<ViewRun>> = Vec::with_capacity(copies.len());
        for copy in &mut copies {
            // A lone copy blends with itself, which is the identity for any
            // beta, so it samples straight from its own table.
            let sample_table: Option<QTable> = match &copy.dynp {
                Dyn::Tab { table, .. } if config.copies > 1 => {
                    Some(blend_qtables(table, &shared_table, beta)?)
                }
                Dyn::Tab { table, .. } => Some(table.clone()),
                _ => None,
            };
            let mut view_runs = Vec::with_capacity(views.len());
            for (k, view) in views.iter().enumerate() {
                let run = sample_view(
                    model,
                    config,
                    instance,
                    view,
                    k,
                    &embs,
                    &starts,
                    &copy.dynp,
                    &mut copy.rng,
                    sample_table.as_ref(),
                    &mut encode_count,
                )?;
                sampled += run.actions.len();
                view_runs.push(run);
            }
            runs.push(view_runs);
        }

        // Phase 2: incumbent updates, copies then views then rows ascending.
        let mut shared_changed = false;
        let mut local_changed = vec![false; copies.len()];
        for (c, copy) in copies.iter_mut().enumerate() {
            for (k, run) in runs[c].iter().enumerate() {
                for (row, actions) in run.actions.iter().enumerate() {
                    let candidate = Solution {
                        actions: actions.clone(),
                        cost: run.costs[row],
                        probs: Some(run.probs[row].iter().map(|&p| p as f64).collect()),
                    };
                    if global.offer(&candidate) {
                        shared_changed = true;
                    }
                    copy.view_best[k].offer(&candidate);
                    if let Dyn::Tab { local, .. } = &mut copy.dynp {
                        if local.offer(&candidate) {
                            local_changed[c] = true;
                        }
                    }
                }
            }
        }
        if shared_changed && config.copies > 1 && config.strategy == Strategy::EasTab {
            let actions = global.best().expect("offers preceded").actions.clone();
            shared_table = rebuilt_table(model, &embs[0], instance, &actions, config)?;
        }

        // Phase 3: strategy updates.
        for (c, copy) in copies.iter_mut().enumerate() {
            let view_runs = &mut runs[c];
            match &mut copy.dynp {
                Dyn::Frozen => {}
                Dyn::Tab { table, local } => {
                    if local_changed[c] {
                        let actions = local.best().expect("offers preceded").actions.clone();
                        *table = rebuilt_table(model, &embs[0], instance, &actions, config)?;
                    }
                }
                Dyn::Emb { sets, opts } => {
                    let (adv, r_total) = advantage_rows(view_runs);
                    for k in 0..view_runs.len() {
                        // Multi-copy runs imitate the incumbent shared across
                        // copies; a lone copy imitates per view.
                        let incumbent = if config.copies > 1 {
                            global.best()
                        } else {
                            copy.view_best[k].best()
                        }
                        .ok_or(SearchError::EmptyIncumbent)?;
                        let run = &mut view_runs[k];
                        let tape = run.tape.as_mut().expect("gradient strategies keep tapes");
                        let loss = iteration_loss_node(
                            tape,
                            &model.config,
                            &run.ids,
                            &run.emb_nodes,
                            &run.log_nodes,
                            &adv[k],
                            r_total,
                            il_w.map(|w| (incumbent, w)),
                            instance,
                        )?;
                        let grads = match loss {
                            Some(node) => tape.backprop(node, &Tensor::scalar(1.0), &sets[k])?,
                            None => BTreeMap::new(),
                        };
                        if all_finite(&grads) {
                            opts[k].apply(&mut sets[k], &grads, config.lr)?;
                        } else {
                            copy.skipped += 1;
                            eprintln!(
                                "warning: skipped a non-finite eas-emb update \
                                 (instance {instance_id}, iteration {iteration}, view {k})"
                            );
                        }
                    }
                }
                Dyn::Lay { adapters, opts } => {
                    let (adv, r_total) = advantage_rows(view_runs);
                    for k in 0..view_runs.len() {
                        let incumbent = if config.copies > 1 {
                            global.best()
                        } else {
                            copy.view_best[k].best()
                        }
                        .ok_or(SearchError::EmptyIncumbent)?;
                        let run = &mut view_runs[k];
                        let tape = run.tape.as_mut().expect("gradient strategies keep tapes");
                        let loss = iteration_loss_node(
                            tape,
                            &model.config,
                            &run.ids,
                            &run.emb_nodes,
                            &run.log_nodes,
                            &adv[k],
                            r_total,
                            il_w.map(|w| (incumbent, w)),
                            instance,
                        )?;
                        let grads = match loss {
                            Some(node) => {
                                tape.backprop(node, &Tensor::scalar(1.0), &adapters[k].params)?
                            }
                            None => BTreeMap::new(),
                        };
                        if all_finite(&grads) {
                            opts[k].apply(&mut adapters[k].params, &grads, config.lr)?;
                        } else {
                            copy.skipped += 1;
                            eprintln!(
                                "warning: skipped a non-finite eas-lay update \
                                 (instance {instance_id}, iteration {iteration}, view {k})"
                            );
                        }
                    }
                }
                Dyn::Active { model: tuned, opt } => {
                    let (adv, r_total) = advantage_rows(view_runs);
                    let incumbent = global.best().ok_or(SearchError::EmptyIncumbent)?;
                    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
                    for k in 0..view_runs.len() {
                        let run = &mut view_runs[k];
                        let tape = run.tape.as_mut().expect("gradient strategies keep tapes");
                        let loss = iteration_loss_node(
                            tape,
                            &tuned.config,
                            &run.ids,
                            &run.emb_nodes,
                            &run.log_nodes,
                            &adv[k],
                            r_total,
                            il_w.map(|w| (incumbent, w)),
                            instance,
                        )?;
                        if let Some(node) = loss {
                            let grads = tape.backprop(node, &Tensor::scalar(1.0), &tuned.params)?;
                            training::accumulate(&mut acc, grads);
                        }
                    }
                    if all_finite(&acc) {
                        opt.apply(&mut tuned.params, &acc, config.lr)?;
                    } else {
                        copy.skipped += 1;
                        eprintln!(
                            "warning: skipped a non-finite active-search update \
                             (instance {instance_id}, iteration {iteration})"
                        );
                    }
                }
            }
        }

        // Phase 4: trajectory record over every sample of the iteration.
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut best_sampled = f64::INFINITY;
        for view_runs in &runs {
            for run in view_runs {
                for &cost in &run.costs {
                    sum += cost;
                    count += 1;
                    if cost < best_sampled {
                        best_sampled = cost;
                    }
                }
            }
        }
        records.push(TrajectoryRecord {
            instance_id,
            iteration,
            mean_sampled_cost: sum / count as f64,
            best_sampled_cost: best_sampled,
            incumbent_cost: global.cost().expect("offers preceded"),
            wall_ms: tick.elapsed().as_millis() as u64,
        });
    }

    let skipped_updates = copies.iter().map(|c| c.skipped).sum();
    let best = global.into_best().ok_or(SearchError::EmptyIncumbent)?;
    Ok(InstanceResult {
        instance_id,
        best,
        records,
        encode_count,
        solutions_sampled: sampled,
        skipped_updates,
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_view(
    model: &Model,
    config: &SearchConfig,
    instance: &Instance,
    view: &Instance,
    k: usize,
    embs: &[EmbeddingSet],
    starts: &[usize],
    dynp: &Dyn,
    rng: &mut ChaCha8Rng,
    sample_table: Option<&QTable>,
    encode_count: &mut usize,
) -> Result<ViewRun, SearchError> {
    let keep = config.strategy.needs_gradients();
    let mut tape = Tape::new();
    let (ids, emb_nodes) = match dynp {
        Dyn::Frozen | Dyn::Tab { .. } => {
            let ids = net::register_all(&mut tape, &[&model.params])?;
            let nodes = net::const_emb_nodes(&mut tape, &embs[k]);
            (ids, nodes)
        }
        Dyn::Emb { sets, .. } => {
            let ids = net::register_all(&mut tape, &[&model.params, &sets[k]])?;
            let mut nodes = net::const_emb_nodes(&mut tape, &embs[k]);
            nodes.keys = ids[KEYS_NAME];
            (ids, nodes)
        }
        Dyn::Lay { adapters, .. } => {
            let ids = net::register_all(&mut tape, &[&model.params, &adapters[k].params])?;
            let nodes = net::const_emb_nodes(&mut tape, &embs[k]);
            (ids, nodes)
        }
        Dyn::Active { model: tuned, .. } => {
            let ids = net::register_all(&mut tape, &[&tuned.params])?;
            *encode_count += 1;
            let nodes = net::encode_on_tape(&mut tape, &tuned.config, &ids, view)?;
            (ids, nodes)
        }
    };
    let rescore = sample_table.map(|t| t.as_rescore(config.alpha));
    let mode = if config.strategy == Strategy::Greedy {
        StepMode::Greedy
    } else {
        StepMode::Sample(rng)
    };
    let group = net::decode_group(
        &mut tape,
        &model.config,
        &ids,
        &emb_nodes,
        instance,
        starts,
        mode,
        keep,
        rescore,
    )?;
    let costs = group
        .actions
        .iter()
        .map(|actions| solution_cost(instance, actions))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ViewRun {
        tape: if keep { Some(tape) } else { None },
        ids,
        emb_nodes,
        actions: group.actions,
        probs: group.probs,
        log_nodes: group.log_nodes,
        costs,
    })
}

/// Advantages C_r - b per view row, b being the mean over every sample the
/// copy drew this iteration. Bit-equal costs short-circuit to exact zeros.
fn advantage_rows(view_runs: &[ViewRun]) -> (Vec<Vec<Real>>, usize) {
    let total = view_runs.iter().map(|r| r.costs.len()).sum();
    let rows = view_runs
        .iter()
        .map(|r| {
            let uniform = r.costs.windows(2).all(|w| w[0] == w[1]);
            let mean = r.costs.iter().sum::<f64>() / r.costs.len() as f64;
            r.costs
                .iter()
                .map(|&c| if uniform { 0.0 } else { (c - mean) as Real })
                .collect()
        })
        .collect();
    (rows, total)
}

/// Builds the iteration's descent objective for one view: advantage-weighted
/// log-likelihoods of its samples, minus the weighted log-likelihood of the
/// incumbent replayed under the view. Returns None when every term vanishes.
#[allow(clippy::too_many_arguments)]
fn iteration_loss_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    ids: &BTreeMap<String, NodeId>,
    emb_nodes: &EmbNodes,
    log_nodes: &[Option<NodeId>],
    adv: &[Real],
    r_total: usize,
    il: Option<(&Solution, Real)>,
    instance: &Instance,
) -> Result<Option<NodeId>, SearchError> {
    let mut terms: Vec<NodeId> = Vec::new();
    let inv_r = 1.0 / r_total as Real;
    for (row, &a) in adv.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let node = log_nodes[row].expect("sampling captured log probabilities");
        terms.push(tape.scale(node, a * inv_r)?);
    }
    if let Some((incumbent, weight)) = il {
        let forced = [incumbent.actions.clone()];
        let group = net::decode_group(
            tape,
            cfg,
            ids,
            emb_nodes,
            instance,
            &[incumbent.actions[0]],
            StepMode::Forced(&forced),
            true,
            None,
        )?;
        let node = group.log_nodes[0].expect("forced replay captured");
        terms.push(tape.scale(node, -weight)?);
    }
    let mut iter = terms.into_iter();
    let mut acc = match iter.next() {
        None => return Ok(None),
        Some(first) => first,
    };
    for term in iter {
        acc = tape.add(acc, term)?;
    }
    Ok(Some(tape.sum(acc)?))
}

/// Fresh table for a new incumbent. Step probabilities come from replaying
/// the incumbent through the frozen policy against the identity view.
fn rebuilt_table(
    model: &Model,
    emb0: &EmbeddingSet,
    instance: &Instance,
    actions: &[usize],
    config: &SearchConfig,
) -> Result<QTable, SearchError> {
    let probs = model.replay_probs(emb0, instance, actions)?;
    let mut table = QTable::new(instance.n);
    eas_tab_update(&mut table, actions, &probs, config.sigma, config.alpha)?;
    Ok(table)
}

fn all_finite(grads: &BTreeMap<String, Tensor>) -> bool {
    grads.values().all(|t| t.data().iter().all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::model::DecodeMode;
    use crate::problems::generate_instance;

    fn tsp_model(d: usize, seed: u64) -> Model {
        Model::init(ModelConfig::new(d, d, 10.0, ProblemKind::Tsp).unwrap(), seed)
    }

    #[test]
    fn strategy_names_round_trip() {
        for strategy in Strategy::ALL {
            assert_eq!(strategy.name().parse::<Strategy>().unwrap(), strategy);
        }
        assert!(matches!(
            "annealing".parse::<Strategy>(),
            Err(SearchError::UnknownStrategy(_))
        ));
    }

    #[test]
    fn config_validation_names_each_violation() {
        let check = |mutate: fn(&mut SearchConfig), needle: &str| {
            let mut config = SearchConfig::standard(Strategy::EasEmb, 5);
            mutate(&mut config);
            let message = config.validate().unwrap_err().to_string();
            assert!(message.contains(needle), "{message:?} lacks {needle:?}");
        };
        check(|c| c.iterations = 0, "iterations");
        check(|c| c.augmentations = 0, "augmentations");
        check(|c| c.augmentations = 9, "augmentations");
        check(|c| c.starts = 0, "starts");
        check(|c| c.copies = 0, "copies");
        check(|c| c.lambda = -0.5, "lambda");
        check(|c| c.alpha = 0.0, "alpha");
        check(|c| c.sigma = 0.0, "sigma");
        check(|c| c.lr = -1.0, "lr");
        let mut zero_lr = SearchConfig::standard(Strategy::ActiveSearch, 5);
        zero_lr.lr = 0.0;
        zero_lr.validate().unwrap();
    }

    #[test]
    fn incumbent_keeps_the_earlier_of_equal_solutions() {
        let first = Solution { actions: vec![0, 1, 2], cost: 4.0, probs: None };
        let second = Solution { actions: vec![0, 2, 1], cost: 4.0, probs: None };
        let mut incumbent = Incumbent::new();
        assert!(incumbent.offer(&first));
        assert!(!incumbent.offer(&second));
        assert_eq!(incumbent.best().unwrap().actions, vec![0, 1, 2]);
        let lower = Solution { actions: vec![1, 0, 2], cost: 3.5, probs: None };
        assert!(incumbent.offer(&lower));
        assert_eq!(incumbent.cost(), Some(3.5));
    }

    #[test]
    fn incumbent_finds_the_minimum_under_any_offer_order() {
        let costs = [7.0, 3.0, 9.0, 3.0, 5.0, 8.0];
        let orders: [Vec<usize>; 3] =
            [vec![0, 1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1, 0], vec![2, 0, 4, 5, 3, 1]];
        for order in orders {
            let mut incumbent = Incumbent::new();
            for &i in &order {
                incumbent.offer(&Solution { actions: vec![i], cost: costs[i], probs: None });
            }
            assert_eq!(incumbent.cost(), Some(3.0));
        }
    }

    #[test]
    fn rescoring_with_a_fresh_table_is_the_identity() {
        let probs = vec![0.125, 0.0, 0.375, 0.5];
        let table = QTable::new(4);
        let mask = [true, false, true, true];
        let out = eas_tab_rescore(&probs, table.row(0), &mask, 1.0).unwrap();
        assert_eq!(out, probs);
    }

    #[test]
    fn rescoring_matches_the_direct_ratio() {
        let out = eas_tab_rescore(&[0.5, 0.5], &[20.0, 1.0], &[true, true], 1.0).unwrap();
        assert_eq!(out[0], (20.0 as Real) / (21.0 as Real));
        assert_eq!(out[1], (1.0 as Real) / (21.0 as Real));
        let curved =
            eas_tab_rescore(&[0.25, 0.0, 0.75], &[2.0, 5.0, 1.0], &[true, false, true], 2.0)
                .unwrap();
        let raw: [Real; 3] =
            [(0.25 as Real).powf(2.0) * 2.0, 0.0, (0.75 as Real).powf(2.0) * 1.0];
        let total: Real = raw.iter().sum();
        for (got, want) in curved.iter().zip(raw) {
            assert!((got - want / total).abs() <= 1e-9);
        }
    }

    #[test]
    fn rescoring_rejects_malformed_inputs() {
        let table = QTable::new(2);
        let ok = [0.5, 0.5];
        let mask = [true, true];
        assert!(matches!(
            eas_tab_rescore(&ok, table.row(0), &mask, 0.0),
            Err(SearchError::BadConfig(_))
        ));
        assert!(matches!(
            eas_tab_rescore(&[0.5, 0.5, 0.0], table.row(0), &mask, 1.0),
            Err(SearchError::BadDistribution(_))
        ));
        assert!(matches!(
            eas_tab_rescore(&[0.4, 0.4], table.row(0), &mask, 1.0),
            Err(SearchError::BadDistribution(_))
        ));
        assert!(matches!(
            eas_tab_rescore(&[1.0, 0.5], table.row(0), &[true, false], 1.0),
            Err(SearchError::BadDistribution(_))
        ));
        assert!(matches!(
            eas_tab_rescore(&[1.0, 0.0], table.row(0), &mask, 1.0),
            Err(SearchError::BadDistribution(_))
        ));
        assert!(matches!(
            eas_tab_rescore(&ok, &[1.0, 0.0], &mask, 1.0),
            Err(SearchError::BadDistribution(_))
        ));
    }

    #[test]
    fn table_updates_pin_incumbent_edges() {
        let mut table = QTable::new(4);
        eas_tab_update(&mut table, &[0, 1, 2], &[1.0, 0.5, 0.25], 10.0, 1.0).unwrap();
        assert_eq!(table.at(0, 1), 20.0);
        assert_eq!(table.at(1, 2), 40.0);
        for from in 0..4 {
            for to in 0..4 {
                if (from, to) != (0, 1) && (from, to) != (1, 2) {
                    assert_eq!(table.at(from, to), 1.0);
                }
            }
        }
        // A new incumbent rebuilds from scratch: old edges return to 1.
        eas_tab_update(&mut table, &[0, 3, 1], &[1.0, 0.5, 0.5], 10.0, 1.0).unwrap();
        assert_eq!(table.at(0, 3), 20.0);
        assert_eq!(table.at(3, 1), 20.0);
        assert_eq!(table.at(0, 1), 1.0);
        assert_eq!(table.at(1, 2), 1.0);
    }

    #[test]
    fn weak_edges_clamp_to_one() {
        let mut table = QTable::new(2);
        eas_tab_update(&mut table, &[0, 1], &[1.0, 0.99], 0.5, 1.0).unwrap();
        assert_eq!(table.at(0, 1), 1.0);
        // Entries never fall below min(1, sigma).
        assert!(table.flat().iter().all(|&q| q >= 0.5));
    }

    #[test]
    fn table_update_rejects_bad_traces() {
        let mut table = QTable::new(3);
        assert!(matches!(
            eas_tab_update(&mut table, &[0, 1], &[1.0], 10.0, 1.0),
            Err(SearchError::TraceMismatch { .. })
        ));
        assert!(matches!(
            eas_tab_update(&mut table, &[0], &[1.0], 10.0, 1.0),
            Err(SearchError::BadDistribution(_))
        ));
        assert!(matches!(
            eas_tab_update(&mut table, &[0, 7], &[1.0, 0.5], 10.0, 1.0),
            Err(SearchError::NodeOutOfRange { node: 7, n: 3 })
        ));
        assert!(matches!(
            eas_tab_update(&mut table, &[0, 1], &[1.0, 0.0], 10.0, 1.0),
            Err(SearchError::BadDistribution(_))
        ));
        assert!(matches!(
            eas_tab_update(&mut table, &[0, 1], &[1.0, 0.5], -1.0, 1.0),
            Err(SearchError::BadConfig(_))
        ));
    }

    #[test]
    fn blending_endpoints_are_exact() {
        let mut local = QTable::new(3);
        let mut shared = QTable::new(3);
        eas_tab_update(&mut local, &[0, 1, 2], &[1.0, 0.5, 0.5], 10.0, 1.0).unwrap();
        eas_tab_update(&mut shared, &[0, 2, 1], &[1.0, 0.25, 0.5], 10.0, 1.0).unwrap();
        assert_eq!(blend_qtables(&local, &shared, 0.0).unwrap(), local);
        assert_eq!(blend_qtables(&local, &shared, 1.0).unwrap(), shared);
        let mid = blend_qtables(&local, &shared, 0.25).unwrap();
        assert_eq!(mid.at(0, 1), 0.75 * 20.0 + 0.25 * 1.0);
        assert_eq!(mid.at(0, 2), 0.75 * 1.0 + 0.25 * 40.0);
        assert!(matches!(
            blend_qtables(&local, &QTable::new(4), 0.5),
            Err(SearchError::TableShapeMismatch { a: 3, b: 4 })
        ));
        for bad in [-0.1, 1.5, f64::NAN as Real] {
            assert!(matches!(
                blend_qtables(&local, &shared, bad),
                Err(SearchError::BadBlendWeight { .. })
            ));
        }
    }

    #[test]
    fn blend_weight_is_linear_across_the_run() {
        assert_eq!(blend_weight(0, 200), 0.0);
        assert_eq!(blend_weight(199, 200), 1.0);
        assert_eq!(blend_weight(1, 3), 0.5);
        assert_eq!(blend_weight(0, 1), 0.0);
    }

    #[test]
    fn mixed_seeds_differ_across_instances() {
        let a = mix_seed(7, 0);
        let b = mix_seed(7, 1);
        let c = mix_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mix_seed(7, 0));
    }

    // Pure imitation on trainable keys: with the advantage term absent, every
    // update must raise the incumbent's teacher-forced log-likelihood.
    #[test]
    fn imitation_updates_raise_incumbent_likelihood() {
        let instance = generate_instance(ProblemKind::Tsp, 10, 31).unwrap();
        let model = tsp_model(16, 5);
        let emb = model.encode(&instance).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rollouts = model
            .rollout(&instance, DecodeMode::Sample, &[0, 1, 2], &[0], &mut rng, None)
            .unwrap();
        let incumbent =
            rollouts.iter().min_by(|a, b| a.cost.total_cmp(&b.cost)).unwrap().clone();

        let mut keys = NamedParamSet::new();
        keys.insert(KEYS_NAME, emb.keys.clone(), true).unwrap();
        let mut opt = OptimizerState::standard(&keys);
        let forced = [incumbent.actions.clone()];
        let mut log_probs = Vec::new();
        for _ in 0..11 {
            let mut tape = Tape::new();
            let ids = net::register_all(&mut tape, &[&model.params, &keys]).unwrap();
            let mut nodes = net::const_emb_nodes(&mut tape, &emb);
            nodes.keys = ids[KEYS_NAME];
            let group = net::decode_group(
                &mut tape,
                &model.config,
                &ids,
                &nodes,
                &instance,
                &[incumbent.actions[0]],
                StepMode::Forced(&forced),
                true,
                None,
            )
            .unwrap();
            let log_node = group.log_nodes[0].unwrap();
            log_probs.push(tape.value(log_node).data()[0]);
            let loss = tape.scale(log_node, -1.0).unwrap();
            let loss = tape.sum(loss).unwrap();
            let grads = tape.backprop(loss, &Tensor::scalar(1.0), &keys).unwrap();
            opt.apply(&mut keys, &grads, 0.01).unwrap();
        }
        for step in 1..log_probs.len() {
            assert!(
                log_probs[step] > log_probs[step - 1],
                "log-likelihood fell at update {step}: {:?}",
                log_probs
            );
        }
    }

    /// Shared fixture for the finite-difference checks: a small instance, a
    /// few sampled trajectories with advantage weights, and an incumbent for
    /// the imitation term. The imitation weight keeps every coordinate's
    /// gradient well above finite-difference resolution.
    struct FdCase {
        model: Model,
        instance: Instance,
        emb: EmbeddingSet,
        trajectories: Vec<Vec<usize>>,
        starts: Vec<usize>,
        weights: Vec<Real>,
        incumbent: Solution,
    }

    fn fd_case_seeded(instance_seed: u64, model_seed: u64, rng_seed: u64) -> FdCase {
        let instance = generate_instance(ProblemKind::Tsp, 5, instance_seed).unwrap();
        let model = tsp_model(8, model_seed);
        let emb = model.encode(&instance).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let rollouts = model
            .rollout(&instance, DecodeMode::Sample, &[0, 1, 2], &[0], &mut rng, None)
            .unwrap();
        let mean: f64 = rollouts.iter().map(|s| s.cost).sum::<f64>() / rollouts.len() as f64;
        let weights: Vec<Real> =
            rollouts.iter().map(|s| ((s.cost - mean) / rollouts.len() as f64) as Real).collect();
        let incumbent =
            rollouts.iter().min_by(|a, b| a.cost.total_cmp(&b.cost)).unwrap().clone();
        FdCase {
            trajectories: rollouts.iter().map(|s| s.actions.clone()).collect(),
            starts: rollouts.iter().map(|s| s.actions[0]).collect(),
            weights,
            incumbent,
            model,
            instance,
            emb,
        }
    }

    fn fd_case() -> FdCase {
        // Advantage weights sum to zero, so gradient contributions shared by
        // every trajectory cancel; an unlucky draw leaves a coordinate whose
        // true gradient sits below central-difference resolution. These seeds
        // avoid that for all three parametrizations below.
        fd_case_seeded(23, 77, 2)
    }

    fn as_tape_err(e: ModelError) -> TapeError {
        match e {
            ModelError::Tape(t) => t,
            other => TapeError::ShapeMismatch { op: "search", detail: other.to_string() },
        }
    }

    fn fd_worst_lay(case: &FdCase, perturb_seed: u64) -> Real {
        let mut adapter = ResidualAdapter::init(&case.model.config, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(perturb_seed);
        let d = case.model.config.d;
        let d_h = case.model.config.d_h;
        let w2: Vec<Real> = (0..d_h * d).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let b2: Vec<Real> = (0..d).map(|_| rng.gen_range(-0.2..0.2)).collect();
        adapter.params.set_values("adapter.w2", Tensor::matrix(d_h, d, w2).unwrap()).unwrap();
        adapter.params.set_values("adapter.b2", Tensor::vector(b2)).unwrap();
        grad_check(
            |set: &NamedParamSet| {
                let mut tape = Tape::new();
                let ids =
                    net::register_all(&mut tape, &[&case.model.params, set]).map_err(as_tape_err)?;
                let nodes = net::const_emb_nodes(&mut tape, &case.emb);
                let loss = fd_loss(case, &mut tape, &ids, &nodes, 0.3)?;
                Ok((tape, loss))
            },
            &adapter.params,
            1e-5,
        )
        .unwrap()
    }

    fn fd_worst_active(case: &FdCase) -> Real {
        grad_check(
            |set: &NamedParamSet| {
                let mut tape = Tape::new();
                let ids = net::register_all(&mut tape, &[set]).map_err(as_tape_err)?;
                let nodes = net::encode_on_tape(&mut tape, &case.model.config, &ids, &case.instance)
                    .map_err(as_tape_err)?;
                let loss = fd_loss(case, &mut tape, &ids, &nodes, 0.3)?;
                Ok((tape, loss))
            },
            &case.model.params,
            1e-5,
        )
        .unwrap()
    }

    fn fd_worst_emb(case: &FdCase) -> Real {
        let mut keys = NamedParamSet::new();
        keys.insert(KEYS_NAME, case.emb.keys.clone(), true).unwrap();
        grad_check(
            |set: &NamedParamSet| {
                let mut tape = Tape::new();
                let ids =
                    net::register_all(&mut tape, &[&case.model.params, set]).map_err(as_tape_err)?;
                let mut nodes = net::const_emb_nodes(&mut tape, &case.emb);
                nodes.keys = ids[KEYS_NAME];
                let loss = fd_loss(case, &mut tape, &ids, &nodes, 0.3)?;
                Ok((tape, loss))
            },
            &keys,
            1e-5,
        )
        .unwrap()
    }

    /// Replays the fixture's trajectories and incumbent on a fresh tape and
    /// returns the weighted loss node, matching the iteration objective.
    fn fd_loss(
        case: &FdCase,
        tape: &mut Tape,
        ids: &BTreeMap<String, NodeId>,
        nodes: &EmbNodes,
        lambda: Real,
    ) -> Result<NodeId, TapeError> {
        let group = net::decode_group(
            tape,
            &case.model.config,
            ids,
            nodes,
            &case.instance,
            &case.starts,
            StepMode::Forced(&case.trajectories),
            true,
            None,
        )
        .map_err(as_tape_err)?;
        let mut acc = None;
        for (row, &w) in case.weights.iter().enumerate() {
            let term = tape.scale(group.log_nodes[row].unwrap(), w)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        let forced = [case.incumbent.actions.clone()];
        let il = net::decode_group(
            tape,
            &case.model.config,
            ids,
            nodes,
            &case.instance,
            &[case.incumbent.actions[0]],
            StepMode::Forced(&forced),
            true,
            None,
        )
        .map_err(as_tape_err)?;
        let il_term = tape.scale(il.log_nodes[0].unwrap(), -lambda)?;
        let total = tape.add(acc.unwrap(), il_term)?;
        tape.sum(total)
    }

    #[test]
    fn emb_loss_gradient_matches_finite_differences() {
        let worst = fd_worst_emb(&fd_case());
        assert!(worst <= 1e-4, "worst relative error {worst:.3e}");
    }

    // A fresh adapter has an exactly-zero second layer, which would leave the
    // first layer's gradients structurally zero; the helper perturbs it so
    // the check exercises all four tensors.
    #[test]
    fn lay_loss_gradient_matches_finite_differences() {
        let worst = fd_worst_lay(&fd_case(), 12);
        assert!(worst <= 1e-4, "worst relative error {worst:.3e}");
    }

    #[test]
    fn active_loss_gradient_matches_finite_differences() {
        let worst = fd_worst_active(&fd_case());
        assert!(worst <= 1e-4, "worst relative error {worst:.3e}");
    }
}
