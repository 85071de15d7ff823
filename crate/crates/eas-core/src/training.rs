//! REINFORCE training with a shared multi-start baseline: every instance is
//! rolled out from several start nodes, each trajectory's advantage is its
//! cost minus the mean cost over those starts, and one adaptive-moment update
//! is applied per batch. Produces the checkpoint the search strategies load.

use crate::autodiff::{NamedParamSet, NodeId, Real, Tape, TapeError, Tensor};
use crate::model::{DecodeMode, Model, ModelConfig, ModelError};
use crate::problems::{generate_instance, solution_cost, Instance, ProblemError, ProblemKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("environment: {0}")]
    Problem(#[from] ProblemError),
    #[error("autodiff: {0}")]
    Tape(#[from] TapeError),
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("need at least 2 costs for a shared baseline, got {got}")]
    TooFewCosts { got: usize },
    #[error("gradient for unknown or untracked parameter {name:?}")]
    UnknownParam { name: String },
    #[error("gradient shape for {name:?} does not match the parameter")]
    GradShape { name: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Problem size: node count for TSP, customer count for CVRP.
    pub n: usize,
    /// Instances per optimizer step.
    pub batch_size: usize,
    /// Rollout starts per instance; the shared baseline needs at least 2.
    pub starts: usize,
    pub steps: usize,
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    pub seed: u64,
    pub val_size: usize,
    /// A validation record is written every this many steps.
    pub val_cadence: usize,
}

impl TrainConfig {
    pub fn standard(model: ModelConfig, n: usize) -> TrainConfig {
        TrainConfig {
            model,
            n,
            batch_size: 16,
            starts: n,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            val_size: 64,
            val_cadence: 100,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.starts < 2 {
            return Err(TrainError::BadConfig(format!(
                "starts must be at least 2 for the shared baseline, got {}",
                self.starts
            )));
        }
        if self.starts > self.n {
            return Err(TrainError::BadConfig(format!(
                "{} starts but only {} distinct start nodes",
                self.starts, self.n
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be positive".into()));
        }
        if self.val_cadence == 0 {
            return Err(TrainError::BadConfig("validation cadence must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.epsilon > 0.0) {
            return Err(TrainError::BadConfig("lr and epsilon must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::BadConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// Start nodes used for every rollout: the first `starts` nodes for TSP,
    /// the first `starts` customers for CVRP (the depot is never a start).
    pub fn start_nodes(&self) -> Vec<usize> {
        default_starts(self.model.kind, self.starts)
    }
}

pub fn default_starts(kind: ProblemKind, count: usize) -> Vec<usize> {
    match kind {
        ProblemKind::Tsp => (0..count).collect(),
        ProblemKind::Cvrp => (1..=count).collect(),
    }
}

/// Adaptive-moment optimizer state; one first/second moment buffer per
/// trainable tensor plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    beta1: Real,
    beta2: Real,
    epsilon: Real,
    t: u64,
    m: BTreeMap<String, Vec<Real>>,
    v: BTreeMap<String, Vec<Real>>,
}

impl OptimizerState {
    pub fn new(params: &NamedParamSet, beta1: Real, beta2: Real, epsilon: Real) -> OptimizerState {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, tensor) in params.trainable_iter() {
            m.insert(name.to_string(), vec![0.0; tensor.len()]);
            v.insert(name.to_string(), vec![0.0; tensor.len()]);
        }
        OptimizerState { beta1, beta2, epsilon, t: 0, m, v }
    }

    /// The 0.9 / 0.999 / 1e-8 defaults.
    pub fn standard(params: &NamedParamSet) -> OptimizerState {
        OptimizerState::new(params, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update of every tracked tensor. Missing gradient entries are
    /// treated as zero; unknown ones are rejected.
    pub fn apply(
        &mut self,
        params: &mut NamedParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: Real,
    ) -> Result<(), TrainError> {
        for name in grads.keys() {
            if !self.m.contains_key(name) {
                return Err(TrainError::UnknownParam { name: name.clone() });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = self.m.keys().cloned().collect();
        for name in names {
            let current = params
                .get(&name)
                .ok_or_else(|| TrainError::UnknownParam { name: name.clone() })?;
            let m = self.m.get_mut(&name).unwrap();
            if let Some(g) = grads.get(&name) {
                if g.len() != m.len() {
                    return Err(TrainError::GradShape { name });
                }
            }
            let zero = [];
            let g: &[Real] = grads.get(&name).map(|t| t.data()).unwrap_or(&zero);
            let v = self.v.get_mut(&name).unwrap();
            let mut next = current.data().to_vec();
            for i in 0..next.len() {
                let gi = g.get(i).copied().unwrap_or(0.0);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                next[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            let shape = current.shape().to_vec();
            params.set_values(&name, Tensor::new(shape, next)?)?;
        }
        Ok(())
    }
}

/// Advantage of each cost against the mean of its own group. Bit-identical
/// costs short-circuit to exact zeros, so a degenerate group cannot leak
/// rounding noise into the gradient.
pub fn pomo_advantages(costs: &[Real]) -> Result<Vec<Real>, TrainError> {
    if costs.len() < 2 {
        return Err(TrainError::TooFewCosts { got: costs.len() });
    }
    if costs.windows(2).all(|w| w[0] == w[1]) {
        return Ok(vec![0.0; costs.len()]);
    }
    let mean = costs.iter().sum::<Real>() / costs.len() as Real;
    Ok(costs.iter().map(|&c| c - mean).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub mean_cost: Real,
    pub baseline: Real,
    pub grad_norm: Real,
    /// True when a non-finite gradient was dropped instead of applied.
    pub skipped: bool,
}

/// Weighted sum of forced-trajectory log probabilities as a scalar tape node.
/// The finite-difference checks rebuild the training loss through this.
#[cfg(test)]
fn surrogate_node(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &NamedParamSet,
    instance: &Instance,
    trajectories: &[Vec<usize>],
    weights: &[Real],
) -> Result<NodeId, ModelError> {
    let ids = crate::model::net::register_all(tape, &[params])?;
    let emb = crate::model::net::encode_on_tape(tape, config, &ids, instance)?;
    let starts: Vec<usize> = trajectories.iter().map(|t| t[0]).collect();
    let group = crate::model::net::decode_group(
        tape,
        config,
        &ids,
        &emb,
        instance,
        &starts,
        crate::model::net::StepMode::Forced(trajectories),
        true,
        None,
    )?;
    let mut total: Option<NodeId> = None;
    for (node, &w) in group.log_nodes.iter().zip(weights) {
        let node = node.expect("forced trajectories always decode at least one step");
        let scaled = tape.scale(node, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(tape.sum(total.expect("at least one trajectory"))?)
}

pub(crate) fn accumulate(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (name, tensor) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(tensor.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, tensor);
            }
        }
    }
}

fn grad_norm(grads: &BTreeMap<String, Tensor>) -> Real {
    grads
        .values()
        .map(|t| t.data().iter().map(|&v| v * v).sum::<Real>())
        .sum::<Real>()
        .sqrt()
}

/// Sampled multi-start policy gradient over a batch: for each instance, the
/// rollouts share a mean-cost baseline, and each trajectory contributes
/// advantage times the gradient of its log probability, averaged over the
/// starts times instances total.
pub fn policy_gradient(
    model: &Model,
    batch: &[Instance],
    starts: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(BTreeMap<String, Tensor>, StepStats), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::BadConfig("empty instance batch".into()));
    }
    if starts.len() < 2 {
        return Err(TrainError::TooFewCosts { got: starts.len() });
    }
    let scale = 1.0 / (batch.len() * starts.len()) as Real;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut cost_total: Real = 0.0;
    let mut baseline_total: Real = 0.0;
    for instance in batch {
        let mut tape = Tape::new();
        let ids = crate::model::net::register_all(&mut tape, &[&model.params])?;
        let emb = crate::model::net::encode_on_tape(&mut tape, &model.config, &ids, instance)?;
        let group = crate::model::net::decode_group(
            &mut tape,
            &model.config,
            &ids,
            &emb,
            instance,
            starts,
            crate::model::net::StepMode::Sample(rng),
            true,
            None,
        )?;
        let costs: Vec<Real> = group
            .actions
            .iter()
            .map(|a| solution_cost(instance, a).map(|c| c as Real))
            .collect::<Result<_, _>>()?;
        let advantages = pomo_advantages(&costs)?;
        cost_total += costs.iter().sum::<Real>() / costs.len() as Real;
        baseline_total += costs.iter().sum::<Real>() / costs.len() as Real;
        let mut total: Option<NodeId> = None;
        for (r, &adv) in advantages.iter().enumerate() {
            if adv == 0.0 {
                continue;
            }
            let node = group.log_nodes[r].expect("captured rollout has a log node");
            let scaled = tape.scale(node, adv * scale)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
        if let Some(total) = total {
            let out = tape.sum(total)?;
            let g = tape.backprop(out, &Tensor::scalar(1.0), &model.params)?;
            accumulate(&mut grads, g);
        }
    }
    let stats = StepStats {
        mean_cost: cost_total / batch.len() as Real,
        baseline: baseline_total / batch.len() as Real,
        grad_norm: grad_norm(&grads),
        skipped: false,
    };
    Ok((grads, stats))
}

/// One sampled batch gradient plus one optimizer update. A non-finite
/// gradient is dropped: the step is reported as skipped and neither the
/// parameters nor the optimizer state move.
pub fn reinforce_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[Instance],
    starts: &[usize],
    lr: Real,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats, TrainError> {
    let (grads, mut stats) = policy_gradient(model, batch, starts, rng)?;
    if !stats.grad_norm.is_finite() {
        stats.skipped = true;
        return Ok(stats);
    }
    opt.apply(&mut model.params, &grads, lr)?;
    Ok(stats)
}

/// Mean over instances of the best greedy multi-start cost, no augmentation.
pub fn validation_cost(
    model: &Model,
    instances: &[Instance],
    starts: &[usize],
) -> Result<Real, TrainError> {
    if instances.is_empty() {
        return Err(TrainError::BadConfig("empty validation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total: Real = 0.0;
    for instance in instances {
        let sols = model.rollout(instance, DecodeMode::Greedy, starts, &[0], &mut rng, None)?;
        let best = sols.iter().map(|s| s.cost).fold(f64::INFINITY, f64::min);
        total += best as Real;
    }
    Ok(total / instances.len() as Real)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRecord {
    pub step: usize,
    pub mean_train_cost: Real,
    pub baseline: Real,
    pub grad_norm: Real,
    pub val_greedy_cost: Real,
}

pub const CURVE_CSV_HEADER: &str = "step,mean_train_cost,baseline,grad_norm,val_greedy_cost";

pub fn curve_csv(records: &[CurveRecord]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.mean_train_cost, r.baseline, r.grad_norm, r.val_greedy_cost
        ));
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<CurveRecord>,
    pub skipped_steps: usize,
}

/// Full training loop. The model seed, every batch instance seed, and the
/// validation set all derive from one master stream, so a (config, seed) pair
/// fixes the resulting checkpoint bytes.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let kind = config.model.kind;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(config.model, rng.gen());
    let mut opt = OptimizerState::new(&model.params, config.beta1, config.beta2, config.epsilon);
    let val: Vec<Instance> = (0..config.val_size)
        .map(|_| generate_instance(kind, config.n, rng.gen()))
        .collect::<Result<_, _>>()?;
    let starts = config.start_nodes();
    let mut records = Vec::new();
    let mut skipped_steps = 0;
    for step in 1..=config.steps {
        let batch: Vec<Instance> = (0..config.batch_size)
            .map(|_| generate_instance(kind, config.n, rng.gen()))
            .collect::<Result<_, _>>()?;
        let stats = reinforce_step(&mut model, &mut opt, &batch, &starts, config.lr, &mut rng)?;
        if stats.skipped {
            skipped_steps += 1;
        }
        if step % config.val_cadence == 0 {
            let val_cost = if val.is_empty() {
                Real::NAN
            } else {
                validation_cost(&model, &val, &starts)?
            };
            records.push(CurveRecord {
                step,
                mean_train_cost: stats.mean_cost,
                baseline: stats.baseline,
                grad_norm: stats.grad_norm,
                val_greedy_cost: val_cost,
            });
        }
    }
    Ok(TrainOutcome { model, records, skipped_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ResidualAdapter;

    fn tsp_config() -> ModelConfig {
        ModelConfig::new(8, 8, 10.0, ProblemKind::Tsp).unwrap()
    }

    fn as_tape_err(e: ModelError) -> TapeError {
        match e {
            ModelError::Tape(t) => t,
            other => TapeError::ShapeMismatch { op: "surrogate", detail: other.to_string() },
        }
    }

    #[test]
    fn advantages_subtract_the_group_mean() {
        let adv = pomo_advantages(&[10.0, 12.0, 14.0]).unwrap();
        assert_eq!(adv, vec![-2.0, 0.0, 2.0]);
    }

    #[test]
    fn equal_costs_give_exactly_zero_advantages() {
        let adv = pomo_advantages(&[0.1, 0.1, 0.1]).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        assert!(matches!(pomo_advantages(&[1.0]), Err(TrainError::TooFewCosts { got: 1 })));
    }

    #[test]
    fn advantages_sum_to_zero_on_random_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let len = rng.gen_range(2..12);
            let costs: Vec<Real> = (0..len).map(|_| rng.gen_range(0.0..50.0)).collect();
            let sum: Real = pomo_advantages(&costs).unwrap().iter().sum();
            assert!(sum.abs() <= 1e-9);
        }
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let config = tsp_config();
        // Advantage weights sum to zero, so encoder gradient terms shared by
        // all trajectories cancel; an unlucky draw leaves a coordinate whose
        // true gradient sits below central-difference resolution. These seeds
        // avoid that; the magnitude-aware sweep below covers the general
        // case.
        let model = Model::init(config, 41);
        let inst = generate_instance(ProblemKind::Tsp, 5, 8).unwrap();
        let starts: Vec<usize> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sols = model
            .rollout(&inst, DecodeMode::Sample, &starts, &[0], &mut rng, None)
            .unwrap();
        let costs: Vec<Real> = sols.iter().map(|s| s.cost as Real).collect();
        let advantages = pomo_advantages(&costs).unwrap();
        let weights: Vec<Real> = advantages.iter().map(|a| a / costs.len() as Real).collect();
        let trajectories: Vec<Vec<usize>> = sols.iter().map(|s| s.actions.clone()).collect();
        let err = crate::autodiff::grad_check(
            |p: &NamedParamSet| {
                let mut tape = Tape::new();
                let out = surrogate_node(&mut tape, &config, p, &inst, &trajectories, &weights)
                    .map_err(as_tape_err)?;
                Ok((tape, out))
            },
            &model.params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "worst relative error {err}");
    }

    /// Magnitude-aware sweep: every coordinate whose gradient is large
    /// enough for central differences to resolve must agree tightly, and the
    /// near-cancelled rest must agree absolutely. Stronger than a plain
    /// grad_check because no coordinate is excused, only measured
    /// appropriately.
    #[test]
    fn surrogate_gradient_sweep_with_cancelling_advantages() {
        let config = tsp_config();
        let model = Model::init(config, 5);
        let inst = generate_instance(ProblemKind::Tsp, 5, 3).unwrap();
        let starts: Vec<usize> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sols = model
            .rollout(&inst, DecodeMode::Sample, &starts, &[0], &mut rng, None)
            .unwrap();
        let costs: Vec<Real> = sols.iter().map(|s| s.cost as Real).collect();
        let advantages = pomo_advantages(&costs).unwrap();
        let weights: Vec<Real> = advantages.iter().map(|a| a / costs.len() as Real).collect();
        let trajectories: Vec<Vec<usize>> = sols.iter().map(|s| s.actions.clone()).collect();

        let eval = |p: &NamedParamSet| -> Real {
            let mut tape = Tape::new();
            let out = surrogate_node(&mut tape, &config, p, &inst, &trajectories, &weights).unwrap();
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let out = surrogate_node(&mut tape, &config, &model.params, &inst, &trajectories, &weights)
            .unwrap();
        let analytic = tape.backprop(out, &Tensor::scalar(1.0), &model.params).unwrap();

        let step = 1e-5 as Real;
        let mut worst_sig: Real = 0.0;
        let mut worst_abs_small: Real = 0.0;
        let mut small = 0usize;
        let mut total = 0usize;
        for (name, tensor) in model.params.trainable_iter() {
            let grad = &analytic[name];
            for i in 0..tensor.len() {
                let mut plus = model.params.clone();
                let mut t = tensor.clone();
                t.data_mut()[i] += step;
                plus.set_values(name, t).unwrap();
                let mut minus = model.params.clone();
                let mut t = tensor.clone();
                t.data_mut()[i] -= step;
                minus.set_values(name, t).unwrap();
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = grad.data()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-12);
                let err = (a - numeric).abs() / denom;
                total += 1;
                if a.abs().max(numeric.abs()) < 1e-6 {
                    small += 1;
                    worst_abs_small = worst_abs_small.max((a - numeric).abs());
                } else if err > worst_sig {
                    worst_sig = err;
                }
            }
        }
        assert!(total > 900, "expected to sweep the full parameter set, saw {total}");
        assert!(small < total / 2, "degenerate configuration: {small} of {total} cancelled");
        assert!(worst_sig <= 1e-4, "significant-coordinate error {worst_sig}");
        assert!(
            worst_abs_small <= 1e-6,
            "near-cancelled coordinate absolute disagreement {worst_abs_small}"
        );
    }

    #[test]
    fn adapter_surrogate_gradient_matches_finite_differences() {
        let config = tsp_config();
        let model = Model::init(config, 11);
        let adapter = ResidualAdapter::init(&config, 12);
        let inst = generate_instance(ProblemKind::Tsp, 5, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sols = model
            .rollout(&inst, DecodeMode::Sample, &[0, 2, 4], &[0], &mut rng, Some(&adapter))
            .unwrap();
        let trajectories: Vec<Vec<usize>> = sols.iter().map(|s| s.actions.clone()).collect();
        let weights = vec![0.7, -0.2, -0.5];
        // Differentiate the adapter parameters only; the model weights ride
        // along as frozen leaves inside the closure.
        let err = crate::autodiff::grad_check(
            |p: &NamedParamSet| {
                let mut tape = Tape::new();
                let ids = crate::model::net::register_all(&mut tape, &[&model.params, p])
                    .map_err(as_tape_err)?;
                let emb =
                    crate::model::net::encode_on_tape(&mut tape, &config, &ids, &inst)
                        .map_err(as_tape_err)?;
                let group = crate::model::net::decode_group(
                    &mut tape,
                    &config,
                    &ids,
                    &emb,
                    &inst,
                    &[0, 2, 4],
                    crate::model::net::StepMode::Forced(&trajectories),
                    true,
                    None,
                )
                .map_err(as_tape_err)?;
                let mut total: Option<NodeId> = None;
                for (node, &w) in group.log_nodes.iter().zip(&weights) {
                    let scaled = tape.scale(node.unwrap(), w)?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, scaled)?,
                        None => scaled,
                    });
                }
                let out = tape.sum(total.unwrap())?;
                Ok((tape, out))
            },
            &adapter.params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "worst relative error {err}");
    }

    #[test]
    fn zeroed_weights_give_exactly_zero_gradients() {
        let config = tsp_config();
        let mut model = Model::init(config, 1);
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in names {
            let shape = model.params.get(&name).unwrap().shape().to_vec();
            model.params.set_values(&name, Tensor::zeros(shape)).unwrap();
        }
        let square = Instance {
            kind: ProblemKind::Tsp,
            n: 4,
            coords: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            demands: None,
            capacity: None,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut saw_mixed_costs = false;
        for _ in 0..40 {
            let (grads, stats) =
                policy_gradient(&model, &[square.clone()], &[0, 1, 2, 3], &mut rng).unwrap();
            assert_eq!(stats.grad_norm, 0.0);
            for tensor in grads.values() {
                assert!(tensor.data().iter().all(|&g| g == 0.0));
            }
            if stats.mean_cost > 4.0 + 1e-9 {
                saw_mixed_costs = true;
            }
        }
        // The uniform policy mixes tour shapes, so the zero gradient above is
        // a structural fact, not a zero-advantage accident.
        assert!(saw_mixed_costs);
    }

    #[test]
    fn single_tour_instances_show_no_gradient_drift() {
        let config = tsp_config();
        let model = Model::init(config, 9);
        let inst = generate_instance(ProblemKind::Tsp, 3, 14).unwrap();
        let starts = [0, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut samples: Vec<Vec<Real>> = Vec::new();
        for _ in 0..200 {
            let (grads, _) = policy_gradient(&model, &[inst.clone()], &starts, &mut rng).unwrap();
            let mut flat = Vec::new();
            for (name, _) in model.params.iter() {
                match grads.get(name) {
                    Some(t) => flat.extend_from_slice(t.data()),
                    None => flat.extend(std::iter::repeat(0.0).take(
                        model.params.get(name).unwrap().len(),
                    )),
                }
            }
            samples.push(flat);
        }
        let m = samples.len() as Real;
        let dim = samples[0].len();
        let mut mean_sq = 0.0;
        let mut se_sq = 0.0;
        for i in 0..dim {
            let mean: Real = samples.iter().map(|s| s[i]).sum::<Real>() / m;
            let var: Real =
                samples.iter().map(|s| (s[i] - mean) * (s[i] - mean)).sum::<Real>() / (m - 1.0);
            mean_sq += mean * mean;
            se_sq += var / m;
        }
        // All tours of a 3-node instance share one cost, so the true gradient
        // is zero; the empirical mean may only be sampling noise.
        assert!(
            mean_sq.sqrt() <= 4.0 * se_sq.sqrt() + 1e-12,
            "drift norm {} vs standard error {}",
            mean_sq.sqrt(),
            se_sq.sqrt()
        );
    }

    #[test]
    fn first_adam_step_moves_by_roughly_the_learning_rate() {
        let mut params = NamedParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0, -2.0]), true).unwrap();
        let mut opt = OptimizerState::standard(&params);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![0.5, -0.5]));
        opt.apply(&mut params, &grads, 0.01).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.01)).abs() <= 1e-6);
        assert!((w[1] - (-2.0 + 0.01)).abs() <= 1e-6);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn unknown_gradient_names_are_rejected() {
        let mut params = NamedParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0]), true).unwrap();
        let mut opt = OptimizerState::standard(&params);
        let mut grads = BTreeMap::new();
        grads.insert("nope".to_string(), Tensor::vector(vec![1.0]));
        assert!(matches!(
            opt.apply(&mut params, &grads, 0.1),
            Err(TrainError::UnknownParam { .. })
        ));
    }

    #[test]
    fn coincident_cities_leave_parameters_untouched() {
        let config = tsp_config();
        let mut model = Model::init(config, 21);
        let before = model.clone();
        let mut opt = OptimizerState::standard(&model.params);
        let flat = Instance {
            kind: ProblemKind::Tsp,
            n: 4,
            coords: vec![[0.3, 0.7]; 4],
            demands: None,
            capacity: None,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats =
            reinforce_step(&mut model, &mut opt, &[flat], &[0, 1, 2, 3], 1e-3, &mut rng).unwrap();
        assert_eq!(stats.mean_cost, 0.0);
        assert_eq!(stats.grad_norm, 0.0);
        assert!(!stats.skipped);
        for (name, entry) in before.params.iter() {
            assert_eq!(entry.tensor, *model.params.get(name).unwrap(), "{name} drifted");
        }
    }

    #[test]
    fn training_is_deterministic_in_config_and_seed() {
        let mut config = TrainConfig::standard(tsp_config(), 5);
        config.batch_size = 2;
        config.steps = 3;
        config.starts = 3;
        config.val_size = 2;
        config.val_cadence = 1;
        config.seed = 33;
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(a.records, b.records);
        for (name, entry) in a.model.params.iter() {
            assert_eq!(entry.tensor, *b.model.params.get(name).unwrap(), "{name} diverged");
        }
        assert_eq!(a.records.len(), 3);
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let mut config = TrainConfig::standard(tsp_config(), 5);
        config.steps = 0;
        config.val_size = 0;
        let out = train(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let expected = Model::init(config.model, rng.gen());
        for (name, entry) in expected.params.iter() {
            assert_eq!(entry.tensor, *out.model.params.get(name).unwrap(), "{name} differs");
        }
        assert!(out.records.is_empty());
    }

    #[test]
    fn record_count_is_steps_over_cadence() {
        let mut config = TrainConfig::standard(tsp_config(), 5);
        config.batch_size = 1;
        config.starts = 3;
        config.steps = 7;
        config.val_cadence = 3;
        config.val_size = 1;
        let out = train(&config).unwrap();
        assert_eq!(out.records.len(), 7 / 3);
        assert_eq!(out.records[0].step, 3);
        assert_eq!(out.records[1].step, 6);
        let csv = curve_csv(&out.records);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(CURVE_CSV_HEADER));
    }

    #[test]
    fn config_validation_names_each_violation() {
        let base = TrainConfig::standard(tsp_config(), 5);
        let mut c = base;
        c.starts = 1;
        assert!(c.validate().is_err());
        let mut c = base;
        c.starts = 6;
        assert!(c.validate().is_err());
        let mut c = base;
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.val_cadence = 0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        assert!(base.validate().is_ok());
    }
}
