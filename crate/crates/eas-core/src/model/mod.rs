//! Construction policy: an attention encoder producing static per-node
//! embeddings and a single-head compatibility decoder with multi-start
//! rollouts, teacher forcing, an optional residual adapter on the query
//! vector, and Q-table rescored decoding.

mod checkpoint;
pub(crate) mod net;

use crate::autodiff::{NamedParamSet, NodeId, Real, Tape, TapeError, Tensor};
use crate::problems::{augment, solution_cost, Instance, ProblemError, ProblemKind, RolloutState, Solution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("autodiff: {0}")]
    Tape(#[from] TapeError),
    #[error("environment: {0}")]
    Problem(#[from] ProblemError),
    #[error("model built for {expected:?} was given a {got:?} instance")]
    KindMismatch { expected: ProblemKind, got: ProblemKind },
    #[error("state is terminal")]
    TerminalState,
    #[error("state has no current node yet; the first action is forced, not decoded")]
    NoCurrentNode,
    #[error("forced action at step {step} has zero probability")]
    ZeroProbabilityAction { step: usize },
    #[error("start list is empty")]
    NoStarts,
    #[error("augmentation list is empty")]
    NoAugmentations,
    #[error("forced sequence of row {row} does not begin with its start node")]
    ForcedStartMismatch { row: usize },
    #[error("rescoring produced an all-zero row")]
    DegenerateRescore,
    #[error("rescore row length {got} does not match action count {want}")]
    BadRescoreRow { want: usize, got: usize },
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint does not match the expected config")]
    ConfigMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width; at least 8 and even.
    pub d: usize,
    /// Adapter hidden width.
    pub d_h: usize,
    /// Logit clipping constant.
    pub c_clip: Real,
    pub kind: ProblemKind,
}

impl ModelConfig {
    pub fn new(d: usize, d_h: usize, c_clip: Real, kind: ProblemKind) -> Result<Self, ModelError> {
        if d < 8 || d % 2 != 0 {
            return Err(ModelError::BadConfig(format!("d must be even and at least 8, got {d}")));
        }
        if d_h == 0 {
            return Err(ModelError::BadConfig("d_h must be positive".into()));
        }
        if !(c_clip > 0.0) {
            return Err(ModelError::BadConfig(format!("c_clip must be positive, got {c_clip}")));
        }
        Ok(ModelConfig { d, d_h, c_clip, kind })
    }

    pub fn standard(kind: ProblemKind) -> Self {
        ModelConfig { d: 64, d_h: 64, c_clip: 10.0, kind }
    }

    fn feature_width(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => 2,
            ProblemKind::Cvrp => 3,
        }
    }

    fn context_width(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => 3 * self.d,
            ProblemKind::Cvrp => 2 * self.d + 1,
        }
    }

    fn ff_width(&self) -> usize {
        2 * self.d
    }
}

/// Static embeddings for one instance, computed once and reused across every
/// decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub emb: Tensor,
    /// Single-head compatibility keys, one per node.
    pub keys: Tensor,
    pub glimpse_keys: Tensor,
    pub glimpse_values: Tensor,
    /// Mean of node embeddings, as a 1×d row.
    pub graph: Tensor,
}

/// Two-layer residual bottleneck applied to the query vector. The second
/// layer starts at exactly zero, so a fresh adapter is inert.
#[derive(Clone, Debug)]
pub struct ResidualAdapter {
    pub params: NamedParamSet,
}

impl ResidualAdapter {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d as Real).sqrt();
        let mut params = NamedParamSet::new();
        let b1: Vec<Real> = (0..config.d_h).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert("adapter.b1", Tensor::vector(b1), true).unwrap();
        params.insert("adapter.b2", Tensor::zeros(vec![config.d]), true).unwrap();
        let w1: Vec<Real> =
            (0..config.d * config.d_h).map(|_| rng.gen_range(-bound..bound)).collect();
        params
            .insert("adapter.w1", Tensor::matrix(config.d, config.d_h, w1).unwrap(), true)
            .unwrap();
        params
            .insert("adapter.w2", Tensor::zeros(vec![config.d_h, config.d]), true)
            .unwrap();
        ResidualAdapter { params }
    }
}

/// A tape plus the scalar node to differentiate; produced by teacher forcing
/// and consumed by optimizer steps.
pub struct ComputationRecord {
    pub tape: Tape,
    pub output: NodeId,
}

impl ComputationRecord {
    /// Gradients of the recorded scalar with respect to `targets`.
    pub fn gradients(
        &self,
        targets: &NamedParamSet,
    ) -> Result<BTreeMap<String, Tensor>, TapeError> {
        let shape = self.tape.value(self.output).shape().to_vec();
        let len: usize = shape.iter().product();
        let seed = Tensor::new(shape, vec![1.0; len]).unwrap();
        self.tape.backprop(self.output, &seed, targets)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: NamedParamSet,
}

impl Model {
    /// Expected tensor names and shapes, in name order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
        let d = config.d;
        let ff = config.ff_width();
        vec![
            ("dec.ctx.b", vec![d]),
            ("dec.ctx.w", vec![config.context_width(), d]),
            ("dec.go.w", vec![d, d]),
            ("enc.attn.wk", vec![d, d]),
            ("enc.attn.wo", vec![d, d]),
            ("enc.attn.wq", vec![d, d]),
            ("enc.attn.wv", vec![d, d]),
            ("enc.ff.b1", vec![ff]),
            ("enc.ff.b2", vec![d]),
            ("enc.ff.w1", vec![d, ff]),
            ("enc.ff.w2", vec![ff, d]),
            ("enc.in.b", vec![d]),
            ("enc.in.w", vec![config.feature_width(), d]),
            ("enc.proj.gk", vec![d, d]),
            ("enc.proj.gv", vec![d, d]),
            ("enc.proj.sk", vec![d, d]),
        ]
    }

    /// Fresh model with weights uniform in [-1/sqrt(d), 1/sqrt(d)], filled in
    /// name order from one seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d as Real).sqrt();
        let mut params = NamedParamSet::new();
        for (name, shape) in Model::expected_shapes(&config) {
            let len: usize = shape.iter().product();
            let data: Vec<Real> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(name, Tensor::new(shape, data).unwrap(), true).unwrap();
        }
        Model { config, params }
    }

    /// Static embeddings for one instance.
    pub fn encode(&self, instance: &Instance) -> Result<EmbeddingSet, ModelError> {
        let mut tape = Tape::new();
        let ids = net::register_all(&mut tape, &[&self.params])?;
        let nodes = net::encode_on_tape(&mut tape, &self.config, &ids, instance)?;
        Ok(EmbeddingSet {
            emb: tape.value(nodes.emb).clone(),
            keys: tape.value(nodes.keys).clone(),
            glimpse_keys: tape.value(nodes.gk).clone(),
            glimpse_values: tape.value(nodes.gv).clone(),
            graph: tape.value(nodes.graph).clone(),
        })
    }

    /// Action distribution for one non-terminal, mid-rollout state. With a
    /// rescore argument, the returned distribution is reshaped by the Q-table
    /// row of the state's current node.
    pub fn decode_step(
        &self,
        emb: &EmbeddingSet,
        instance: &Instance,
        state: &RolloutState,
        adapter: Option<&ResidualAdapter>,
        rescore: Option<(&[Real], Real)>,
    ) -> Result<Vec<Real>, ModelError> {
        let mut sets: Vec<&NamedParamSet> = vec![&self.params];
        if let Some(a) = adapter {
            sets.push(&a.params);
        }
        let mut row =
            net::single_state_distribution(&self.config, &sets, emb, instance, state)?;
        if let Some((qrow, alpha)) = rescore {
            if qrow.len() != instance.n {
                return Err(ModelError::BadRescoreRow { want: instance.n, got: qrow.len() });
            }
            if !net::rescore_in_place(&mut row, qrow, alpha) {
                return Err(ModelError::DegenerateRescore);
            }
        }
        Ok(row)
    }

    /// One solution per (augmentation, start) pair, in augmentation-major
    /// order. Greedy mode breaks ties toward the lowest action index; sample
    /// mode draws from each step's distribution using `rng`. Costs are
    /// evaluated on the original instance.
    pub fn rollout(
        &self,
        instance: &Instance,
        mode: DecodeMode,
        starts: &[usize],
        augmentations: &[u8],
        rng: &mut ChaCha8Rng,
        adapter: Option<&ResidualAdapter>,
    ) -> Result<Vec<Solution>, ModelError> {
        if starts.is_empty() {
            return Err(ModelError::NoStarts);
        }
        if augmentations.is_empty() {
            return Err(ModelError::NoAugmentations);
        }
        let mut sets: Vec<&NamedParamSet> = vec![&self.params];
        if let Some(a) = adapter {
            sets.push(&a.params);
        }
        let mut out = Vec::with_capacity(starts.len() * augmentations.len());
        for &k in augmentations {
            let view = augment(instance, k)?;
            let emb = self.encode(&view)?;
            let mut tape = Tape::new();
            let ids = net::register_all(&mut tape, &sets)?;
            let emb_nodes = net::const_emb_nodes(&mut tape, &emb);
            let step_mode = match mode {
                DecodeMode::Greedy => net::StepMode::Greedy,
                DecodeMode::Sample => net::StepMode::Sample(&mut *rng),
            };
            let group = net::decode_group(
                &mut tape,
                &self.config,
                &ids,
                &emb_nodes,
                instance,
                starts,
                step_mode,
                false,
                None,
            )?;
            for (actions, probs) in group.actions.into_iter().zip(group.probs) {
                let cost = solution_cost(instance, &actions)?;
                let probs = probs.into_iter().map(|p| p as f64).collect();
                out.push(Solution { actions, cost, probs: Some(probs) });
            }
        }
        Ok(out)
    }

    /// Replays `incumbent` through the decoder, returning the summed log
    /// probability of its actions and a record for backprop. The forward pass
    /// includes the encoder, so gradients can reach any parameter subset.
    pub fn teacher_force(
        &self,
        instance: &Instance,
        incumbent: &Solution,
        adapter: Option<&ResidualAdapter>,
    ) -> Result<(Real, ComputationRecord), ModelError> {
        solution_cost(instance, &incumbent.actions)?;
        let mut sets: Vec<&NamedParamSet> = vec![&self.params];
        if let Some(a) = adapter {
            sets.push(&a.params);
        }
        let mut tape = Tape::new();
        let ids = net::register_all(&mut tape, &sets)?;
        let emb_nodes = net::encode_on_tape(&mut tape, &self.config, &ids, instance)?;
        let forced = [incumbent.actions.clone()];
        let group = net::decode_group(
            &mut tape,
            &self.config,
            &ids,
            &emb_nodes,
            instance,
            &[incumbent.actions[0]],
            net::StepMode::Forced(&forced),
            true,
            None,
        )?;
        let output = group.log_nodes[0]
            .ok_or_else(|| ModelError::BadConfig("incumbent has no decoded step".into()))?;
        let value = tape.value(output).data()[0];
        Ok((value, ComputationRecord { tape, output }))
    }

    /// Per-step probabilities the frozen policy assigns to a forced action
    /// sequence, decoded against pre-computed embeddings. Entry 0 covers the
    /// forced start and is always 1.
    pub fn replay_probs(
        &self,
        emb: &EmbeddingSet,
        instance: &Instance,
        actions: &[usize],
    ) -> Result<Vec<Real>, ModelError> {
        if actions.is_empty() {
            return Err(ModelError::BadConfig("empty action sequence".into()));
        }
        solution_cost(instance, actions)?;
        let mut tape = Tape::new();
        let ids = net::register_all(&mut tape, &[&self.params])?;
        let emb_nodes = net::const_emb_nodes(&mut tape, emb);
        let forced = [actions.to_vec()];
        let group = net::decode_group(
            &mut tape,
            &self.config,
            &ids,
            &emb_nodes,
            instance,
            &[actions[0]],
            net::StepMode::Forced(&forced),
            false,
            None,
        )?;
        Ok(group.probs.into_iter().next().expect("one forced row"))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        checkpoint::load(path)
    }

    /// Load and reject any checkpoint whose header differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Model, ModelError> {
        let model = checkpoint::load(path)?;
        if model.config != *expected {
            return Err(ModelError::ConfigMismatch);
        }
        Ok(model)
    }
}
