//! Tape-level network builders shared by rollout, teacher forcing, training,
//! and the search strategies. Everything here operates on leaf-id maps so the
//! same code path serves frozen-parameter forward passes and trainable ones.

use super::{EmbeddingSet, ModelConfig, ModelError};
use crate::autodiff::{NamedParamSet, NodeId, Real, Tape, Tensor};
use crate::problems::{feasible_mask, Instance, ProblemKind, RolloutState};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Tape nodes for one instance's embeddings.
#[derive(Clone, Copy)]
pub(crate) struct EmbNodes {
    pub emb: NodeId,
    pub keys: NodeId,
    pub gk: NodeId,
    pub gv: NodeId,
    pub graph: NodeId,
}

/// Registers every entry of each set as a named leaf, returning name → id.
pub(crate) fn register_all(
    tape: &mut Tape,
    sets: &[&NamedParamSet],
) -> Result<BTreeMap<String, NodeId>, ModelError> {
    let mut ids = BTreeMap::new();
    for set in sets {
        for (name, entry) in set.iter() {
            let id = tape.named_leaf(name, entry.tensor.clone(), entry.trainable)?;
            ids.insert(name.to_string(), id);
        }
    }
    Ok(ids)
}

/// Node feature matrix: (x, y) for TSP, (x, y, demand/capacity) for CVRP.
pub(crate) fn instance_features(
    cfg: &ModelConfig,
    instance: &Instance,
) -> Result<Tensor, ModelError> {
    if instance.kind != cfg.kind {
        return Err(ModelError::KindMismatch { expected: cfg.kind, got: instance.kind });
    }
    let n = instance.n;
    match cfg.kind {
        ProblemKind::Tsp => {
            let mut data = Vec::with_capacity(n * 2);
            for &[x, y] in &instance.coords {
                data.push(x as Real);
                data.push(y as Real);
            }
            Ok(Tensor::matrix(n, 2, data)?)
        }
        ProblemKind::Cvrp => {
            let cap = instance.capacity() as Real;
            let mut data = Vec::with_capacity(n * 3);
            for (i, &[x, y]) in instance.coords.iter().enumerate() {
                data.push(x as Real);
                data.push(y as Real);
                data.push(instance.demand(i) as Real / cap);
            }
            Ok(Tensor::matrix(n, 3, data)?)
        }
    }
}

/// Encoder forward pass on the tape: input projection, one self-attention
/// block with residual, a feed-forward sublayer with residual, then the
/// static projections the decoder consumes.
pub(crate) fn encode_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    ids: &BTreeMap<String, NodeId>,
    instance: &Instance,
) -> Result<EmbNodes, ModelError> {
    let n = instance.n;
    let inv_sqrt_d = 1.0 / (cfg.d as Real).sqrt();
    let x = tape.leaf(instance_features(cfg, instance)?);
    let h0 = tape.matmul(x, ids["enc.in.w"])?;
    let h0 = tape.add(h0, ids["enc.in.b"])?;
    let q = tape.matmul(h0, ids["enc.attn.wq"])?;
    let k = tape.matmul(h0, ids["enc.attn.wk"])?;
    let v = tape.matmul(h0, ids["enc.attn.wv"])?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, inv_sqrt_d)?;
    let ones = tape.leaf(Tensor::matrix(n, n, vec![1.0; n * n])?);
    let attn = tape.masked_softmax(scores, ones)?;
    let mixed = tape.matmul(attn, v)?;
    let mixed = tape.matmul(mixed, ids["enc.attn.wo"])?;
    let h1 = tape.add(h0, mixed)?;
    let f = tape.matmul(h1, ids["enc.ff.w1"])?;
    let f = tape.add(f, ids["enc.ff.b1"])?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, ids["enc.ff.w2"])?;
    let f = tape.add(f, ids["enc.ff.b2"])?;
    let h2 = tape.add(h1, f)?;
    Ok(EmbNodes {
        emb: h2,
        keys: tape.matmul(h2, ids["enc.proj.sk"])?,
        gk: tape.matmul(h2, ids["enc.proj.gk"])?,
        gv: tape.matmul(h2, ids["enc.proj.gv"])?,
        graph: tape.mean(h2)?,
    })
}

/// Precomputed embeddings loaded onto a tape as constants.
pub(crate) fn const_emb_nodes(tape: &mut Tape, set: &EmbeddingSet) -> EmbNodes {
    EmbNodes {
        emb: tape.leaf(set.emb.clone()),
        keys: tape.leaf(set.keys.clone()),
        gk: tape.leaf(set.glimpse_keys.clone()),
        gv: tape.leaf(set.glimpse_values.clone()),
        graph: tape.leaf(set.graph.clone()),
    }
}

/// Q-table view for rescored decoding: a flat row-major n×n table plus the
/// steepness exponent.
#[derive(Clone, Copy)]
pub(crate) struct QtableRef<'a> {
    pub flat: &'a [Real],
    pub n: usize,
    pub alpha: Real,
}

/// Rescores a probability row in place: p_a ← p_a^α · q_a, proportionally
/// renormalized over the positive entries. Returns false when every score
/// vanishes (the defensive impossible case). The α = 1 all-ones fast path
/// leaves the row untouched bit for bit.
pub(crate) fn rescore_in_place(probs: &mut [Real], row: &[Real], alpha: Real) -> bool {
    if alpha == 1.0 && row.iter().all(|&q| q == 1.0) {
        return true;
    }
    let mut total: Real = 0.0;
    for (p, &q) in probs.iter_mut().zip(row) {
        if *p > 0.0 {
            let powed = if alpha == 1.0 { *p } else { p.powf(alpha) };
            *p = powed * q;
            total += *p;
        }
    }
    if !(total > 0.0) || !total.is_finite() {
        return false;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    true
}

pub(crate) enum StepMode<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
    Forced(&'a [Vec<usize>]),
}

pub(crate) struct GroupOutcome {
    /// Actions per start row, first entry being the forced start.
    pub actions: Vec<Vec<usize>>,
    /// Chosen-action probabilities per row (1.0 for the forced start).
    pub probs: Vec<Vec<Real>>,
    /// Per-row sum of log chosen probabilities on the tape, when captured.
    pub log_nodes: Vec<Option<NodeId>>,
}

/// Hoisted per-group nodes that do not change across decoding steps.
struct Hoists {
    w_cur: NodeId,
    w_cap: Option<NodeId>,
    static_ctx: NodeId,
}

fn build_hoists(
    tape: &mut Tape,
    cfg: &ModelConfig,
    ids: &BTreeMap<String, NodeId>,
    emb: &EmbNodes,
    starts: &[usize],
) -> Result<Hoists, ModelError> {
    let d = cfg.d;
    let r_count = starts.len();
    let ctx_w = ids["dec.ctx.w"];
    let rows: Vec<usize> = (0..d).collect();
    let w_graph = tape.gather_rows(ctx_w, &rows)?;
    let rows: Vec<usize> = (d..2 * d).collect();
    let w_cur = tape.gather_rows(ctx_w, &rows)?;
    let base = tape.matmul(emb.graph, w_graph)?;
    let base = tape.add(base, ids["dec.ctx.b"])?;
    let base_rows = tape.gather_rows(base, &vec![0; r_count])?;
    let (static_ctx, w_cap) = match cfg.kind {
        ProblemKind::Tsp => {
            let rows: Vec<usize> = (2 * d..3 * d).collect();
            let w_start = tape.gather_rows(ctx_w, &rows)?;
            let e_start = tape.gather_rows(emb.emb, starts)?;
            let term = tape.matmul(e_start, w_start)?;
            (tape.add(base_rows, term)?, None)
        }
        ProblemKind::Cvrp => (base_rows, Some(tape.gather_rows(ctx_w, &[2 * d])?)),
    };
    Ok(Hoists { w_cur, w_cap, static_ctx })
}

/// One decoding step for a batch of rows: context, optional adapter on the
/// query, masked glimpse, clipped single-head compatibilities, masked
/// softmax. Inactive rows get a dummy depot-only mask and are never read.
fn step_distribution(
    tape: &mut Tape,
    cfg: &ModelConfig,
    ids: &BTreeMap<String, NodeId>,
    emb: &EmbNodes,
    hoists: &Hoists,
    instance: &Instance,
    states: &[RolloutState],
    active: &[bool],
) -> Result<NodeId, ModelError> {
    let n = instance.n;
    let r_count = states.len();
    let inv_sqrt_d = 1.0 / (cfg.d as Real).sqrt();
    let cur: Vec<usize> = states.iter().map(|s| s.current().unwrap_or(0)).collect();
    let e_cur = tape.gather_rows(emb.emb, &cur)?;
    let cur_term = tape.matmul(e_cur, hoists.w_cur)?;
    let mut ctx = tape.add(hoists.static_ctx, cur_term)?;
    if let Some(w_cap) = hoists.w_cap {
        let cap = instance.capacity() as Real;
        let cdata: Vec<Real> = states.iter().map(|s| s.remaining() as Real / cap).collect();
        let cap_leaf = tape.leaf(Tensor::matrix(r_count, 1, cdata)?);
        let cap_term = tape.matmul(cap_leaf, w_cap)?;
        ctx = tape.add(ctx, cap_term)?;
    }
    let q = if ids.contains_key("adapter.w1") {
        let h = tape.matmul(ctx, ids["adapter.w1"])?;
        let h = tape.add(h, ids["adapter.b1"])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, ids["adapter.w2"])?;
        let o = tape.add(o, ids["adapter.b2"])?;
        tape.add(ctx, o)?
    } else {
        ctx
    };
    let mut mdata = vec![0.0 as Real; r_count * n];
    for (r, state) in states.iter().enumerate() {
        if active[r] {
            let mask = feasible_mask(instance, state)?;
            for (slot, ok) in mdata[r * n..(r + 1) * n].iter_mut().zip(mask) {
                *slot = if ok { 1.0 } else { 0.0 };
            }
        } else {
            mdata[r * n] = 1.0;
        }
    }
    let mask = tape.leaf(Tensor::matrix(r_count, n, mdata)?);
    let scores = tape.matmul_nt(q, emb.gk)?;
    let scores = tape.scale(scores, inv_sqrt_d)?;
    let attn = tape.masked_softmax(scores, mask)?;
    let glimpse = tape.matmul(attn, emb.gv)?;
    let glimpse = tape.matmul(glimpse, ids["dec.go.w"])?;
    let compat = tape.matmul_nt(glimpse, emb.keys)?;
    let compat = tape.scale(compat, inv_sqrt_d)?;
    let compat = tape.tanh(compat)?;
    let logits = tape.scale(compat, cfg.c_clip)?;
    Ok(tape.masked_softmax(logits, mask)?)
}

/// Runs a full lockstep rollout for one group of start rows under one set of
/// embeddings. The first action of each row is forced to its start node with
/// probability 1. When `capture` is set, each row's sum of log chosen
/// probabilities is built on the tape for later backprop.
pub(crate) fn decode_group(
    tape: &mut Tape,
    cfg: &ModelConfig,
    ids: &BTreeMap<String, NodeId>,
    emb: &EmbNodes,
    instance: &Instance,
    starts: &[usize],
    mut mode: StepMode,
    capture: bool,
    rescore: Option<QtableRef>,
) -> Result<GroupOutcome, ModelError> {
    debug_assert!(!(capture && rescore.is_some()), "rescored decoding is not differentiated");
    if starts.is_empty() {
        return Err(ModelError::NoStarts);
    }
    let n = instance.n;
    let r_count = starts.len();
    let hoists = build_hoists(tape, cfg, ids, emb, starts)?;
    let mut states = Vec::with_capacity(r_count);
    let mut actions: Vec<Vec<usize>> = Vec::with_capacity(r_count);
    let mut probs: Vec<Vec<Real>> = Vec::with_capacity(r_count);
    let mut log_nodes: Vec<Option<NodeId>> = vec![None; r_count];
    for (r, &start) in starts.iter().enumerate() {
        if let StepMode::Forced(seqs) = &mode {
            if seqs[r].first() != Some(&start) {
                return Err(ModelError::ForcedStartMismatch { row: r });
            }
        }
        let mut state = RolloutState::new(instance)?;
        state.advance(instance, start)?;
        states.push(state);
        actions.push(vec![start]);
        probs.push(vec![1.0]);
    }
    loop {
        let active: Vec<bool> = (0..r_count)
            .map(|r| match &mode {
                StepMode::Forced(seqs) => actions[r].len() < seqs[r].len(),
                _ => !states[r].is_terminal(instance),
            })
            .collect();
        if !active.iter().any(|&a| a) {
            break;
        }
        let p = step_distribution(tape, cfg, ids, emb, &hoists, instance, &states, &active)?;
        let pv = tape.value(p).clone();
        for r in 0..r_count {
            if !active[r] {
                continue;
            }
            let mut row: Vec<Real> = pv.row(r).to_vec();
            if let Some(q) = &rescore {
                let cur = states[r].current().unwrap_or(0);
                if !rescore_in_place(&mut row, &q.flat[cur * q.n..(cur + 1) * q.n], q.alpha) {
                    return Err(ModelError::DegenerateRescore);
                }
            }
            let choice = match &mut mode {
                StepMode::Greedy => argmax(&row),
                StepMode::Sample(rng) => draw(&row, rng),
                StepMode::Forced(seqs) => seqs[r][actions[r].len()],
            };
            let chosen = row.get(choice).copied().unwrap_or(0.0);
            if !(chosen > 0.0) {
                return Err(ModelError::ZeroProbabilityAction { step: actions[r].len() });
            }
            if capture {
                let pr = tape.gather_rows(p, &[r])?;
                let mut oh = vec![0.0 as Real; n];
                oh[choice] = 1.0;
                let oh = tape.leaf(Tensor::matrix(n, 1, oh)?);
                let cp = tape.matmul(pr, oh)?;
                let lg = tape.log(cp)?;
                log_nodes[r] = Some(match log_nodes[r] {
                    Some(prev) => tape.add(prev, lg)?,
                    None => lg,
                });
            }
            states[r].advance(instance, choice)?;
            actions[r].push(choice);
            probs[r].push(chosen);
        }
    }
    for state in &states {
        if !state.is_terminal(instance) {
            let missing = instance.customer_count() - state.visited_count();
            return Err(crate::problems::ProblemError::Incomplete { missing }.into());
        }
    }
    Ok(GroupOutcome { actions, probs, log_nodes })
}

/// Probability vector for one mid-rollout state, built on a throwaway tape.
pub(crate) fn single_state_distribution(
    cfg: &ModelConfig,
    param_sets: &[&NamedParamSet],
    emb_set: &EmbeddingSet,
    instance: &Instance,
    state: &RolloutState,
) -> Result<Vec<Real>, ModelError> {
    if state.is_terminal(instance) {
        return Err(ModelError::TerminalState);
    }
    let start = match state.start() {
        Some(s) => s,
        None => return Err(ModelError::NoCurrentNode),
    };
    let mut tape = Tape::new();
    let ids = register_all(&mut tape, param_sets)?;
    let emb = const_emb_nodes(&mut tape, emb_set);
    let hoists = build_hoists(&mut tape, cfg, &ids, &emb, &[start])?;
    let states = [state.clone()];
    let p = step_distribution(&mut tape, cfg, &ids, &emb, &hoists, instance, &states, &[true])?;
    Ok(tape.value(p).row(0).to_vec())
}

fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    let mut best_v = Real::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw over the row; zero-probability entries can never be
/// selected, and the trailing positive entry absorbs float shortfall.
fn draw(row: &[Real], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0f64;
    let mut fallback = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > 0.0 {
            fallback = i;
            cum += v as f64;
            if cum > u {
                return i;
            }
        }
    }
    fallback
}
