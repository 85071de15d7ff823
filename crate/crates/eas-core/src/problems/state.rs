//! Rollout state machine shared by both problem kinds. For CVRP, action 0 is
//! an explicit depot return; customer actions are node indices.

use super::{Instance, ProblemError, ProblemKind};

#[derive(Clone, Debug)]
pub struct RolloutState {
    t: usize,
    current: Option<usize>,
    start: Option<usize>,
    visited: Vec<bool>,
    visited_count: usize,
    remaining: u32,
    history: Vec<usize>,
}

impl RolloutState {
    pub fn new(instance: &Instance) -> Result<Self, ProblemError> {
        if instance.kind == ProblemKind::Cvrp {
            instance.validate()?;
        }
        Ok(RolloutState {
            t: 0,
            current: None,
            start: None,
            visited: vec![false; instance.n],
            visited_count: 0,
            remaining: instance.capacity(),
            history: Vec::with_capacity(instance.n),
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Node the vehicle or tour currently occupies; None before the first
    /// action (CVRP conceptually sits at the depot then).
    pub fn current(&self) -> Option<usize> {
        self.current
    }

    /// First visited node, fixed by the first action.
    pub fn start(&self) -> Option<usize> {
        self.start
    }

    pub fn visited(&self, node: usize) -> bool {
        self.visited[node]
    }

    /// Number of distinct customers visited so far.
    pub fn visited_count(&self) -> usize {
        self.visited_count
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    pub fn history(&self) -> &[usize] {
        &self.history
    }

    pub fn is_terminal(&self, instance: &Instance) -> bool {
        self.visited_count == instance.customer_count()
    }

    /// Checks one action without building the whole mask, naming the violated
    /// constraint on rejection.
    pub fn check_action(&self, instance: &Instance, action: usize) -> Result<(), ProblemError> {
        if self.is_terminal(instance) {
            return Err(ProblemError::Terminal);
        }
        if action >= instance.n {
            return Err(ProblemError::UnknownNode { node: action, n: instance.n });
        }
        match instance.kind {
            ProblemKind::Tsp => {
                if self.visited[action] {
                    return Err(ProblemError::RepeatVisit { node: action });
                }
            }
            ProblemKind::Cvrp => {
                if action == 0 {
                    if self.t == 0 || self.current == Some(0) {
                        return Err(ProblemError::EmptyRoute { t: self.t });
                    }
                } else {
                    if self.visited[action] {
                        return Err(ProblemError::RepeatVisit { node: action });
                    }
                    let demand = instance.demand(action);
                    if demand > self.remaining {
                        return Err(ProblemError::CapacityExceeded {
                            node: action,
                            demand,
                            remaining: self.remaining,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies one action in place.
    pub fn advance(&mut self, instance: &Instance, action: usize) -> Result<(), ProblemError> {
        self.check_action(instance, action)?;
        match instance.kind {
            ProblemKind::Tsp => {
                self.visited[action] = true;
                self.visited_count += 1;
            }
            ProblemKind::Cvrp => {
                if action == 0 {
                    self.remaining = instance.capacity();
                } else {
                    self.visited[action] = true;
                    self.visited_count += 1;
                    self.remaining -= instance.demand(action);
                }
            }
        }
        if self.start.is_none() {
            self.start = Some(action);
        }
        self.current = Some(action);
        self.t += 1;
        self.history.push(action);
        Ok(())
    }
}

/// Boolean feasibility over the `instance.n` actions. Rejected on terminal
/// states; otherwise at least one entry is true.
pub fn feasible_mask(instance: &Instance, state: &RolloutState) -> Result<Vec<bool>, ProblemError> {
    if state.is_terminal(instance) {
        return Err(ProblemError::Terminal);
    }
    let mut mask = vec![false; instance.n];
    match instance.kind {
        ProblemKind::Tsp => {
            for (node, slot) in mask.iter_mut().enumerate() {
                *slot = !state.visited[node];
            }
        }
        ProblemKind::Cvrp => {
            mask[0] = state.t > 0 && state.current != Some(0);
            for node in 1..instance.n {
                mask[node] = !state.visited[node] && instance.demand(node) <= state.remaining;
            }
        }
    }
    debug_assert!(mask.iter().any(|&m| m));
    Ok(mask)
}

/// Pure transition: returns the successor state.
pub fn apply_action(
    instance: &Instance,
    state: &RolloutState,
    action: usize,
) -> Result<RolloutState, ProblemError> {
    let mut next = state.clone();
    next.advance(instance, action)?;
    Ok(next)
}
