//! Exact solvers for small instances and a deterministic improvement
//! heuristic usable at any size.

use super::{route_length, Instance, ProblemError, ProblemKind, Solution};

const TSP_EXACT_LIMIT: usize = 16;
const CVRP_EXACT_LIMIT: usize = 8;

/// Provably optimal cost. TSP up to 16 nodes via the Held-Karp dynamic
/// program; CVRP up to 8 customers via route enumeration plus a partition
/// dynamic program.
pub fn exact_optimum(instance: &Instance) -> Result<f64, ProblemError> {
    match instance.kind {
        ProblemKind::Tsp => held_karp(instance),
        ProblemKind::Cvrp => cvrp_exact(instance),
    }
}

/// Whether `exact_optimum` accepts an instance of this size.
pub fn exact_supported(instance: &Instance) -> bool {
    match instance.kind {
        ProblemKind::Tsp => instance.n <= TSP_EXACT_LIMIT,
        ProblemKind::Cvrp => instance.customer_count() <= CVRP_EXACT_LIMIT,
    }
}

/// Held-Karp over paths anchored at node 0. Path costs accumulate edge by
/// edge from the start, so the optimum equals a plain left-to-right sum over
/// the best permutation, bit for bit.
fn held_karp(instance: &Instance) -> Result<f64, ProblemError> {
    let n = instance.n;
    if n > TSP_EXACT_LIMIT {
        return Err(ProblemError::OracleLimit { got: n, unit: "nodes", limit: TSP_EXACT_LIMIT });
    }
    let m = n - 1;
    let full = (1usize << m) - 1;
    // dp[mask][j]: cheapest path 0 -> ... -> node j+1 visiting exactly the
    // nodes of mask (bit i is node i+1).
    let mut dp = vec![f64::INFINITY; (full + 1) * m];
    for j in 0..m {
        dp[(1 << j) * m + j] = instance.dist(0, j + 1);
    }
    for mask in 1..=full {
        for j in 0..m {
            if mask & (1 << j) == 0 {
                continue;
            }
            let base = dp[mask * m + j];
            if !base.is_finite() {
                continue;
            }
            for k in 0..m {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = mask | (1 << k);
                let cand = base + instance.dist(j + 1, k + 1);
                if cand < dp[next * m + k] {
                    dp[next * m + k] = cand;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    for j in 0..m {
        let cand = dp[full * m + j] + instance.dist(j + 1, 0);
        if cand < best {
            best = cand;
        }
    }
    Ok(best)
}

/// Exact CVRP: Held-Karp path costs over customer subsets give the optimal
/// single route per capacity-feasible subset; a subset-partition dynamic
/// program assembles routes into the optimal plan.
fn cvrp_exact(instance: &Instance) -> Result<f64, ProblemError> {
    instance.validate()?;
    let m = instance.customer_count();
    if m > CVRP_EXACT_LIMIT {
        return Err(ProblemError::OracleLimit { got: m, unit: "customers", limit: CVRP_EXACT_LIMIT });
    }
    let capacity = instance.capacity();
    let full = (1usize << m) - 1;
    let mut path = vec![f64::INFINITY; (full + 1) * m];
    for j in 0..m {
        path[(1 << j) * m + j] = instance.dist(0, j + 1);
    }
    for mask in 1..=full {
        for j in 0..m {
            if mask & (1 << j) == 0 {
                continue;
            }
            let base = path[mask * m + j];
            if !base.is_finite() {
                continue;
            }
            for k in 0..m {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = mask | (1 << k);
                let cand = base + instance.dist(j + 1, k + 1);
                if cand < path[next * m + k] {
                    path[next * m + k] = cand;
                }
            }
        }
    }
    let mut demand_of = vec![0u32; full + 1];
    for mask in 1..=full {
        let low = mask.trailing_zeros() as usize;
        demand_of[mask] = demand_of[mask & (mask - 1)] + instance.demand(low + 1);
    }
    let mut route = vec![f64::INFINITY; full + 1];
    for mask in 1..=full {
        if demand_of[mask] > capacity {
            continue;
        }
        let mut best = f64::INFINITY;
        for j in 0..m {
            if mask & (1 << j) == 0 {
                continue;
            }
            let cand = path[mask * m + j] + instance.dist(j + 1, 0);
            if cand < best {
                best = cand;
            }
        }
        route[mask] = best;
    }
    let mut plan = vec![f64::INFINITY; full + 1];
    plan[0] = 0.0;
    for mask in 1..=full {
        let pivot = 1 << mask.trailing_zeros();
        // Enumerate submasks of mask containing the pivot customer.
        let mut sub = mask;
        loop {
            if sub & pivot != 0 && route[sub].is_finite() && plan[mask ^ sub].is_finite() {
                let cand = route[sub] + plan[mask ^ sub];
                if cand < plan[mask] {
                    plan[mask] = cand;
                }
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & mask;
        }
    }
    Ok(plan[full])
}

/// Deterministic construction-plus-improvement heuristic. TSP: nearest
/// neighbor from node 0, then 2-opt to local optimality. CVRP: polar sweep
/// around the depot into capacity-feasible routes, then 2-opt within each
/// route.
pub fn reference_solution(instance: &Instance) -> Solution {
    let actions = match instance.kind {
        ProblemKind::Tsp => {
            let mut tour = nearest_neighbor(instance);
            two_opt(instance, &mut tour);
            tour
        }
        ProblemKind::Cvrp => {
            let mut actions = Vec::with_capacity(instance.n);
            for mut route in sweep_routes(instance) {
                two_opt(instance, &mut route);
                if !actions.is_empty() {
                    actions.push(0);
                }
                // Drop the leading depot; the action encoding keeps depot
                // returns only between routes.
                actions.extend(route.into_iter().skip(1));
            }
            actions
        }
    };
    let cost = route_length(instance, &actions);
    Solution { actions, cost, probs: None }
}

pub fn reference_heuristic(instance: &Instance) -> f64 {
    reference_solution(instance).cost
}

fn nearest_neighbor(instance: &Instance) -> Vec<usize> {
    let n = instance.n;
    let mut tour = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut current = 0;
    visited[0] = true;
    tour.push(0);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for node in 0..n {
            if !visited[node] {
                let d = instance.dist(current, node);
                if d < best_d {
                    best_d = d;
                    best = node;
                }
            }
        }
        visited[best] = true;
        tour.push(best);
        current = best;
    }
    tour
}

/// CVRP routes from a polar sweep around the depot; each route is returned
/// with its leading depot node.
fn sweep_routes(instance: &Instance) -> Vec<Vec<usize>> {
    let [dx, dy] = instance.coords[0];
    let mut order: Vec<usize> = (1..instance.n).collect();
    order.sort_by(|&a, &b| {
        let ang = |i: usize| {
            let [x, y] = instance.coords[i];
            (y - dy).atan2(x - dx)
        };
        ang(a).partial_cmp(&ang(b)).unwrap().then(a.cmp(&b))
    });
    let capacity = instance.capacity();
    let mut routes = Vec::new();
    let mut route = vec![0];
    let mut load = 0;
    for node in order {
        let demand = instance.demand(node);
        if load + demand > capacity {
            routes.push(route);
            route = vec![0];
            load = 0;
        }
        route.push(node);
        load += demand;
    }
    if route.len() > 1 {
        routes.push(route);
    }
    routes
}

/// Best-improvement 2-opt on a closed tour held as a sequence with a fixed
/// first element; fixing position 0 still reaches every 2-exchange of the
/// cycle and keeps the depot in place for CVRP routes.
fn two_opt(instance: &Instance, tour: &mut [usize]) {
    let n = tour.len();
    if n < 4 {
        return;
    }
    loop {
        let mut best_delta = -1e-12;
        let mut best = None;
        for i in 1..n - 1 {
            for j in i + 1..n {
                let a = tour[i - 1];
                let b = tour[i];
                let c = tour[j];
                let d = tour[(j + 1) % n];
                let delta = instance.dist(a, c) + instance.dist(b, d)
                    - instance.dist(a, b)
                    - instance.dist(c, d);
                if delta < best_delta {
                    best_delta = delta;
                    best = Some((i, j));
                }
            }
        }
        match best {
            Some((i, j)) => tour[i..=j].reverse(),
            None => break,
        }
    }
}
