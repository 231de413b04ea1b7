//! Exact unregularized transport for small instances, used as a test oracle.

use super::{cost_matrix, CostMatrix, PointCloud, Result, TransportError};

/// Largest `n * m` the oracle accepts.
pub const EXACT_ORACLE_MAX_CELLS: usize = 64;

const FLOW_EPS: f64 = 1e-15;

/// Exact W1 (L1 ground cost) between two small clouds.
///
/// Equal-size uniform clouds are solved by enumerating all perfect matchings;
/// everything else by successive-shortest-path min-cost flow.
pub fn exact_ot_oracle(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let cells = a.len() * b.len();
    if cells > EXACT_ORACLE_MAX_CELLS {
        return Err(TransportError::InstanceTooLarge { cells, max: EXACT_ORACLE_MAX_CELLS });
    }
    let cost = cost_matrix(a, b)?;
    if a.len() == b.len() && is_uniform(a) && is_uniform(b) {
        Ok(min_matching_cost(&cost) / a.len() as f64)
    } else {
        Ok(min_cost_flow(a.weights(), b.weights(), &cost))
    }
}

fn is_uniform(c: &PointCloud) -> bool {
    let w = 1.0 / c.len() as f64;
    c.weights().iter().all(|&x| x == w)
}

/// Minimum over all permutations `s` of `sum_i C[i][s(i)]` (Heap's algorithm).
fn min_matching_cost(cost: &CostMatrix) -> f64 {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>();
    let mut best = total(&perm);
    let mut counters = vec![0; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(total(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    best
}

struct Edge {
    to: usize,
    capacity: f64,
    cost: f64,
}

fn min_cost_flow(supply: &[f64], demand: &[f64], cost: &CostMatrix) -> f64 {
    let (n, m) = (supply.len(), demand.len());
    let source = n + m;
    let sink = source + 1;
    let nodes = sink + 1;
    let mut edges: Vec<Edge> = Vec::new();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let mut add_edge = |from: usize, to: usize, capacity: f64, c: f64| {
        adjacency[from].push(edges.len());
        edges.push(Edge { to, capacity, cost: c });
        adjacency[to].push(edges.len());
        edges.push(Edge { to: from, capacity: 0.0, cost: -c });
    };
    for (i, &s) in supply.iter().enumerate() {
        add_edge(source, i, s, 0.0);
    }
    for i in 0..n {
        for j in 0..m {
            add_edge(i, n + j, f64::INFINITY, cost.get(i, j));
        }
    }
    for (j, &d) in demand.iter().enumerate() {
        add_edge(n + j, sink, d, 0.0);
    }

    let mut total_cost = 0.0;
    loop {
        // Bellman-Ford on the residual graph; it carries negative reverse costs.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via: Vec<Option<usize>> = vec![None; nodes];
        dist[source] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for &e in &adjacency[u] {
                    let edge = &edges[e];
                    if edge.capacity > FLOW_EPS && dist[u] + edge.cost < dist[edge.to] - 1e-12 {
                        dist[edge.to] = dist[u] + edge.cost;
                        via[edge.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink] == f64::INFINITY {
            return total_cost;
        }
        let mut bottleneck = f64::INFINITY;
        let mut node = sink;
        while let Some(e) = via[node] {
            bottleneck = bottleneck.min(edges[e].capacity);
            node = edges[e ^ 1].to;
        }
        let mut node = sink;
        while let Some(e) = via[node] {
            edges[e].capacity -= bottleneck;
            edges[e ^ 1].capacity += bottleneck;
            total_cost += bottleneck * edges[e].cost;
            node = edges[e ^ 1].to;
        }
    }
}
