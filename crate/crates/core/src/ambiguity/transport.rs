//! Exact discrete optimal transport by successive shortest paths.
//!
//! Used for the general p-Wasserstein membership check on small grids; the
//! production 1-Wasserstein path uses the cumulative formula instead.

const EPS: f64 = 1e-15;

/// Minimum of `sum_ij cost[i][j] q_ij` over couplings `q` with row sums
/// `supply` and column sums `demand` (both summing to the same total).
pub fn min_cost_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> f64 {
    let n = supply.len();
    let m = demand.len();
    let mut flow = vec![vec![0.0; m]; n];
    let mut left = supply.to_vec();
    let mut need = demand.to_vec();
    // Nodes: sources 0..n, sinks n..n+m. Residual arcs: i -> j always (cost c_ij),
    // j -> i when flow_ij > 0 (cost -c_ij).
    loop {
        if left.iter().all(|&s| s <= EPS) || need.iter().all(|&d| d <= EPS) {
            break;
        }
        let total = n + m;
        let mut dist = vec![f64::INFINITY; total];
        let mut pred = vec![usize::MAX; total];
        for i in 0..n {
            if left[i] > EPS {
                dist[i] = 0.0;
            }
        }
        // Bellman-Ford over the residual graph.
        for _ in 0..total {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..m {
                        let nd = dist[i] + cost[i][j];
                        if nd < dist[n + j] - slack(dist[n + j]) {
                            dist[n + j] = nd;
                            pred[n + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i][j] > EPS {
                            let nd = dist[n + j] - cost[i][j];
                            if nd < dist[i] - slack(dist[i]) {
                                dist[i] = nd;
                                pred[i] = n + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let target = (0..m)
            .filter(|&j| need[j] > EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(j_end) = target else { break };
        // Walk back to the originating source to find the bottleneck.
        let mut amount = need[j_end];
        let mut node = n + j_end;
        let mut path = vec![node];
        while pred[node] != usize::MAX {
            if path.len() > total {
                // A predecessor cycle: round-off produced a spurious negative
                // cycle, and no further augmenting path can be trusted.
                return transport_cost(&flow, cost);
            }
            let prev = pred[node];
            if prev >= n {
                // sink -> source arc cancels flow
                amount = amount.min(flow[node][prev - n]);
            }
            node = prev;
            path.push(node);
        }
        let source = node;
        amount = amount.min(left[source]);
        if amount <= EPS {
            break;
        }
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from < n {
                flow[from][to - n] += amount;
            } else {
                flow[to][from - n] -= amount;
            }
        }
        left[source] -= amount;
        need[j_end] -= amount;
    }
    transport_cost(&flow, cost)
}

/// Relaxation margin: improvements below round-off of the label are ignored.
fn slack(label: f64) -> f64 {
    if label.is_finite() {
        1e-12 * (1.0 + label.abs())
    } else {
        0.0
    }
}

fn transport_cost(flow: &[Vec<f64>], cost: &[Vec<f64>]) -> f64 {
    flow.iter().enumerate().map(|(i, row)| row.iter().zip(&cost[i]).map(|(f, c)| f * c).sum::<f64>()).sum()
}

/// p-Wasserstein cost `sum |x_i - x_j|^p q_ij` of the optimal coupling
/// between `p` and `q` on support `x`.
pub fn wasserstein_cost(p: &[f64], q: &[f64], x: &[f64], power: f64) -> f64 {
    let cost: Vec<Vec<f64>> = x.iter().map(|xi| x.iter().map(|xj| (xi - xj).abs().powf(power)).collect()).collect();
    min_cost_transport(p, q, &cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn point_masses() {
        let x = [0.0, 1.0, 3.0];
        assert_abs_diff_eq!(wasserstein_cost(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &x, 1.0), 3.0);
        assert_abs_diff_eq!(wasserstein_cost(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &x, 2.0), 9.0);
    }

    #[test]
    fn assignment_needs_rerouting() {
        // Greedy nearest-first is suboptimal here; the shortest path must cancel flow.
        let cost = vec![vec![1.0, 2.0], vec![1.0, 10.0]];
        let v = min_cost_transport(&[0.5, 0.5], &[0.5, 0.5], &cost);
        assert_abs_diff_eq!(v, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn agrees_with_cumulative_formula_when_labels_tie() {
        let x = [0.2611634384833363, 1.3817473453560165, 2.5658652002647075, 3.300831461391951, 4.176957305255025];
        let p = [0.0, 0.5015057219468663, 0.2739974805519296, 0.00587423616594114, 0.21862256133526306];
        let q =
            [0.20631592958403636, 0.4538155895346178, 0.14430181815664225, 0.045078674835216964, 0.15048798788948667];
        let (mut cp, mut cq, mut cdf) = (0.0_f64, 0.0_f64, 0.0);
        for i in 0..4 {
            cp += p[i];
            cq += q[i];
            cdf += (cp - cq).abs() * (x[i + 1] - x[i]);
        }
        assert_abs_diff_eq!(wasserstein_cost(&p, &q, &x, 1.0), cdf, epsilon = 1e-12);
    }
}
