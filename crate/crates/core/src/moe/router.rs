use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Per-batch routing statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterStats {
    /// Fraction of rows that selected each expert. Sums to `top_k`.
    pub selection_fraction: Vec<f64>,
    /// Mean softmax probability per expert over the batch.
    pub mean_prob: Vec<f64>,
    pub top_k: usize,
}

impl RouterStats {
    pub fn n_experts(&self) -> usize {
        self.mean_prob.len()
    }

    /// Recomputes statistics from raw per-row selections and probabilities.
    pub fn from_selections(selected: &[Vec<usize>], probs: &[Vec<f64>], top_k: usize) -> Self {
        let n = probs.first().map_or(0, Vec::len);
        let rows = selected.len().max(1) as f64;
        let mut f = vec![0.0; n];
        let mut p = vec![0.0; n];
        for (sel, pr) in selected.iter().zip(probs) {
            for &e in sel {
                f[e] += 1.0;
            }
            for (acc, v) in p.iter_mut().zip(pr) {
                *acc += v;
            }
        }
        RouterStats {
            selection_fraction: f.into_iter().map(|c| c / rows).collect(),
            mean_prob: p.into_iter().map(|s| s / rows).collect(),
            top_k,
        }
    }
}

/// Output of [`route`].
#[derive(Clone, Debug)]
pub struct Route {
    /// batch×N gate matrix, zero outside each row's top-K.
    pub gates: Var,
    /// batch×N full softmax probabilities.
    pub probs: Var,
    /// Selected experts per row, in descending gate order.
    pub selected: Vec<Vec<usize>>,
    /// Rows routed to each expert, ascending.
    pub assignments: Vec<Vec<usize>>,
    pub stats: RouterStats,
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // Stable sort on descending value keeps ascending index among ties.
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(k);
    idx
}

/// `TopK(Softmax(x·W_gᵀ))` per row, without renormalization unless asked.
pub fn route(tape: &mut Tape<'_>, router_w: Var, x: Var, k: usize, renormalize: bool) -> Result<Route> {
    let n_experts = router_w.rows();
    if k > n_experts {
        return Err(Error::config(format!("top_k {k} exceeds {n_experts} experts")));
    }
    let logits = tape.matmul_t(x, router_w)?;
    let probs = tape.softmax_rows(logits)?;
    let batch = x.rows();

    let pv = tape.value(probs);
    let mut mask = vec![false; batch * n_experts];
    let mut selected = Vec::with_capacity(batch);
    let mut assignments = vec![Vec::new(); n_experts];
    let mut prob_rows = Vec::with_capacity(batch);
    for i in 0..batch {
        let row = pv.row(i);
        let sel = top_k_indices(row, k);
        for &e in &sel {
            mask[i * n_experts + e] = true;
            assignments[e].push(i);
        }
        selected.push(sel);
        prob_rows.push(row.to_vec());
    }
    let stats = RouterStats::from_selections(&selected, &prob_rows, k);

    let mut gates = tape.mask_select(probs, mask)?;
    if renormalize {
        gates = tape.normalize_rows(gates)?;
    }
    Ok(Route { gates, probs, selected, assignments, stats })
}

/// Switch-style load-balance loss `factor · N · Σ f_i · p_i`.
///
/// `f_i` is held constant; gradients flow through the mean probabilities.
pub fn balance_loss(tape: &mut Tape<'_>, route: &Route, factor: f64) -> Result<Var> {
    let n = route.stats.n_experts();
    let f = tape.constant(crate::linalg::Matrix::from_vec(1, n, route.stats.selection_fraction.clone())?);
    let p = tape.mean_rows(route.probs)?;
    let dot = tape.matmul_t(p, f)?;
    tape.scale(dot, factor * n as f64)
}

/// Scalar value of the balance loss from statistics alone.
pub fn balance_loss_value(stats: &RouterStats, factor: f64) -> f64 {
    let n = stats.n_experts() as f64;
    factor * n * stats.selection_fraction.iter().zip(&stats.mean_prob).map(|(f, p)| f * p).sum::<f64>()
}

/// Mean Shannon entropy (nats) of the routing distribution over rows.
pub fn router_entropy(probs: &crate::linalg::Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..probs.rows() {
        total -= probs.row(i).iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    total / probs.rows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Matrix, Rng};

    /// Router weights that reproduce the given logits for x = e₀.
    fn route_logits(logits: &[f64], k: usize) -> (Vec<f64>, Route) {
        let n = logits.len();
        let w = Matrix::from_fn(n, 1, |i, _| logits[i]);
        let mut tape = Tape::new();
        let wv = tape.constant(w);
        let x = tape.constant(Matrix::filled(1, 1, 1.0));
        let r = route(&mut tape, wv, x, k, false).unwrap();
        (tape.value(r.gates).row(0).to_vec(), r)
    }

    #[test]
    fn top2_of_four() {
        let (g, r) = route_logits(&[2.0, 1.0, 0.0, -1.0], 2);
        // softmax oracle: e^2, e^1, e^0, e^-1 over their sum
        let z: f64 = [2.0f64, 1.0, 0.0, -1.0].iter().map(|v| v.exp()).sum();
        assert!((g[0] - 2f64.exp() / z).abs() < 1e-15);
        assert!((g[1] - 1f64.exp() / z).abs() < 1e-15);
        assert!((g[0] - 0.6439).abs() < 5e-5);
        assert!((g[1] - 0.2369).abs() < 5e-5);
        assert_eq!(&g[2..], &[0.0, 0.0]);
        assert_eq!(r.selected[0], vec![0, 1]);
    }

    #[test]
    fn uniform_ties_pick_lowest_index() {
        let (g, r) = route_logits(&[0.0; 4], 2);
        assert_eq!(r.selected[0], vec![0, 1]);
        assert_eq!(g, vec![0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn k_equals_n_is_full_softmax() {
        let (g, _) = route_logits(&[0.3, -0.2, 1.1], 3);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(g.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn k_exceeding_n_is_config_error() {
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::zeros(2, 3));
        let x = tape.constant(Matrix::zeros(1, 3));
        assert!(matches!(route(&mut tape, w, x, 3, false), Err(Error::Config(_))));
    }

    #[test]
    fn renormalized_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let mut tape = Tape::new();
        let w = tape.constant(rng.uniform_matrix(6, 4, -1.0, 1.0));
        let x = tape.constant(rng.uniform_matrix(10, 4, -1.0, 1.0));
        let r = route(&mut tape, w, x, 2, true).unwrap();
        for i in 0..10 {
            assert!((tape.value(r.gates).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_balance_loss_equals_factor() {
        let n = 4;
        let selected: Vec<Vec<usize>> = (0..8).map(|i| vec![i % n]).collect();
        let probs = vec![vec![0.25; n]; 8];
        let s = RouterStats::from_selections(&selected, &probs, 1);
        assert!((balance_loss_value(&s, 0.01) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn collapsed_routing_is_maximal() {
        let selected = vec![vec![0]; 8];
        let probs = vec![vec![0.7, 0.1, 0.1, 0.1]; 8];
        let s = RouterStats::from_selections(&selected, &probs, 1);
        let v = balance_loss_value(&s, 0.01);
        assert!((v - 0.01 * 4.0 * 0.7).abs() < 1e-15);
        assert!(v >= 0.01);
    }

    #[test]
    fn taped_balance_loss_matches_recount() {
        let mut rng = Rng::new(12);
        let mut tape = Tape::new();
        let w = tape.constant(rng.uniform_matrix(5, 3, -2.0, 2.0));
        let x = tape.constant(rng.uniform_matrix(16, 3, -1.0, 1.0));
        let r = route(&mut tape, w, x, 2, false).unwrap();
        let l = balance_loss(&mut tape, &r, 0.001).unwrap();
        // brute-force recount from the raw probabilities
        let pv = tape.value(r.probs).clone();
        let mut f = [0.0; 5];
        let mut p = [0.0; 5];
        for i in 0..16 {
            let row = pv.row(i);
            let mut order: Vec<usize> = (0..5).collect();
            order.sort_by(|a, b| row[*b].partial_cmp(&row[*a]).unwrap().then(a.cmp(b)));
            for e in &order[..2] {
                f[*e] += 1.0 / 16.0;
            }
            for e in 0..5 {
                p[e] += row[e] / 16.0;
            }
        }
        let expected = 0.001 * 5.0 * (0..5).map(|e| f[e] * p[e]).sum::<f64>();
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
        assert!((r.stats.selection_fraction.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }
}
