//! Earth mover's distance between equal-size point sets.
//!
//! Solved as a linear assignment problem on the Euclidean cost matrix:
//! exactly (shortest augmenting paths with potentials) up to
//! [`EXACT_LIMIT`] points, and by an ε-scaling auction above that. The
//! auction's final ε is [`AUCTION_EPSILON`]; its total cost is within
//! `n · ε` of optimal, so the reported mean distance is within ε.

use crate::error::{invalid, Error, Result};
use crate::geometry::{dist2, Point};

pub const EXACT_LIMIT: usize = 256;
pub const AUCTION_EPSILON: f64 = 1e-6;

fn cost_matrix(a: &[Point], b: &[Point]) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n * n];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            c[i * n + j] = dist2(*p, *q).sqrt();
        }
    }
    c
}

/// Minimum-cost perfect matching of an `n × n` cost matrix; returns the
/// column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based potentials; column 0 is a virtual free column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// ε-scaling forward auction (Gauss–Seidel bidding, one bidder at a time).
pub fn auction(cost: &[f64], n: usize, final_eps: f64) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let mut prices = vec![0.0; n];
    let mut eps = (max_cost / 4.0).max(final_eps);
    loop {
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut assign: Vec<Option<usize>> = vec![None; n];
        let mut free: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = free.pop() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut best, mut second, mut best_j) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for j in 0..n {
                let value = -row[j] - prices[j];
                if value > best {
                    second = best;
                    best = value;
                    best_j = j;
                } else if value > second {
                    second = value;
                }
            }
            let gap = if second.is_finite() { best - second } else { 0.0 };
            prices[best_j] += gap + eps;
            if let Some(prev) = owner[best_j].replace(i) {
                assign[prev] = None;
                free.push(prev);
            }
            assign[i] = Some(best_j);
        }
        if eps <= final_eps {
            return assign.into_iter().map(|a| a.expect("auction left a row unassigned")).collect();
        }
        eps = (eps / 5.0).max(final_eps);
    }
}

/// Optimal matching of `a` onto `b`: `a[i]` pairs with `b[m[i]]`.
pub fn emd_matching(a: &[Point], b: &[Point]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(invalid(format!("emd needs equal cardinality, got {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("emd of empty point sets"));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("emd of non-finite coordinates".into()));
    }
    let n = a.len();
    let cost = cost_matrix(a, b);
    Ok(if n <= EXACT_LIMIT {
        hungarian(&cost, n)
    } else {
        auction(&cost, n, AUCTION_EPSILON)
    })
}

/// Mean Euclidean distance under the optimal perfect matching.
pub fn emd(a: &[Point], b: &[Point]) -> Result<f64> {
    let m = emd_matching(a, b)?;
    let total: f64 = m.iter().enumerate().map(|(i, &j)| dist2(a[i], b[j]).sqrt()).sum();
    Ok(total / a.len() as f64)
}
