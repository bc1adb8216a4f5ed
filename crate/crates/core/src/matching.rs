//! Minimum-cost one-to-one assignment of ground-truth rows to query columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt, query)` pairs, one per GT row, in GT order.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl MatchResult {
    pub fn query_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }
}

/// Shortest augmenting path with potentials over a rows x cols cost
/// (rows <= cols). Returns the column assigned to each row.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return Vec::new();
    }
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn total(cost: &[Vec<f64>], rows: &[usize], assigned: &[usize]) -> f64 {
    rows.iter().zip(assigned).map(|(&r, &c)| cost[r][c]).sum()
}

/// Minimum-total-cost injective map from the `G` rows of `cost` to its `Q`
/// columns. Among optimal assignments the lexicographically smallest
/// sequence of query indices (in GT order) wins.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let g = cost.len();
    let q = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != q) {
        return Err(Error::input("ragged cost matrix"));
    }
    if g > q {
        return Err(Error::contract(format!("{g} ground truths but only {q} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::input("non-finite matching cost"));
    }
    if g == 0 {
        return Ok(MatchResult { pairs: Vec::new(), cost: 0.0 });
    }
    let all_rows: Vec<usize> = (0..g).collect();
    let all_cols: Vec<usize> = (0..q).collect();
    let best = total(cost, &all_rows, &solve(cost, &all_rows, &all_cols));
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * scale * g as f64;

    let mut pairs = Vec::with_capacity(g);
    let mut free = all_cols;
    let mut fixed = 0.0;
    for r in 0..g {
        let rest: Vec<usize> = (r + 1..g).collect();
        let mut chosen = None;
        for (k, &c) in free.iter().enumerate() {
            let others: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let sub = solve(cost, &rest, &others);
            if fixed + cost[r][c] + total(cost, &rest, &sub) <= best + tol {
                chosen = Some(k);
                break;
            }
        }
        let k = chosen.expect("an optimal completion always exists");
        let c = free.remove(k);
        fixed += cost[r][c];
        pairs.push((r, c));
    }
    let cost_sum = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Ok(MatchResult { pairs, cost: cost_sum })
}

/// Exhaustive minimum over all injective maps; lexicographically first on ties.
pub fn brute_force_match(cost: &[Vec<f64>]) -> Option<MatchResult> {
    let g = cost.len();
    let q = cost.first().map_or(0, Vec::len);
    if g > q {
        return None;
    }
    fn rec(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        if r == cost.len() {
            let c: f64 = cur.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if best.as_ref().is_none_or(|b| c < b.0) {
                *best = Some((c, cur.clone()));
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, r + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    rec(cost, 0, &mut vec![false; q], &mut Vec::new(), &mut best);
    best.map(|(c, a)| MatchResult { pairs: a.into_iter().enumerate().collect(), cost: c })
}
