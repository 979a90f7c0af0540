//! Minimum-cost bipartite assignment.
//!
//! Augmenting-path Hungarian algorithm with row/column potentials,
//! O(n^2 m) for an `[n, m]` cost matrix with n <= m, followed by a
//! lexicographic refinement pass that, among all optimal assignments,
//! returns the one with the smallest assignment vector.

use crate::error::{Error, Result};

/// Injective assignment of rows (ground-truth segments) to columns
/// (predictions). Columns not assigned to any row are the unmatched
/// predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &[f64], m: usize) -> f64 {
        self.row_to_col
            .iter()
            .enumerate()
            .map(|(r, &c)| cost[r * m + c])
            .sum()
    }

    pub fn unmatched_cols(&self, m: usize) -> Vec<usize> {
        let mut used = vec![false; m];
        for &c in &self.row_to_col {
            used[c] = true;
        }
        (0..m).filter(|&c| !used[c]).collect()
    }
}

/// Core solver; returns row -> col for an `[n, m]` matrix, n <= m.
fn solve_core(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // row assigned to column j (1-based)
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(row_to_col.iter().all(|&c| c != usize::MAX));
    row_to_col
}

#[doc(hidden)]
pub fn min_total(cost: &[f64], n: usize, m: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let a = solve_core(cost, n, m);
    debug_assert!({
        let mut seen = vec![false; m];
        a.iter().all(|&c| {
            let fresh = !seen[c];
            seen[c] = true;
            fresh
        })
    });
    (0..n).map(|r| cost[r * m + a[r]]).sum()
}

/// Minimum-cost assignment for a row-major `[n, m]` cost matrix with
/// n <= m. Ties between optimal assignments break to the
/// lexicographically smallest assignment vector.
pub fn hungarian_assign(cost: &[f64], n: usize, m: usize) -> Result<Assignment> {
    if cost.len() != n * m {
        return Err(Error::dims("cost matrix", &[n, m], &[cost.len()]));
    }
    if n > m {
        return Err(Error::Input(format!(
            "assignment needs rows <= cols, got {n} x {m}"
        )));
    }
    if let Some(bad) = cost.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "cost matrix contains a non-finite entry: {bad}"
        )));
    }
    if n == 0 {
        return Ok(Assignment { row_to_col: vec![] });
    }

    let best = min_total(cost, n, m);
    // Equality tolerance for totals recomputed along different paths;
    // exact for integer-valued costs and far below the optimum gaps of
    // generic float matrices.
    let tol = 1e-9 * best.abs().max(1.0);

    // Fix rows one by one to the smallest column that still permits an
    // optimal completion.
    let mut fixed_cols: Vec<usize> = Vec::with_capacity(n);
    let mut prefix = 0.0;
    for row in 0..n {
        let remaining_rows = n - row - 1;
        let mut chosen = None;
        for col in 0..m {
            if fixed_cols.contains(&col) {
                continue;
            }
            let candidate = prefix + cost[row * m + col];
            // Build the submatrix of remaining rows and columns.
            let sub_cols: Vec<usize> = (0..m)
                .filter(|c| !fixed_cols.contains(c) && *c != col)
                .collect();
            let mut sub = Vec::with_capacity(remaining_rows * sub_cols.len());
            for r in row + 1..n {
                for &c in &sub_cols {
                    sub.push(cost[r * m + c]);
                }
            }
            let completion = min_total(&sub, remaining_rows, sub_cols.len());
            if candidate + completion <= best + tol {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.expect("an optimal completion always exists");
        prefix += cost[row * m + col];
        fixed_cols.push(col);
    }

    Ok(Assignment {
        row_to_col: fixed_cols,
    })
}
