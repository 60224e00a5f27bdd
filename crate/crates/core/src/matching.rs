//! Minimum-cost assignment between prediction rows and target columns.
//!
//! The solver is the shortest-augmenting-path formulation of the Hungarian
//! method with dual potentials, O(cols^2 * rows). It is hand-rolled so the
//! matching semantics stay auditable against the brute-force oracle used in
//! the tests.

use crate::{Error, Result};

/// Solves `min sum cost[r][c]` over injective maps from columns to rows.
///
/// `cost` is row-major with `rows * cols` finite entries and `cols <= rows`
/// is required: every column (target) is matched to a distinct row
/// (prediction). Returns one `(row, col)` pair per column, sorted by column.
/// Ties between equal-cost assignments resolve deterministically but
/// arbitrarily; only the total cost is guaranteed optimal.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != rows * cols {
        return Err(Error::shape(
            "min_cost_assignment",
            format!("cost has {} entries, expected {}x{}", cost.len(), rows, cols),
        ));
    }
    if cols > rows {
        return Err(Error::Contract(format!(
            "min_cost_assignment: {cols} columns cannot be injectively matched to {rows} rows"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Contract(
            "min_cost_assignment: non-finite cost entry".into(),
        ));
    }
    if cols == 0 {
        return Ok(Vec::new());
    }

    // Potentials are indexed 1-based; row slot 0 is the virtual unmatched row.
    // `owner[r]` is the column currently assigned to row r.
    let n = cols;
    let m = rows;
    let at = |c: usize, r: usize| cost[r * cols + c];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for col in 1..=n {
        owner[0] = col;
        let mut r0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[r0] = true;
            let c0 = owner[r0];
            let mut delta = f64::INFINITY;
            let mut r1 = 0usize;
            for r in 1..=m {
                if used[r] {
                    continue;
                }
                let cur = at(c0 - 1, r - 1) - u[c0] - v[r];
                if cur < minv[r] {
                    minv[r] = cur;
                    way[r] = r0;
                }
                if minv[r] < delta {
                    delta = minv[r];
                    r1 = r;
                }
            }
            for r in 0..=m {
                if used[r] {
                    u[owner[r]] += delta;
                    v[r] -= delta;
                } else {
                    minv[r] -= delta;
                }
            }
            r0 = r1;
            if owner[r0] == 0 {
                break;
            }
        }
        // Walk the augmenting path backwards, reassigning rows.
        loop {
            let r1 = way[r0];
            owner[r0] = owner[r1];
            r0 = r1;
            if r0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&r| owner[r] != 0)
        .map(|r| (r - 1, owner[r] - 1))
        .collect();
    pairs.sort_by_key(|&(_, c)| c);
    Ok(pairs)
}

/// Total cost of an assignment returned by [`min_cost_assignment`].
pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
}
