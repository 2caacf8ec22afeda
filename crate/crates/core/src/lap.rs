//! Square linear assignment by shortest augmenting paths with dual
//! potentials, `O(n³)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Minimum-cost assignment for a square cost matrix: `result[row] = col`.
pub fn solve(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::Dimension(format!("assignment cost is {}×{}, expected square", n, cost.ncols())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidData("assignment cost has non-finite entries".into()));
    }
    // 1-based columns; column 0 is the virtual source of each augmentation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let reduced = cost[(r - 1, c - 1)] - u[r] - v[c];
                if reduced < min_to[c] {
                    min_to[c] = reduced;
                    way[c] = col0;
                }
                if min_to[c] < delta {
                    delta = min_to[c];
                    next = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[row_of[c]] += delta;
                    v[c] -= delta;
                } else {
                    min_to[c] -= delta;
                }
            }
            col0 = next;
            if row_of[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of[col0] = row_of[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for c in 1..=n {
        assignment[row_of[c] - 1] = c - 1;
    }
    Ok(assignment)
}

pub fn assignment_cost(cost: &DMatrix<f64>, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum()
}
