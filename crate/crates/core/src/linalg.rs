//! Small dense helpers: 3×3 singular values and a rectangular
//! maximum-weight assignment solver.

/// Singular values of a 3×3 row-major matrix, descending.
///
/// One-sided Jacobi in `f64`. The rotation angles depend only on ratios of
/// column norms and the convergence test is relative, so scaling the input by
/// a power of two scales every returned value by exactly that power.
pub fn singular_values_3x3(m: &[f32; 9]) -> [f64; 3] {
    // Work on columns.
    let mut cols = [[0.0f64; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            cols[c][r] = m[r * 3 + c] as f64;
        }
    }
    const EPS: f64 = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
            let beta: f64 = cols[q].iter().map(|v| v * v).sum();
            let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(a, b)| a * b).sum();
            if gamma == 0.0 || gamma.abs() <= EPS * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            let (lo, hi) = cols.split_at_mut(q);
            for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                let (a, b) = (*x, *y);
                *x = c * a - s * b;
                *y = s * a + c * b;
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv = cols.map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt());
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Maximum-total-weight assignment of rows to columns.
///
/// `weights[r][c]`; the matrix may be rectangular. Returns, for each row, the
/// column it is matched to, or `None` when there are more rows than columns
/// and the row is left out. Exact O(n³) shortest augmenting path method on
/// the square zero-padded cost matrix.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    if rows == 0 {
        return Vec::new();
    }
    assert!(weights.iter().all(|r| r.len() == cols), "ragged weight matrix");
    let n = rows.max(cols);
    let cost = |r: usize, c: usize| -> f64 {
        if r < rows && c < cols {
            -weights[r][c]
        } else {
            0.0
        }
    };
    // 1-based potentials and matching, index 0 is a sentinel.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_match = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for r in 1..=n {
        col_match[0] = r;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_match[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[col_match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_match[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_match[j0] = col_match[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for (j, &r) in col_match.iter().enumerate().skip(1) {
        if r >= 1 && r <= rows && j <= cols {
            out[r - 1] = Some(j - 1);
        }
    }
    out
}
