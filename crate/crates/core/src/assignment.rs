//! Minimum-cost rectangular assignment (Hungarian method with potentials).

/// Solves `min Σ cost[i][assign[i]]` over injective partial assignments of
/// the smaller side. Returns `(row, col)` pairs sorted by row.
///
/// `cost` is row-major with `rows * cols` entries; entries must be finite.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols, "cost matrix has wrong size");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut transposed = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                transposed[c * rows + r] = cost[r * cols + c];
            }
        }
        let mut pairs: Vec<(usize, usize)> =
            min_cost_assignment(&transposed, cols, rows).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // rows <= cols; 1-based potentials formulation.
    let (n, m) = (rows, cols);
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
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
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// Assignment that only keeps pairs with `cost <= gate`, maximizing the
/// number of gated pairs first and their total cost second.
pub fn gated_assignment(cost: &[f64], rows: usize, cols: usize, gate: f64) -> Vec<(usize, usize)> {
    let allowed: Vec<f64> = cost.iter().copied().filter(|c| *c <= gate).collect();
    if allowed.is_empty() {
        return Vec::new();
    }
    let total: f64 = allowed.iter().map(|c| c.abs()).sum();
    let big = 2.0 * total + 1.0;
    let padded: Vec<f64> = cost.iter().map(|c| if *c <= gate { *c } else { big }).collect();
    min_cost_assignment(&padded, rows, cols)
        .into_iter()
        .filter(|(r, c)| cost[r * cols + c] <= gate)
        .collect()
}
