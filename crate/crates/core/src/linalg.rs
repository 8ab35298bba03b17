//! Small numeric helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Linear-interpolation percentile over the order statistics (inclusive
/// convention: rank `h = (n-1)·p/100`). `p` is in percent.
pub fn percentile_linear(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

/// Same as [`percentile_linear`] on an already ascending slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let t = (sorted.len() - 1) as f64 * p;
    let lo = (t / 100.0).floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = (t - lo as f64 * 100.0) / 100.0;
    if lo == hi || frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn median(values: &[f64]) -> f64 {
    percentile_linear(values, 50.0)
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs.map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of one row, max-subtracted.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Column means of an `n×D` matrix.
pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Unbiased (`n-1`) sample covariance of the rows of `x`.
pub fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = column_means(x);
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n.max(2) - 1) as f64;
    centered.transpose() * centered / denom
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending
/// order. Each eigenvector's sign is fixed so its largest-magnitude entry is
/// positive (first such entry on exact magnitude ties).
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let d = m.nrows();
    let mut vectors = DMatrix::zeros(d, order.len());
    let mut values = Vec::with_capacity(order.len());
    for (j, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let mut pivot = 0;
        for i in 1..d {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(j, &col);
    }
    (values, vectors)
}

/// Converts row-major nested vectors into a matrix; all rows must share `cols`.
pub fn matrix_from_rows(rows: &[Vec<f64>], cols: usize) -> Option<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Row-major copy of a matrix.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| row_vec(m, i)).collect()
}

/// Stacks matrices vertically; all inputs must share a column count.
pub fn vstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(*p);
        r += p.nrows();
    }
    out
}

/// Rows of `m` selected by `idx`, in order.
pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Midranks (1-based) of `values`; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let r = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_of_explicit_sequence() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        assert!((percentile_linear(&v, 90.0) - 89.1).abs() < 1e-12);
        assert_eq!(percentile_linear(&v, 100.0), 99.0);
        assert_eq!(percentile_linear(&v, 0.0), 0.0);
    }

    #[test]
    fn median_even_count_averages_middle() {
        assert!((median(&[0.9, 0.8, 0.2, 0.1]) - 0.5).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn eigen_sign_convention() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals, vec![2.0, 1.0]);
        assert!(vecs[(0, 0)] > 0.0 && vecs[(1, 1)] > 0.0);
    }
}
