//! Row-major dense kernels shared by the forward and backward passes.

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ` where `b` is `k×n`; result is `m×k`.
pub(crate) fn matmul_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result is `k×n`.
pub(crate) fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Row-wise log-softmax over a square matrix with the diagonal excluded from
/// the normalizer. Diagonal outputs are zero.
pub(crate) fn log_softmax_off_diagonal(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &x[i * n..(i + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let lse = max + sum.ln();
        for j in 0..n {
            if j != i {
                out[i * n + j] = row[j] - lse;
            }
        }
    }
    out
}

/// Returns normalized rows and the per-row divisor `max(‖row‖, eps)`.
pub(crate) fn l2_normalize_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * cols];
    let mut divisors = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let s = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v / s;
        }
        divisors.push(s);
    }
    (out, divisors)
}

/// Condensed pairwise Euclidean distances, pairs `(i, j)` with `i < j` in
/// lexicographic order.
pub(crate) fn pairwise_distances(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * rows.saturating_sub(1) / 2);
    for i in 0..rows {
        for j in (i + 1)..rows {
            let d2: f64 = (0..cols)
                .map(|c| {
                    let d = x[i * cols + c] - x[j * cols + c];
                    d * d
                })
                .sum();
            out.push(d2.sqrt());
        }
    }
    out
}
