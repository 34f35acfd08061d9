//! Shared oracles for the integration suites. Everything here is an
//! independent route: no code path under test is reused.

/// Singular values of an r x c matrix by one-sided Jacobi: rotate column
/// pairs until all are mutually orthogonal, then read off column norms.
/// Working on the matrix directly (no Gram squaring) keeps the small
/// singular values accurate to machine precision relative to the largest.
pub fn singular_values(matrix: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), rows * cols);
    // Orthogonalize the shorter side's columns.
    let (n, mut columns) = if rows >= cols {
        let cols_v: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| matrix[i * cols + j]).collect())
            .collect();
        (cols, cols_v)
    } else {
        let cols_v: Vec<Vec<f64>> = (0..rows)
            .map(|i| matrix[i * cols..(i + 1) * cols].to_vec())
            .collect();
        (rows, cols_v)
    };

    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (ci, cj) = {
                    let (a, b) = columns.split_at_mut(j);
                    (&mut a[i], &mut b[0])
                };
                let alpha: f64 = ci.iter().map(|&v| v * v).sum();
                let beta: f64 = cj.iter().map(|&v| v * v).sum();
                let gamma: f64 = ci.iter().zip(cj.iter()).map(|(&a, &b)| a * b).sum();
                if gamma.abs() <= 1e-30 || gamma.abs() <= 1e-16 * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
                    let va = *a;
                    let vb = *b;
                    *a = c * va - s * vb;
                    *b = s * va + c * vb;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|&v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Count of singular values above `threshold_ratio` times the largest.
pub fn numerical_rank(matrix: &[f64], rows: usize, cols: usize, threshold_ratio: f64) -> usize {
    let sv = singular_values(matrix, rows, cols);
    let max = sv.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > threshold_ratio * max).count()
}
