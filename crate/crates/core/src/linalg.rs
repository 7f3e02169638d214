//! Small dense linear algebra for the IRLS and NNLS solvers.
//!
//! Design matrices here have at most a few dozen columns, so a hand-rolled
//! Cholesky keeps the crate dependency-light.

/// Cholesky factor (lower triangular, row-major packed) of a symmetric
/// positive-definite matrix. Returns `None` if a pivot is not positive.
pub fn cholesky(a: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for m in 0..j {
                s -= l[i * k + m] * l[j * k + m];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}

/// Solve `A x = b` given the Cholesky factor `l` of `A`.
pub fn cholesky_solve(l: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    // forward: L y = b
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i * k + j] * y[j];
        }
        y[i] = s / l[i * k + i];
    }
    // backward: L^T x = y
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for j in (i + 1)..k {
            s -= l[j * k + i] * x[j];
        }
        x[i] = s / l[i * k + i];
    }
    x
}

/// Solve the symmetric system `A x = b`, adding a diagonal jitter and
/// retrying if `A` is numerically singular. Returns `None` when even the
/// jittered system fails.
pub fn solve_spd(a: &[f64], k: usize, b: &[f64]) -> Option<Vec<f64>> {
    if let Some(l) = cholesky(a, k) {
        return Some(cholesky_solve(&l, k, b));
    }
    let mut scale: f64 = 0.0;
    for i in 0..k {
        scale = scale.max(a[i * k + i].abs());
    }
    let mut jitter = 1e-10 * scale.max(1.0);
    for _ in 0..8 {
        let mut aj = a.to_vec();
        for i in 0..k {
            aj[i * k + i] += jitter;
        }
        if let Some(l) = cholesky(&aj, k) {
            return Some(cholesky_solve(&l, k, b));
        }
        jitter *= 100.0;
    }
    None
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &[f64], k: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, k)?;
    let mut inv = vec![0.0; k * k];
    for col in 0..k {
        let mut e = vec![0.0; k];
        e[col] = 1.0;
        let x = cholesky_solve(&l, k, &e);
        for row in 0..k {
            inv[row * k + col] = x[row];
        }
    }
    Some(inv)
}
