//! Small dense linear algebra on row-major `&[f64]` buffers.
//!
//! Matrices are stored row-major: an `r x c` matrix `m` has entry
//! `m[i * c + j]`. Dimensions here are tiny (state dimensions of a handful),
//! so clarity beats blocking or SIMD.

/// `<a, b>` for equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Squared Frobenius norm of a matrix buffer.
pub fn frobenius_sq(m: &[f64]) -> f64 {
    dot(m, m)
}

/// `out = M v` for row-major `r x c` matrix `M`.
pub fn matvec(m: &[f64], r: usize, c: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), r * c);
    debug_assert_eq!(v.len(), c);
    debug_assert_eq!(out.len(), r);
    for i in 0..r {
        out[i] = dot(&m[i * c..(i + 1) * c], v);
    }
}

/// `out = M* v` (transpose application) for row-major `r x c` matrix `M`.
pub fn matvec_t(m: &[f64], r: usize, c: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), r * c);
    debug_assert_eq!(v.len(), r);
    debug_assert_eq!(out.len(), c);
    for j in 0..c {
        let mut s = 0.0;
        for i in 0..r {
            s += m[i * c + j] * v[i];
        }
        out[j] = s;
    }
}

/// `out = M M*` for row-major `d x m` matrix `M`; `out` is `d x d`.
pub fn gram(m: &[f64], d: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(m.len(), d * cols);
    debug_assert_eq!(out.len(), d * d);
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = dot(&m[i * cols..(i + 1) * cols], &m[j * cols..(j + 1) * cols]);
        }
    }
}

/// `Tr[A H]` for two `d x d` row-major matrices. For symmetric `A` this is
/// the double contraction `sum_{ij} A_ij H_ij`.
pub fn trace_product(a: &[f64], h: &[f64], d: usize) -> f64 {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(h.len(), d * d);
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += a[i * d + j] * h[j * d + i];
        }
    }
    s
}

/// Solves the square system `M x = rhs` by Gaussian elimination with partial
/// pivoting. Returns `None` when a pivot falls below `tol * max|M|`, i.e. the
/// matrix is numerically singular at working precision.
pub fn solve(m: &[f64], n: usize, rhs: &[f64], tol: f64) -> Option<Vec<f64>> {
    debug_assert_eq!(m.len(), n * n);
    debug_assert_eq!(rhs.len(), n);
    let mut a = m.to_vec();
    let mut b = rhs.to_vec();
    let scale = a.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let pivot_floor = tol * scale;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = a[col * n + col].abs();
        for row in (col + 1)..n {
            let v = a[row * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val <= pivot_floor {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            b.swap(col, pivot_row);
        }
        let inv = 1.0 / a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in (col + 1)..n {
            s -= a[col * n + k] * x[k];
        }
        x[col] = s / a[col * n + col];
    }
    Some(x)
}

/// Maximum absolute entry.
pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matvec_matches_hand_computation() {
        // 2x3 matrix applied to a 3-vector.
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let v = [1.0, 0.5, -1.0];
        let mut out = [0.0; 2];
        matvec(&m, 2, 3, &v, &mut out);
        assert_relative_eq!(out[0], 1.0 + 1.0 - 3.0);
        assert_relative_eq!(out[1], 4.0 + 2.5 - 6.0);

        let w = [2.0, -1.0];
        let mut out_t = [0.0; 3];
        matvec_t(&m, 2, 3, &w, &mut out_t);
        assert_relative_eq!(out_t[0], 2.0 - 4.0);
        assert_relative_eq!(out_t[1], 4.0 - 5.0);
        assert_relative_eq!(out_t[2], 6.0 - 6.0);
    }

    #[test]
    fn gram_is_sigma_sigma_star() {
        // Gruschin-type block: sigma = [[1, 0], [0, x]] with x = 3.
        let sigma = [1.0, 0.0, 0.0, 3.0];
        let mut a = [0.0; 4];
        gram(&sigma, 2, 2, &mut a);
        assert_eq!(a, [1.0, 0.0, 0.0, 9.0]);
    }

    #[test]
    fn trace_product_on_symmetric_pair() {
        let a = [2.0, 1.0, 1.0, 3.0];
        let h = [1.0, -1.0, -1.0, 4.0];
        // Tr[A H] = sum_ij a_ij h_ji; both symmetric here.
        assert_relative_eq!(trace_product(&a, &h, 2), 2.0 - 1.0 - 1.0 + 12.0);
    }

    #[test]
    fn solve_recovers_known_solution() {
        let m = [3.0, 1.0, 1.0, 2.0];
        let x_true = [0.25, -1.5];
        let rhs = [3.0 * x_true[0] + x_true[1], x_true[0] + 2.0 * x_true[1]];
        let x = solve(&m, 2, &rhs, 1e-12).expect("nonsingular");
        assert_relative_eq!(x[0], x_true[0], max_relative = 1e-12);
        assert_relative_eq!(x[1], x_true[1], max_relative = 1e-12);
    }

    #[test]
    fn solve_rejects_singular_matrix() {
        let m = [1.0, 2.0, 2.0, 4.0];
        assert!(solve(&m, 2, &[1.0, 2.0], 1e-12).is_none());
        assert!(solve(&[0.0; 4], 2, &[0.0, 0.0], 1e-12).is_none());
    }

    #[test]
    fn solve_handles_row_swaps() {
        // Zero on the leading diagonal forces pivoting.
        let m = [0.0, 1.0, 1.0, 0.0];
        let x = solve(&m, 2, &[5.0, 7.0], 1e-12).expect("permutation is fine");
        assert_relative_eq!(x[0], 7.0);
        assert_relative_eq!(x[1], 5.0);
    }
}
