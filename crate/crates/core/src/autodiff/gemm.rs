//! Dense matrix kernels backing the conv and dense ops.

/// `c += a * b` with `a: [m x k]`, `b: [k x n]`, `c: [m x n]`, all row-major.
///
/// The i-p-j loop order keeps both `b` and `c` accesses contiguous so the
/// inner loop vectorizes.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// Transpose a row-major `[rows x cols]` matrix into `out: [cols x rows]`.
pub fn transpose(rows: usize, cols: usize, a: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}
