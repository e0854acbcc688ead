use nalgebra::{Cholesky, DMatrix, Dyn};

/// `c ← alpha·op(a)·op(b) + beta·c` on row-major buffers, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. A transposed operand is stored in its
/// untransposed row-major layout (`k × m` for `a`, `n × k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by the given
    // dimensions and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Diagonal jitter levels tried after a plain factorization fails.
pub(crate) const JITTER_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Cholesky of `matrix`, escalating diagonal jitter on failure. Returns the
/// factor and the jitter that was added.
pub(crate) fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if let Some(c) = matrix.clone().cholesky() {
        return Some((c, 0.0));
    }
    for jitter in JITTER_LADDER {
        let mut m = matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Some((c, jitter));
        }
    }
    None
}
