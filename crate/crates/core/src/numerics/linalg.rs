//! Strided dense matrix products backed by `matrixmultiply`.

/// `c = a b` for strided row-major views; `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    gemm_beta(m, k, n, a, (rsa, csa), b, (rsb, csb), 0.0, c, (rsc, csc));
}

/// `c += a b` for strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    gemm_beta(m, k, n, a, (rsa, csa), b, (rsb, csb), 1.0, c, (rsc, csc));
}

#[allow(clippy::too_many_arguments)]
fn gemm_beta(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
    sc: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > (m - 1) * sc.0 + (n - 1) * sc.1);
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * sc.0 + j * sc.1] = 0.0;
                }
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a = [1 2 3; 4 5 6], b = a^T via strides
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, 3, 1, &a, 1, 3, &mut c, 2, 1);
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
        gemm_acc(2, 3, 2, &a, 3, 1, &a, 1, 3, &mut c, 2, 1);
        assert_eq!(c, [28.0, 64.0, 64.0, 154.0]);
    }
}
