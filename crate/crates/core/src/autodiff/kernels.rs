/// Strides of a logical matrix inside a row-major buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    rs: isize,
    cs: isize,
}

impl Layout {
    /// Row-major matrix with `ld` columns.
    pub(crate) fn row(ld: usize) -> Self {
        Layout { rs: ld as isize, cs: 1 }
    }

    /// Transpose of a row-major matrix that has `ld` columns.
    pub(crate) fn trans(ld: usize) -> Self {
        Layout { rs: 1, cs: ld as isize }
    }
}

/// `c[m,n] (+)= a[m,k] · b[k,n]`, `c` row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover every index reachable through the given
    // strides (checked above for the contiguous layouts used in this crate).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
