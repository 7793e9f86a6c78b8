//! Thin safe wrapper over `matrixmultiply` for strided products.

/// Strided view of a dense matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View<'_> {
    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c += a · b`, where `c` is `a.rows × b.cols` with strides `(rsc, csc)`.
pub(crate) fn gemm_acc(a: View, b: View, c: &mut [f64], rsc: usize, csc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: every index touched by the kernel is bounded by the asserts
    // above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
