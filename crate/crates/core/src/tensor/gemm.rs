//! Safe strided wrapper over `matrixmultiply::dgemm`.
//!
//! The kernel has a fixed blocking and summation order for a given shape, so
//! results are reproducible run to run.

/// A strided view into a flat buffer: `data[offset + i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm view out of bounds");
    }
}

pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn row_major(data: &'a mut [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: ViewMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "gemm output out of bounds");
    // SAFETY: all three views were bounds-checked for the full extent the
    // kernel touches, and `c` is a unique borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-major `a (m x k) * b (k x n)` into a fresh buffer.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        View::row_major(a, k),
        View::row_major(b, n),
        0.0,
        ViewMut::row_major(&mut c, n),
    );
    c
}
