//! Strided GEMM views over row-major buffers.

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    /// Dense row-major `[rows, cols]` view.
    pub fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, offset: 0, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    /// Sub-view of `cols` columns starting at `col0`.
    pub fn cols_from(self, col0: usize, cols: usize) -> Self {
        debug_assert!(col0 + cols <= self.cols);
        Self { offset: (self.offset as isize + col0 as isize * self.cs) as usize, cols, ..self }
    }

    #[inline]
    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset as isize + (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs;
        assert!(last >= 0 && (last as usize) < self.data.len() && self.rs >= 0 && self.cs >= 0, "matrix view out of bounds");
    }
}

/// `C[.., col0..col0+n] = alpha * A B + beta * C` where C is row-major with `ldc` columns.
pub fn gemm_into(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], c_offset: usize, ldc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    a.check();
    b.check();
    assert!(c_offset + (m - 1) * ldc + n <= c.len(), "output view out of bounds");
    if k == 0 {
        if beta != 1.0 {
            for i in 0..m {
                for v in &mut c[c_offset + i * ldc..c_offset + i * ldc + n] {
                    *v *= beta;
                }
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above; strides are non-negative and
    // the output rows addressed by (c_offset, ldc, m, n) lie inside `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr().add(c_offset),
            ldc as isize,
            1,
        );
    }
}

/// Dense product of two views.
pub fn matmul(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    let mut out = vec![0.0; a.rows * b.cols];
    gemm_into(1.0, a, b, 0.0, &mut out, 0, b.cols);
    out
}
