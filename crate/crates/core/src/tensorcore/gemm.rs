//! Bounds-checked wrapper over `matrixmultiply::dgemm`.

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` view with row stride `rs`.
    pub fn rows(data: &'a [f64], rows: usize, cols: usize, rs: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Strided mutable matrix view.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn rows(data: &'a mut [f64], rows: usize, cols: usize, rs: usize) -> Self {
        MatMut {
            data,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatMut {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    assert!(a.span() <= a.data.len(), "gemm lhs out of bounds");
    assert!(b.span() <= b.data.len(), "gemm rhs out of bounds");
    let c_span = if c.rows == 0 || c.cols == 0 {
        0
    } else {
        (c.rows - 1) * c.rs + (c.cols - 1) * c.cs + 1
    };
    assert!(c_span <= c.data.len(), "gemm output out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // matrixmultiply requires k > 0 to touch c; scale explicitly.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == 0.0 { 0.0 } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: every index reachable through the given strides was checked
    // against the slice lengths above, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm(
            1.0,
            MatRef::rows(&a, 2, 3, 3),
            MatRef::rows(&b, 3, 2, 2),
            0.0,
            MatMut::rows(&mut c, 2, 2, 2),
        );
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // (a^T)^T b == a b, written into a transposed output
        let mut ct = [0.0; 4];
        gemm(
            1.0,
            MatRef::rows(&a, 2, 3, 3).t().t(),
            MatRef::rows(&b, 3, 2, 2),
            0.0,
            MatMut::rows(&mut ct, 2, 2, 2).t(),
        );
        assert_eq!(ct, [58.0, 139.0, 64.0, 154.0]);
    }
}
