//! Safe wrapper over the `matrixmultiply` dgemm kernel.

/// Row-major matrix view with optional transpose: the logical matrix is
/// `rows × cols`, element `(i, j)` lives at `i * row_stride + j * col_stride`.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Sub-matrix view with an explicit leading stride (for column blocks).
    pub fn strided(data: &'a [f64], rows: usize, cols: usize, row_stride: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: row_stride as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize
    }
}

/// `c = alpha * a·b + beta * c`, where `c` is row-major with leading stride
/// `c_stride` (≥ `b.cols`).
pub fn gemm_strided(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], c_stride: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_stride >= n);
    assert!(c.len() > (m - 1) * c_stride + n - 1, "gemm output too small");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * c_stride..i * c_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.data.len() > a.max_offset(), "gemm lhs out of bounds");
    assert!(b.data.len() > b.max_offset(), "gemm rhs out of bounds");
    // SAFETY: bounds of all three operands were checked above against the
    // strides handed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            c_stride as isize,
            1,
        );
    }
}

/// `c = alpha * a·b + beta * c` with `c` densely packed `a.rows × b.cols`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    gemm_strided(alpha, a, b, beta, c, b.cols);
}
