//! Strided matrix products backed by `matrixmultiply`.

use super::Real;

/// Shape and strides of a matrix view into a flat slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl Layout {
    pub const fn row_major(rows: usize, cols: usize) -> Self {
        Layout { rows, cols, row_stride: cols as isize, col_stride: 1 }
    }

    /// The same memory read as the transposed matrix.
    pub const fn t(self) -> Self {
        Layout {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        debug_assert!(self.row_stride >= 0 && self.col_stride >= 0);
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize + 1
    }
}

/// `c = alpha * a * b + beta * c`.
///
/// Panics if the layouts disagree or address memory outside the slices.
pub fn gemm<R: Real>(
    alpha: R,
    a: &[R],
    la: Layout,
    b: &[R],
    lb: Layout,
    beta: R,
    c: &mut [R],
    lc: Layout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner extent");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    assert!(la.span() <= a.len() && lb.span() <= b.len() && lc.span() <= c.len());
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for i in 0..lc.rows {
            for j in 0..lc.cols {
                let idx = i * lc.row_stride as usize + j * lc.col_stride as usize;
                c[idx] = if beta == R::zero() { R::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    // SAFETY: spans were checked against the slice lengths above.
    unsafe {
        R::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            lc.row_stride,
            lc.col_stride,
        );
    }
}
