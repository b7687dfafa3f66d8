/// Strided view of a row-major matrix block.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    pub fn with_row_stride(self, row_stride: usize) -> Self {
        Self { row_stride, ..self }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c[offset..] (+)= a · b`, where `c` is `a.rows × b.cols` with row stride `c_row_stride`.
pub(crate) fn gemm(
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
    accumulate: bool,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    assert!(a.last_index() < a.data.len());
    assert!(b.last_index() < b.data.len());
    assert!(c_offset + (a.rows - 1) * c_row_stride + b.cols - 1 < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    if a.cols == 0 {
        if !accumulate {
            for r in 0..a.rows {
                let start = c_offset + r * c_row_stride;
                c[start..start + b.cols].fill(0.0);
            }
        }
        return;
    }
    // SAFETY: every pointer/stride combination addresses memory inside the
    // slices, checked by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}
