//! Raw slice kernels shared by the graph's forward and backward passes.
//!
//! Products go through `matrixmultiply::dgemm` with explicit strides so that
//! transposed operands and dilated-convolution taps never need a copy.

/// Strided view of a logical `rows × cols` matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// Strided mutable destination.
pub struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn row_major(data: &'a mut [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }
}

/// `c ← beta·c + a·b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta != 1.0 {
            for i in 0..m {
                for j in 0..n {
                    let idx = c.offset + i * c.row_stride + j * c.col_stride;
                    c.data[idx] *= beta;
                }
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: lhs view out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: rhs view out of bounds");
    assert!(
        c.offset + (m - 1) * c.row_stride + (n - 1) * c.col_stride < c.data.len(),
        "gemm: output view out of bounds"
    );
    // SAFETY: every view was bounds-checked against its slice above, and `c`
    // is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Geometry of a length-preserving dilated 1-D convolution over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub steps: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    /// Time offset of tap `j`, relative to the output position.
    fn tap_offset(&self, j: usize) -> isize {
        (j as isize - ((self.width - 1) / 2) as isize) * self.dilation as isize
    }

    /// Output rows `[lo, hi)` whose tap `j` lands inside the signal.
    fn valid_rows(&self, j: usize) -> Option<(usize, usize, isize)> {
        let off = self.tap_offset(j);
        let t = self.steps as isize;
        let lo = (-off).max(0);
        let hi = (t - off).min(t);
        (lo < hi).then_some((lo as usize, hi as usize, off))
    }
}

/// `out[t, o] += Σ_c Σ_j kernel[o, c, j] · signal[t + off_j, c]`, zero outside `[0, T)`.
pub fn conv1d_forward(g: ConvGeometry, signal: &[f64], kernel: &[f64], out: &mut [f64]) {
    let (cin, cout, w) = (g.in_channels, g.out_channels, g.width);
    for j in 0..w {
        let Some((lo, hi, off)) = g.valid_rows(j) else {
            continue;
        };
        let src = (lo as isize + off) as usize;
        gemm(
            hi - lo,
            cin,
            cout,
            View {
                data: signal,
                offset: src * cin,
                row_stride: cin,
                col_stride: 1,
            },
            View {
                data: kernel,
                offset: j,
                row_stride: w,
                col_stride: cin * w,
            },
            1.0,
            ViewMut {
                data: out,
                offset: lo * cout,
                row_stride: cout,
                col_stride: 1,
            },
        );
    }
}

/// Accumulates the signal gradient of [`conv1d_forward`].
pub fn conv1d_backward_signal(g: ConvGeometry, grad_out: &[f64], kernel: &[f64], grad_signal: &mut [f64]) {
    let (cin, cout, w) = (g.in_channels, g.out_channels, g.width);
    for j in 0..w {
        let Some((lo, hi, off)) = g.valid_rows(j) else {
            continue;
        };
        let dst = (lo as isize + off) as usize;
        gemm(
            hi - lo,
            cout,
            cin,
            View {
                data: grad_out,
                offset: lo * cout,
                row_stride: cout,
                col_stride: 1,
            },
            View {
                data: kernel,
                offset: j,
                row_stride: cin * w,
                col_stride: w,
            },
            1.0,
            ViewMut {
                data: grad_signal,
                offset: dst * cin,
                row_stride: cin,
                col_stride: 1,
            },
        );
    }
}

/// Accumulates the kernel gradient of [`conv1d_forward`].
pub fn conv1d_backward_kernel(g: ConvGeometry, grad_out: &[f64], signal: &[f64], grad_kernel: &mut [f64]) {
    let (cin, cout, w) = (g.in_channels, g.out_channels, g.width);
    for j in 0..w {
        let Some((lo, hi, off)) = g.valid_rows(j) else {
            continue;
        };
        let src = (lo as isize + off) as usize;
        gemm(
            cout,
            hi - lo,
            cin,
            View {
                data: grad_out,
                offset: lo * cout,
                row_stride: 1,
                col_stride: cout,
            },
            View {
                data: signal,
                offset: src * cin,
                row_stride: cin,
                col_stride: 1,
            },
            1.0,
            ViewMut {
                data: grad_kernel,
                offset: j,
                row_stride: cin * w,
                col_stride: w,
            },
        );
    }
}
