//! Numeric kernels shared by the graph operations.

/// Rows per parallel work item. Below this a product runs on one thread.
const ROW_BLOCK: usize = 64;

/// Dense matrix layout: `rows x cols` logical view of a row-major buffer,
/// optionally transposed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    /// logical extents after transposition
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Logical transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [f64], stored_rows: usize, stored_cols: usize) -> Self {
        Self {
            data,
            rows: stored_cols,
            cols: stored_rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (+)= a * b`. Output rows are computed independently, so splitting them
/// across threads leaves every element's summation order unchanged.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let block = |row0: usize, chunk: &mut [f64]| {
        let rows = chunk.len() / n;
        // SAFETY: `a` holds `m x k` logical elements addressed through
        // (rsa, csa); rows row0..row0+rows are in bounds. `b` is `k x n`, and
        // `chunk` is exactly `rows x n` contiguous row-major storage.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m <= ROW_BLOCK {
        block(0, out);
    } else {
        crate::par::for_each_chunk_mut(out, ROW_BLOCK * n, |i, chunk| block(i * ROW_BLOCK, chunk));
    }
}

/// Sequential reference product used by benches to compare against [`gemm`].
pub fn matmul_sequential(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    // SAFETY: a is m x k and b is k x n row-major; out is m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Row-blocked product that follows the `parallel` feature.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(MatRef::new(a, m, k), MatRef::new(b, k, n), &mut out, false);
    out
}

/// In-place numerically stable softmax of one slice.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// log-softmax of one slice.
pub fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}
