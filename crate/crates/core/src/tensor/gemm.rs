//! Safe wrapper over the `matrixmultiply` dgemm kernel.

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            trans: !self.trans,
            ..self
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    fn dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// (row stride, column stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + (accumulate ? c : 0)`; `c` is row-major `m x n`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the operand slices hold exactly rows*cols elements (checked in
    // `Mat::new`) and the strides describe row-major or transposed row-major
    // views that stay within them; `c` holds m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2), &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(Mat::new(&a, 2, 2).t(), Mat::new(&b, 2, 2), &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2).t(), &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
        gemm(Mat::new(&a, 2, 2).t(), Mat::new(&b, 2, 2).t(), &mut c, false);
        assert_eq!(c, [23.0, 31.0, 34.0, 46.0]);
    }

    #[test]
    fn matches_naive_products() {
        let fill = |len: usize, s: f64| (0..len).map(|i| ((i as f64) * s).sin()).collect::<Vec<_>>();
        for (m, k, n) in [(3, 5, 4), (40, 33, 37)] {
            let a = fill(m * k, 0.7);
            let at = fill(k * m, 0.3);
            let b = fill(k * n, 1.1);
            let bt = fill(n * k, 0.9);
            for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
                let am = if ta { Mat::new(&at, k, m).t() } else { Mat::new(&a, m, k) };
                let bm = if tb { Mat::new(&bt, n, k).t() } else { Mat::new(&b, k, n) };
                let mut c = vec![1.0; m * n];
                gemm(am, bm, &mut c, true);
                for i in 0..m {
                    for j in 0..n {
                        let want: f64 = 1.0
                            + (0..k)
                                .map(|p| {
                                    let x = if ta { at[p * m + i] } else { a[i * k + p] };
                                    let y = if tb { bt[j * k + p] } else { b[p * n + j] };
                                    x * y
                                })
                                .sum::<f64>();
                        assert!((c[i * n + j] - want).abs() < 1e-12, "{m}x{k}x{n} {ta} {tb}");
                    }
                }
            }
        }
    }
}
