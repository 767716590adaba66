//! Matrix products split into fixed row blocks.
//!
//! Each output block is computed by one single-threaded `dgemm` call whose
//! inner reduction never crosses a block boundary, so results are
//! bit-identical for every worker count.

use rayon::prelude::*;

/// Output rows handled by one task.
const ROW_BLOCK: usize = 64;

/// Strided read-only view of a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "view size");
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn offset(&self, row: usize) -> usize {
        row * self.rs as usize
    }
}

/// `c = a · b + beta · c`, with `c` contiguous row-major `a.rows × b.cols`.
pub(crate) fn matmul(a: View<'_>, b: View<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (k, n) = (a.cols, b.cols);
    assert_eq!(c.len(), a.rows * n, "output size");
    if n == 0 || a.rows == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(blk, out)| {
        let r0 = blk * ROW_BLOCK;
        let m = out.len() / n;
        let a_block = &a.data[a.offset(r0)..];
        // SAFETY: the strided extents of `a_block` (m rows from r0), `b` and
        // `out` lie within their slices; the views were built from exact-size
        // row-major buffers and `out` has exactly m * n elements.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a_block.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (130, 17, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 * 0.5).collect();
        let mut c = vec![0.0; m * n];
        matmul(View::new(&a, m, k), View::new(&b, k, n), &mut c, 0.0);
        assert_eq!(c, naive(&a, &b, m, k, n));

        // (b^T a^T)^T == a b
        let mut ct = vec![0.0; n * m];
        matmul(View::new(&b, k, n).t(), View::new(&a, m, k).t(), &mut ct, 0.0);
        for i in 0..m {
            for j in 0..n {
                assert_eq!(ct[j * m + i], c[i * n + j]);
            }
        }
    }

    #[test]
    fn beta_accumulates() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 4.0];
        let mut c = vec![10.0];
        matmul(View::new(&a, 1, 2), View::new(&b, 2, 1), &mut c, 1.0);
        assert_eq!(c, vec![21.0]);
    }
}
