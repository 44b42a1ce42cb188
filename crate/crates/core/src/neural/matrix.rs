//! Row-major dense matrix with gemm-backed products.

use matrixmultiply::dgemm;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `alpha * op(a) op(b) + beta * c` into `c`, with op chosen by the flags.
    fn gemm_into(a: &Matrix, ta: bool, b: &Matrix, tb: bool, c: &mut Matrix, beta: f64) {
        let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(k, k2, "matmul inner dimension");
        assert_eq!((c.rows, c.cols), (m, n), "matmul output shape");
        let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: strides and extents describe the owned buffers exactly.
        unsafe {
            dgemm(
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
                beta,
                c.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(self.rows, other.cols);
        Self::gemm_into(self, false, other, false, &mut c, 0.0);
        c
    }

    /// `self^T other`
    pub fn tmatmul(&self, other: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(self.cols, other.cols);
        Self::gemm_into(self, true, other, false, &mut c, 0.0);
        c
    }

    /// `self other^T`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(self.rows, other.rows);
        Self::gemm_into(self, false, other, true, &mut c, 0.0);
        c
    }

    /// `c += a^T b`
    pub fn acc_tmatmul(c: &mut Matrix, a: &Matrix, b: &Matrix) {
        Self::gemm_into(a, true, b, false, c, 1.0);
    }

    /// `c += a b^T`
    pub fn acc_matmul_t(c: &mut Matrix, a: &Matrix, b: &Matrix) {
        Self::gemm_into(a, false, b, true, c, 1.0);
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in s.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        s
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let s = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
                c.set(i, j, s);
            }
        }
        c
    }

    fn seq(r: usize, c: usize, off: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|i| (i as f64 * 0.37 + off).sin()).collect())
    }

    fn close(a: &Matrix, b: &Matrix) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn products_match_naive() {
        let a = seq(3, 4, 0.1);
        let b = seq(4, 5, 0.7);
        assert!(close(&a.matmul(&b), &naive(&a, &b)));
        let at = a.transpose();
        assert!(close(&at.tmatmul(&b), &naive(&a, &b)));
        let bt = b.transpose();
        assert!(close(&a.matmul_t(&bt), &naive(&a, &b)));
        let mut c = Matrix::filled(3, 5, 1.0);
        Matrix::acc_matmul_t(&mut c, &a, &bt);
        assert!(close(&c, &naive(&a, &b).map(|v| v + 1.0)));
        let mut c = Matrix::filled(3, 5, 1.0);
        Matrix::acc_tmatmul(&mut c, &at, &b);
        assert!(close(&c, &naive(&a, &b).map(|v| v + 1.0)));
    }

    #[test]
    fn sums_and_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(m.col_sums(), vec![4.0, 6.0]);
        assert_eq!(m.row_sums(), vec![3.0, 7.0]);
        assert_eq!(m.to_rows(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(m.transpose().row(0), &[1.0, 3.0]);
    }
}
