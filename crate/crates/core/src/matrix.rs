//! Dense row-major `f64` matrices.
//!
//! All reductions accumulate in ascending index order, starting from `0.0`,
//! so results are bitwise reproducible for identical inputs.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Matrix of independent draws uniform in `[lo, hi)`, filled in row-major
    /// order from the xoshiro256** stream for `seed` (see [`crate::rng`]).
    pub fn seeded_uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::uniform_from(&mut r, rows, cols, lo, hi)
    }

    /// Same as [`Mat::seeded_uniform`] but continues an existing stream.
    pub fn uniform_from(r: &mut rng::SeededRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Argument(format!(
                "uniform range requires finite lo < hi, got [{lo}, {hi})"
            )));
        }
        let data = (0..rows * cols).map(|_| rng::uniform_f64(r, lo, hi)).collect();
        Ok(Mat { rows, cols, data })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Position of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols.max(1), p % self.cols.max(1)))
    }

    /// Same data viewed with a different shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{}x{} into {rows}x{cols}", self.rows, self.cols),
            ));
        }
        Ok(Mat {
            rows,
            cols,
            data: self.data,
        })
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, b: &Mat) -> Result<Mat> {
        if self.cols != b.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..b.cols {
                let mut acc = 0.0;
                for (p, &av) in a_row.iter().enumerate() {
                    acc += av * b.data[p * b.cols + j];
                }
                out.data[i * b.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · b` without materializing the transpose.
    pub fn t_matmul(&self, b: &Mat) -> Result<Mat> {
        if self.rows != b.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("({}x{})ᵀ * {}x{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut out = Mat::zeros(self.cols, b.cols);
        for i in 0..self.cols {
            for j in 0..b.cols {
                let mut acc = 0.0;
                for p in 0..self.rows {
                    acc += self.data[p * self.cols + i] * b.data[p * b.cols + j];
                }
                out.data[i * b.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self · bᵀ` without materializing the transpose.
    pub fn matmul_t(&self, b: &Mat) -> Result<Mat> {
        if self.cols != b.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{}x{} * ({}x{})ᵀ", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            for j in 0..b.rows {
                out.data[i * b.rows + j] = dot(self.row(i), b.row(j));
            }
        }
        Ok(out)
    }

    /// Per-row sums as an `rows x 1` column.
    pub fn rowsum(&self) -> Mat {
        let data = (0..self.rows).map(|i| sum(self.row(i))).collect();
        Mat {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Per-column sums as a `1 x cols` row.
    pub fn colsum(&self) -> Mat {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Mat {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    /// Per-row squared L2 norms as an `rows x 1` column.
    pub fn sqnorm_rows(&self) -> Mat {
        let data = (0..self.rows)
            .map(|i| {
                let r = self.row(i);
                dot(r, r)
            })
            .collect();
        Mat {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    pub fn scale(&self, k: f64) -> Mat {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, b: &Mat) -> Result<Mat> {
        self.zip_with(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Mat) -> Result<Mat> {
        self.zip_with(b, "sub", |x, y| x - y)
    }

    pub fn hadamard(&self, b: &Mat) -> Result<Mat> {
        self.zip_with(b, "hadamard", |x, y| x * y)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row_broadcast(&self, row: &Mat) -> Result<Mat> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("{}x{} + {}x{}", self.rows, self.cols, row.rows, row.cols),
            ));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, &v) in out.row_mut(i).iter_mut().zip(&row.data) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// In-place `self += k * b`.
    pub fn axpy(&mut self, k: f64, b: &Mat) -> Result<()> {
        self.check_same(b, "axpy")?;
        for (o, &v) in self.data.iter_mut().zip(&b.data) {
            *o += k * v;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn zip_with(&self, b: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        self.check_same(b, op)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    fn check_same(&self, b: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != b.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Ascending-order dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Ascending-order sum.
pub fn sum(a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in a {
        acc += v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a[(i, p)] * b[(p, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let m = Mat::from_rows(&[[1.0, -2.0, 3.5], [0.25, 7.0, -1.0]]);
        assert_eq!(Mat::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Mat::from_rows(&[[1.0], [1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Mat::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn seeded_product_matches_triple_loop() {
        let a = Mat::seeded_uniform(7, 5, -1.0, 1.0, 11).unwrap();
        let b = Mat::seeded_uniform(5, 3, -1.0, 1.0, 12).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), naive_matmul(&a, &b));
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), naive_matmul(&a, &b));
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Mat::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
        assert!(a.add(&Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn reductions() {
        assert_eq!(Mat::zeros(3, 4).rowsum(), Mat::zeros(3, 1));
        assert_eq!(Mat::from_rows(&[[3.0, 4.0]]).sqnorm_rows(), Mat::from_rows(&[[25.0]]));
        let m = Mat::seeded_uniform(6, 4, -2.0, 2.0, 5).unwrap();
        let mut oracle = [0.0; 4];
        for i in 0..6 {
            for j in 0..4 {
                oracle[j] += m[(i, j)];
            }
        }
        assert_eq!(m.colsum().as_slice(), &oracle);
    }

    #[test]
    fn seeded_uniform_contract() {
        let a = Mat::seeded_uniform(1, 1, 0.0, 1.0, 7).unwrap();
        let b = Mat::seeded_uniform(1, 1, 0.0, 1.0, 7).unwrap();
        assert_eq!(a.as_slice()[0].to_bits(), b.as_slice()[0].to_bits());

        let big = Mat::seeded_uniform(100, 100, -1.0, 1.0, 3).unwrap();
        assert!(big.as_slice().iter().all(|v| (-1.0..1.0).contains(v)));
        let mean = sum(big.as_slice()) / big.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");

        let s1 = Mat::seeded_uniform(2, 3, 0.0, 0.5, 1).unwrap();
        let s2 = Mat::seeded_uniform(2, 3, 0.0, 0.5, 2).unwrap();
        assert_ne!(s1, s2);

        assert!(matches!(
            Mat::seeded_uniform(1, 1, 1.0, 1.0, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn reshape_checks_length() {
        let m = Mat::zeros(2, 6);
        assert_eq!(m.clone().reshape(3, 4).unwrap().shape(), (3, 4));
        assert!(m.reshape(5, 2).is_err());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..5, n in 1usize..5, p in 1usize..5, q in 1usize..5) {
            let a = Mat::seeded_uniform(m, n, -1.0, 1.0, seed).unwrap();
            let b = Mat::seeded_uniform(n, p, -1.0, 1.0, seed + 1).unwrap();
            let c = Mat::seeded_uniform(p, q, -1.0, 1.0, seed + 2).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(right.max_abs()).max(1e-300);
            let diff = left.sub(&right).unwrap().max_abs();
            prop_assert!(diff / scale <= 1e-10);
        }

        #[test]
        fn transpose_distributes_over_add(seed in 0u64..10_000, m in 1usize..6, n in 1usize..6) {
            let a = Mat::seeded_uniform(m, n, -5.0, 5.0, seed).unwrap();
            let b = Mat::seeded_uniform(m, n, -5.0, 5.0, seed ^ 0xff).unwrap();
            prop_assert_eq!(a.add(&b).unwrap().transpose(), a.transpose().add(&b.transpose()).unwrap());
        }

        #[test]
        fn reductions_are_reproducible(seed in 0u64..10_000) {
            let a = Mat::seeded_uniform(9, 7, -1e3, 1e3, seed).unwrap();
            let b = a.clone();
            let bits = |m: &Mat| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.colsum()), bits(&b.colsum()));
            prop_assert_eq!(bits(&a.rowsum()), bits(&b.rowsum()));
            prop_assert_eq!(bits(&a.sqnorm_rows()), bits(&b.sqnorm_rows()));
        }
    }
}
