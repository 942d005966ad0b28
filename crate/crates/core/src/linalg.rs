//! Small dense linear algebra kernels.
//!
//! Row-major [`Mat`] plus the factorizations the rest of the crate needs:
//! Cholesky, triangular solves, partially pivoted LU and the matrix
//! exponential. Sizes here are desk-scale (at most a few thousand rows), so
//! everything is written as straightforward loops.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("Mat::from_rows", "ragged rows"));
        }
        Ok(Mat {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "Mat::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "Mat::sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip(other, "Mat::hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "Mat::matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if self.cols != v.len() {
            return Err(Error::shape(
                "Mat::matvec",
                format!("{}x{} * {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn mean_diag(&self) -> T {
        if self.rows == 0 {
            return T::zero();
        }
        self.trace() / T::from_usize_lossy(self.rows.min(self.cols))
    }

    pub fn add_diag(&mut self, c: T) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += c;
        }
    }

    pub fn kron(&self, other: &Self) -> Self {
        let (p, q) = (other.rows, other.cols);
        Mat::from_fn(self.rows * p, self.cols * q, |i, j| {
            self[(i / p, j / q)] * other[(i % p, j % q)]
        })
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix. Only the
    /// lower triangle is read.
    pub fn cholesky(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::shape("cholesky", "matrix is not square"));
        }
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(l)
    }

    /// Solves `self * X = B` where `self` is lower triangular.
    pub fn solve_lower(&self, b: &Self, unit_diag: bool) -> Result<Self> {
        self.check_solve(b, "solve_lower")?;
        let n = self.rows;
        let mut x = b.clone();
        for c in 0..b.cols {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = if unit_diag { s } else { s / self[(i, i)] };
            }
        }
        Ok(x)
    }

    /// Solves `self * X = B` where `self` is upper triangular.
    pub fn solve_upper(&self, b: &Self, unit_diag: bool) -> Result<Self> {
        self.check_solve(b, "solve_upper")?;
        let n = self.rows;
        let mut x = b.clone();
        for c in 0..b.cols {
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= self[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = if unit_diag { s } else { s / self[(i, i)] };
            }
        }
        Ok(x)
    }

    fn check_solve(&self, b: &Self, op: &'static str) -> Result<()> {
        if !self.is_square() || self.rows != b.rows {
            return Err(Error::shape(
                op,
                format!("{}x{} \\ {}x{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        Ok(())
    }

    /// Solves `self * X = B` with the Cholesky factor of `self`.
    pub fn cholesky_solve(&self, b: &Self) -> Result<Self> {
        let l = self.cholesky()?;
        let y = l.solve_lower(b, false)?;
        l.transpose().solve_upper(&y, false)
    }

    pub fn lu(&self) -> Result<Lu<T>> {
        Lu::new(self)
    }

    pub fn solve(&self, b: &Self) -> Result<Self> {
        self.lu()?.solve(b)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.solve(&Mat::identity(self.rows))
    }

    /// Matrix exponential by scaling and squaring with a Taylor series
    /// truncated once terms drop below `1e-16` relative.
    pub fn expm(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::shape("expm", "matrix is not square"));
        }
        let n = self.rows;
        let norm = (0..n)
            .map(|i| self.row(i).iter().fold(T::zero(), |s, &x| s + x.abs()))
            .fold(T::zero(), T::max);
        let mut squarings = 0u32;
        let mut scale = T::one();
        while norm * scale > T::lit(0.5) {
            scale *= T::lit(0.5);
            squarings += 1;
        }
        let a = self.scale(scale);
        let mut result = Mat::identity(n);
        let mut term = Mat::identity(n);
        for k in 1..40 {
            term = term.matmul(&a)?.scale(T::one() / T::from_usize_lossy(k));
            result = result.add(&term)?;
            if term.max_abs() <= T::lit(1e-17) * result.max_abs() {
                break;
            }
        }
        for _ in 0..squarings {
            result = result.matmul(&result)?;
        }
        Ok(result)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    lu: Mat<T>,
    perm: Vec<usize>,
    sign: T,
}

impl<T: Scalar> Lu<T> {
    fn new(a: &Mat<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape("lu", "matrix is not square"));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot == T::zero() || !pivot.is_finite() {
                return Err(Error::Singular("lu"));
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let d = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / d;
                lu[(i, k)] = f;
                if f != T::zero() {
                    for j in k + 1..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= f * u;
                    }
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    pub fn solve(&self, b: &Mat<T>) -> Result<Mat<T>> {
        let n = self.lu.rows;
        if b.rows != n {
            return Err(Error::shape("lu solve", format!("{n} vs {}", b.rows)));
        }
        let pb = Mat::from_fn(n, b.cols, |i, j| b[(self.perm[i], j)]);
        let y = self.lu.solve_lower(&pb, true)?;
        self.lu.solve_upper(&y, false)
    }

    pub fn det(&self) -> T {
        (0..self.lu.rows).fold(self.sign, |d, i| d * self.lu[(i, i)])
    }
}

/// Largest singular value squared, by power iteration on `MᵀM` from a fixed
/// start vector. Returns `(sigma^2, v)` with `v` the unit right singular
/// vector estimate.
pub fn spectral_norm_sq<T: Scalar>(m: &Mat<T>, iters: usize, start: &[T]) -> Result<(T, Vec<T>)> {
    if start.len() != m.cols() {
        return Err(Error::shape("spectral_norm_sq", "start vector length"));
    }
    let mt = m.transpose();
    let normalize = |v: &mut Vec<T>| -> T {
        let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if n > T::zero() {
            v.iter_mut().for_each(|x| *x /= n);
        }
        n
    };
    let mut v = start.to_vec();
    if normalize(&mut v) == T::zero() {
        return Ok((T::zero(), v));
    }
    for _ in 0..iters {
        let mv = m.matvec(&v)?;
        let mut w = mt.matvec(&mv)?;
        if normalize(&mut w) == T::zero() {
            return Ok((T::zero(), v));
        }
        v = w;
    }
    let mv = m.matvec(&v)?;
    Ok((mv.iter().map(|&x| x * x).sum(), v))
}
