//! Row-wise sparse matrices, reverse Cuthill-McKee ordering and an envelope
//! Cholesky factorization.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Square sparse matrix stored as sorted `(col, value)` lists per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMat {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMat {
    pub fn zeros(n: usize) -> Self {
        SparseMat { n, rows: vec![Vec::new(); n] }
    }

    pub fn identity(n: usize) -> Self {
        SparseMat {
            n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Duplicate entries are summed; exact zeros are dropped.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::shape("sparse", format!("entry ({i}, {j}) outside {n} x {n}")));
            }
            rows[i].push((j, v));
        }
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(r.len());
            for &(j, v) in r.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == j => last.1 += v,
                    _ => merged.push((j, v)),
                }
            }
            merged.retain(|e| e.1 != 0.0);
            *r = merged;
        }
        Ok(SparseMat { n, rows })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |e| e.0)
            .map_or(0.0, |k| self.rows[i][k].1)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, v)| (i, j, v)))
            .collect()
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &SparseMat, b: f64) -> Result<SparseMat> {
        if self.n != other.n {
            return Err(Error::shape("sparse add", format!("{} vs {}", self.n, other.n)));
        }
        let mut t: Vec<(usize, usize, f64)> = self.triplets().into_iter().map(|(i, j, v)| (i, j, a * v)).collect();
        t.extend(other.triplets().into_iter().map(|(i, j, v)| (i, j, b * v)));
        SparseMat::from_triplets(self.n, &t)
    }

    pub fn matmul(&self, other: &SparseMat) -> Result<SparseMat> {
        if self.n != other.n {
            return Err(Error::shape("sparse matmul", format!("{} vs {}", self.n, other.n)));
        }
        let mut t = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for &(k, a) in r {
                for &(j, b) in &other.rows[k] {
                    t.push((i, j, a * b));
                }
            }
        }
        SparseMat::from_triplets(self.n, &t)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect()
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.n, self.n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.triplets().iter().all(|&(i, j, v)| (self.get(j, i) - v).abs() <= tol)
    }

    /// `P A P^T` for `perm[new] = old`.
    pub fn permute(&self, perm: &[usize]) -> SparseMat {
        let mut inv = vec![0; self.n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let t: Vec<(usize, usize, f64)> = self.triplets().into_iter().map(|(i, j, v)| (inv[i], inv[j], v)).collect();
        SparseMat::from_triplets(self.n, &t).expect("permutation keeps bounds")
    }
}

/// Reverse Cuthill-McKee ordering of the (symmetric) pattern; returns
/// `perm[new] = old`.
pub fn rcm_ordering(a: &SparseMat) -> Vec<usize> {
    let n = a.dim();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).iter().map(|e| e.0).filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let start = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree[i], i)).expect("unvisited node");
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (degree[w], w));
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Lower Cholesky factor stored over each row's envelope, for a
/// symmetrically permuted matrix `P A P^T = L L^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeCholesky {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    first: Vec<usize>,
    /// Row `i` holds columns `first[i]..=i`.
    rows: Vec<Vec<f64>>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &SparseMat) -> Result<Self> {
        let perm = rcm_ordering(a);
        Self::factor_with(a, perm)
    }

    pub fn factor_with(a: &SparseMat, perm: Vec<usize>) -> Result<Self> {
        let n = a.dim();
        let pa = a.permute(&perm);
        let first: Vec<usize> = (0..n)
            .map(|i| pa.row(i).iter().map(|e| e.0).filter(|&j| j <= i).min().unwrap_or(i))
            .collect();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let fi = first[i];
            let mut r = vec![0.0; i - fi + 1];
            for &(j, v) in pa.row(i) {
                if j <= i {
                    r[j - fi] = v;
                }
            }
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = r[j - fi];
                let rj = &rows[j];
                for k in k0..j {
                    s -= r[k - fi] * rj[k - fj];
                }
                r[j - fi] = s / rj[j - fj];
            }
            let mut d = r[i - fi];
            for k in fi..i {
                d -= r[k - fi] * r[k - fi];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: i });
            }
            r[i - fi] = d.sqrt();
            rows.push(r);
        }
        Ok(EnvelopeCholesky { n, perm, first, rows })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries, a measure of fill.
    pub fn envelope_size(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    fn l(&self, i: usize, j: usize) -> f64 {
        if j < self.first[i] || j > i {
            0.0
        } else {
            self.rows[i][j - self.first[i]]
        }
    }

    /// Solves `L y = b` in the permuted ordering.
    fn forward(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let fi = self.first[i];
            let r = &self.rows[i];
            let mut s = b[i];
            for k in fi..i {
                s -= r[k - fi] * b[k];
            }
            b[i] = s / r[i - fi];
        }
    }

    /// Solves `L^T x = y` in the permuted ordering.
    fn backward(&self, y: &mut [f64]) {
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let r = &self.rows[i];
            y[i] /= r[i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= r[k - fi] * yi;
            }
        }
    }

    /// `A^{-1} b` in the original ordering.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut x);
        self.backward(&mut x);
        let mut out = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    /// `P^T L^{-T} P eps`, a draw with covariance `A^{-1}` when `eps` is
    /// standard normal. Permuting the noise first leaves the distribution
    /// unchanged and makes `A = I` return `eps` itself.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = self.perm.iter().map(|&old| eps[old]).collect();
        self.backward(&mut x);
        let mut out = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    /// Dense `L` in the permuted ordering (tests and diagnostics).
    pub fn lower_dense(&self) -> Mat<f64> {
        Mat::from_fn(self.n, self.n, |i, j| self.l(i, j))
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}
