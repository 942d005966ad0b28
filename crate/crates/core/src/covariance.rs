//! Structured covariance matrices for random effects.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

const KRON_MAX: usize = 10_000;
const RIDGE: f64 = 1e-8;
const GP_JITTER: f64 = 1e-6;

/// Covariance of one random-effect table across its levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovarianceSpec {
    Iid,
    /// Levels in level-map order are treated as consecutive time points.
    Ar1 {
        #[serde(default = "default_rho")]
        rho: f64,
    },
    Arma {
        #[serde(default)]
        phi: Vec<f64>,
        #[serde(default)]
        theta: Vec<f64>,
    },
    Cs {
        #[serde(default = "default_cs_rho")]
        rho: f64,
    },
    /// `a` spans the slow index, `b` the fast one; level count must equal
    /// `a_size * b_size`.
    Kron {
        a: Box<CovarianceSpec>,
        a_size: usize,
        b: Box<CovarianceSpec>,
        b_size: usize,
    },
    /// Relationship matrix over individuals named by `ids` (row order).
    Kinship {
        ids: Vec<String>,
        matrix: Vec<Vec<f64>>,
    },
    /// RBF kernel over per-level coordinates read from `coords` columns.
    Gp {
        coords: Vec<String>,
        #[serde(default = "default_lengthscale")]
        lengthscale: f64,
    },
}

fn default_rho() -> f64 {
    0.7
}
fn default_cs_rho() -> f64 {
    0.3
}
fn default_lengthscale() -> f64 {
    1.0
}

impl CovarianceSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            CovarianceSpec::Iid => "iid",
            CovarianceSpec::Ar1 { .. } => "ar1",
            CovarianceSpec::Arma { .. } => "arma",
            CovarianceSpec::Cs { .. } => "cs",
            CovarianceSpec::Kron { .. } => "kron",
            CovarianceSpec::Kinship { .. } => "kinship",
            CovarianceSpec::Gp { .. } => "gp",
        }
    }

    /// Centering on the mean parameters only makes sense when every level is
    /// exchangeable.
    pub fn is_exchangeable(&self) -> bool {
        matches!(self, CovarianceSpec::Iid | CovarianceSpec::Cs { .. })
    }
}

/// A covariance matrix with its lower Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct CovFactor<T> {
    pub sigma: Mat<T>,
    pub chol_lower: Mat<T>,
}

impl<T: Scalar> CovFactor<T> {
    pub fn from_sigma(sigma: Mat<T>) -> Result<Self> {
        let chol_lower = sigma.cholesky()?;
        Ok(CovFactor { sigma, chol_lower })
    }

    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }
}

fn check_positive<T: Scalar>(what: &str, x: T) -> Result<()> {
    if x > T::zero() && x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} must be positive and finite, got {x}")))
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::domain("covariance dimension must be at least 1"))
    } else {
        Ok(())
    }
}

pub fn build_iid<T: Scalar>(sigma2: T, n: usize) -> Result<CovFactor<T>> {
    check_positive("sigma2", sigma2)?;
    check_n(n)?;
    Ok(CovFactor {
        sigma: Mat::from_diag(&vec![sigma2; n]),
        chol_lower: Mat::from_diag(&vec![sigma2.sqrt(); n]),
    })
}

pub fn build_ar1<T: Scalar>(sigma2: T, rho: T, n: usize) -> Result<CovFactor<T>> {
    check_positive("sigma2", sigma2)?;
    check_n(n)?;
    if !(rho.abs() < T::one()) {
        return Err(Error::domain(format!("AR1 requires |rho| < 1, got {rho}")));
    }
    let sigma = Mat::from_fn(n, n, |i, j| sigma2 * rho.powi(i.abs_diff(j) as i32));
    // closed form: first column rho^i, then rho^(i-j) sqrt(1 - rho^2)
    let s = sigma2.sqrt();
    let c = (T::one() - rho * rho).sqrt();
    let chol_lower = Mat::from_fn(n, n, |i, j| {
        if j > i {
            T::zero()
        } else if j == 0 {
            s * rho.powi(i as i32)
        } else {
            s * c * rho.powi((i - j) as i32)
        }
    });
    Ok(CovFactor { sigma, chol_lower })
}

/// Checks the AR polynomial's roots lie outside the unit circle.
pub fn arma_is_stationary(phi: &[f64]) -> bool {
    match *phi {
        [] => true,
        [a] => a.abs() < 1.0,
        [a, b] => a + b < 1.0 && b - a < 1.0 && b.abs() < 1.0,
        _ => false,
    }
}

/// Autocovariances `gamma_0..gamma_{n-1}` of an ARMA(p, q) process with
/// innovation variance `sigma2`.
pub fn arma_autocovariance(phi: &[f64], theta: &[f64], sigma2: f64, n: usize) -> Result<Vec<f64>> {
    if phi.len() > 2 || theta.len() > 2 {
        return Err(Error::domain("ARMA orders above 2 are not supported"));
    }
    if !arma_is_stationary(phi) {
        return Err(Error::domain(format!("AR coefficients {phi:?} are not stationary")));
    }
    let p = phi.len();
    let q = theta.len();
    let m = p.max(q);
    // theta_0 = 1
    let th = |j: usize| if j == 0 { 1.0 } else { theta.get(j - 1).copied().unwrap_or(0.0) };
    let mut psi = vec![0.0; q + 1];
    for j in 0..=q {
        let mut v = th(j);
        for i in 1..=p.min(j) {
            v += phi[i - 1] * psi[j - i];
        }
        psi[j] = v;
    }
    // gamma_k - sum_i phi_i gamma_{|k-i|} = sigma2 sum_{j=k}^{q} theta_j psi_{j-k}
    let mut a = Mat::<f64>::zeros(m + 1, m + 1);
    let mut rhs = Mat::<f64>::zeros(m + 1, 1);
    for k in 0..=m {
        a[(k, k)] += 1.0;
        for i in 1..=p {
            let lag = k.abs_diff(i);
            a[(k, lag)] -= phi[i - 1];
        }
        rhs[(k, 0)] = (k..=q).map(|j| th(j) * psi[j - k]).sum::<f64>() * sigma2;
    }
    let g = a.solve(&rhs)?;
    let mut gamma: Vec<f64> = (0..=m).map(|k| g[(k, 0)]).collect();
    while gamma.len() < n {
        let k = gamma.len();
        let v = (1..=p).map(|i| phi[i - 1] * gamma[k - i]).sum();
        gamma.push(v);
    }
    gamma.truncate(n.max(1));
    Ok(gamma)
}

pub fn build_arma<T: Scalar>(phi: &[T], theta: &[T], sigma2: T, n: usize) -> Result<CovFactor<T>> {
    check_positive("sigma2", sigma2)?;
    check_n(n)?;
    let phi: Vec<f64> = phi.iter().map(|x| x.to_f64_lossy()).collect();
    let theta: Vec<f64> = theta.iter().map(|x| x.to_f64_lossy()).collect();
    let gamma = arma_autocovariance(&phi, &theta, sigma2.to_f64_lossy(), n)?;
    CovFactor::from_sigma(Mat::from_fn(n, n, |i, j| T::lit(gamma[i.abs_diff(j)])))
}

/// Smallest admissible compound-symmetry correlation for `n` levels.
pub fn cs_lower_bound(n: usize) -> f64 {
    if n <= 1 {
        f64::NEG_INFINITY
    } else {
        -1.0 / (n as f64 - 1.0)
    }
}

pub fn build_cs<T: Scalar>(sigma2: T, rho: T, n: usize) -> Result<CovFactor<T>> {
    check_positive("sigma2", sigma2)?;
    check_n(n)?;
    let bound = cs_lower_bound(n);
    if rho.to_f64_lossy() < bound + 1e-9 || rho >= T::one() {
        return Err(Error::domain(format!(
            "compound symmetry needs rho in [{bound} + 1e-9, 1), got {rho} (lower bound {bound})"
        )));
    }
    CovFactor::from_sigma(Mat::from_fn(n, n, |i, j| {
        if i == j {
            sigma2
        } else {
            sigma2 * rho
        }
    }))
}

pub fn build_kron<T: Scalar>(a: &CovFactor<T>, b: &CovFactor<T>) -> Result<CovFactor<T>> {
    let n = a.dim() * b.dim();
    if n > KRON_MAX {
        return Err(Error::domain(format!("Kronecker product has {n} rows, limit is {KRON_MAX}")));
    }
    Ok(CovFactor {
        sigma: a.sigma.kron(&b.sigma),
        chol_lower: a.chol_lower.kron(&b.chol_lower),
    })
}

/// Genomic relationship matrix `Z Z^T / (2 sum p_j (1 - p_j))` from 0/1/2
/// allele counts. Returns the matrix and the number of monomorphic columns
/// dropped.
pub fn build_kinship<T: Scalar>(genotypes: &Mat<T>) -> Result<(Mat<T>, usize)> {
    let (n, m) = (genotypes.rows(), genotypes.cols());
    let two = T::lit(2.0);
    let mut keep = Vec::new();
    let mut denom = T::zero();
    let mut freqs = Vec::with_capacity(m);
    for j in 0..m {
        let mut s = T::zero();
        for i in 0..n {
            let g = genotypes[(i, j)];
            if !(g == T::zero() || g == T::one() || g == two) {
                return Err(Error::domain(format!("genotype ({i}, {j}) = {g} is not 0, 1 or 2")));
            }
            s += g;
        }
        let p = s / (two * T::from_usize_lossy(n));
        freqs.push(p);
        if p > T::zero() && p < T::one() {
            keep.push(j);
            denom += two * p * (T::one() - p);
        }
    }
    if keep.is_empty() {
        return Err(Error::domain("all genotype columns are monomorphic"));
    }
    let z = Mat::from_fn(n, keep.len(), |i, k| {
        let j = keep[k];
        genotypes[(i, j)] - two * freqs[j]
    });
    let k = z.matmul(&z.transpose())?.scale(T::one() / denom);
    Ok((k, m - keep.len()))
}

/// Parses a whitespace-delimited square matrix.
pub fn parse_square_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Data(format!("kinship row {}: bad number {t:?}", i + 1)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.iter().any(|r| r.len() != rows.len()) {
        return Err(Error::Data(format!("kinship matrix is not square ({} rows)", rows.len())));
    }
    Ok(rows)
}

fn add_ridge<T: Scalar>(m: &mut Mat<T>) {
    let r = T::lit(RIDGE) * m.mean_diag().abs().max(T::min_positive_value());
    m.add_diag(r);
}

/// Factor of a fixed relationship matrix after the standard ridge.
pub fn kinship_factor<T: Scalar>(k: &Mat<T>) -> Result<CovFactor<T>> {
    if !k.is_symmetric(T::lit(1e-10) * k.max_abs().max(T::one())) {
        return Err(Error::domain("kinship matrix is not symmetric"));
    }
    let mut s = k.clone();
    add_ridge(&mut s);
    CovFactor::from_sigma(s)
}

/// Random effects of new individuals from their relationship with the
/// training individuals: `K_nt K_tt^{-1} u_t`. `u_train` may hold several
/// columns.
pub fn henderson_predict<T: Scalar>(k_new_train: &Mat<T>, k_train_train: &Mat<T>, u_train: &Mat<T>) -> Result<Mat<T>> {
    let nt = k_train_train.rows();
    if k_train_train.cols() != nt || k_new_train.cols() != nt || u_train.rows() != nt {
        return Err(Error::shape(
            "henderson_predict",
            format!(
                "K_nt {}x{}, K_tt {}x{}, u {}x{}",
                k_new_train.rows(),
                k_new_train.cols(),
                nt,
                k_train_train.cols(),
                u_train.rows(),
                u_train.cols()
            ),
        ));
    }
    // the ridge is only used when K_tt is numerically singular, so a new row
    // duplicating training row i reproduces u_i to rounding error
    let w = match k_train_train.cholesky_solve(u_train) {
        Ok(w) => w,
        Err(_) => {
            let mut ktt = k_train_train.clone();
            add_ridge(&mut ktt);
            ktt.cholesky_solve(u_train)?
        }
    };
    k_new_train.matmul(&w)
}

fn sq_dists<T: Scalar>(coords: &Mat<T>) -> Mat<T> {
    let n = coords.rows();
    Mat::from_fn(n, n, |i, j| {
        coords
            .row(i)
            .iter()
            .zip(coords.row(j))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    })
}

pub fn build_gp_rbf<T: Scalar>(coords: &Mat<T>, sigma2: T, lengthscale: T) -> Result<CovFactor<T>> {
    build_gp_rbf_opts(coords, sigma2, lengthscale, true)
}

/// RBF kernel; `jitter` adds `1e-6 sigma2` to the diagonal. Without jitter,
/// coincident coordinates make the matrix singular and are rejected.
pub fn build_gp_rbf_opts<T: Scalar>(coords: &Mat<T>, sigma2: T, lengthscale: T, jitter: bool) -> Result<CovFactor<T>> {
    check_positive("sigma2", sigma2)?;
    check_positive("lengthscale", lengthscale)?;
    check_n(coords.rows())?;
    let d2 = sq_dists(coords);
    let n = coords.rows();
    if !jitter {
        for i in 0..n {
            for j in 0..i {
                if d2[(i, j)] == T::zero() {
                    return Err(Error::domain(format!("coordinates {j} and {i} coincide; enable jitter")));
                }
            }
        }
    }
    let two_l2 = T::lit(2.0) * lengthscale * lengthscale;
    let mut k = d2.map(|d| sigma2 * (-d / two_l2).exp());
    if jitter {
        k.add_diag(T::lit(GP_JITTER) * sigma2);
    }
    add_ridge(&mut k);
    CovFactor::from_sigma(k)
}

/// `L eps`.
pub fn correlated_sample<T: Scalar>(factor: &CovFactor<T>, eps: &[T]) -> Result<Vec<T>> {
    factor.chol_lower.matvec(eps)
}

/// Draws one sample from `N(0, Sigma)`.
pub fn sample<R: Rng + ?Sized>(factor: &CovFactor<f64>, rng: &mut R) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..factor.dim()).map(|_| StandardNormal.sample(rng)).collect();
    correlated_sample(factor, &eps)
}

/// Correlation structure realized inside the model: a unit-variance factor
/// `L` with at most one trainable raw parameter, applied as `u = L v` across
/// the levels of a random-effect table.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelCorrelation {
    pub spec: CovarianceSpec,
    pub n: usize,
    /// Factor for structures without a trainable parameter.
    fixed: Option<Mat<f64>>,
    /// Squared distances between level coordinates (GP only).
    d2: Option<Mat<f64>>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl LevelCorrelation {
    /// `coords` supplies one coordinate row per level for GP structures;
    /// `kinship` is the relationship matrix already reordered to level order.
    pub fn new(spec: &CovarianceSpec, n: usize, coords: Option<&Mat<f64>>, kinship: Option<&Mat<f64>>) -> Result<Self> {
        check_n(n)?;
        let mut out = LevelCorrelation {
            spec: spec.clone(),
            n,
            fixed: None,
            d2: None,
        };
        match spec {
            CovarianceSpec::Iid => out.fixed = Some(Mat::identity(n)),
            CovarianceSpec::Ar1 { rho } => {
                if rho.abs() >= 1.0 {
                    return Err(Error::domain(format!("AR1 requires |rho| < 1, got {rho}")));
                }
            }
            CovarianceSpec::Cs { rho } => {
                if n > 1 && (*rho <= cs_lower_bound(n) || *rho >= 1.0) {
                    return Err(Error::domain(format!(
                        "compound symmetry rho {rho} outside ({}, 1)",
                        cs_lower_bound(n)
                    )));
                }
            }
            CovarianceSpec::Arma { phi, theta } => {
                let g = arma_autocovariance(phi, theta, 1.0, n)?;
                let g0 = g[0];
                let f = CovFactor::from_sigma(Mat::from_fn(n, n, |i, j| g[i.abs_diff(j)] / g0))?;
                out.fixed = Some(f.chol_lower);
            }
            CovarianceSpec::Kron { a, a_size, b, b_size } => {
                if a_size * b_size != n {
                    return Err(Error::domain(format!(
                        "Kronecker sizes {a_size} x {b_size} do not match {n} levels"
                    )));
                }
                let fa = LevelCorrelation::new(a, *a_size, None, None)?.factor(None)?;
                let fb = LevelCorrelation::new(b, *b_size, None, None)?.factor(None)?;
                if a_size * b_size > KRON_MAX {
                    return Err(Error::domain("Kronecker product too large"));
                }
                out.fixed = Some(fa.kron(&fb));
            }
            CovarianceSpec::Kinship { .. } => {
                let k = kinship.ok_or_else(|| Error::Model("kinship matrix not supplied".into()))?;
                if k.rows() != n {
                    return Err(Error::shape("kinship", format!("{} rows for {n} levels", k.rows())));
                }
                out.fixed = Some(kinship_factor(k)?.chol_lower);
            }
            CovarianceSpec::Gp { lengthscale, .. } => {
                check_positive("lengthscale", *lengthscale)?;
                let c = coords.ok_or_else(|| Error::Model("GP coordinates not supplied".into()))?;
                if c.rows() != n {
                    return Err(Error::shape("gp", format!("{} coordinate rows for {n} levels", c.rows())));
                }
                out.d2 = Some(sq_dists(c));
            }
        }
        Ok(out)
    }

    /// Initial value of the unconstrained parameter, if the structure has one.
    pub fn raw_init(&self) -> Option<f64> {
        match &self.spec {
            CovarianceSpec::Ar1 { rho } => Some(rho.atanh()),
            CovarianceSpec::Cs { rho } if self.n > 1 => {
                let lo = self.cs_floor();
                Some(logit((rho - lo) / (1.0 - lo)))
            }
            CovarianceSpec::Gp { lengthscale, .. } => Some(lengthscale.ln()),
            _ => None,
        }
    }

    fn cs_floor(&self) -> f64 {
        // keep a small margin above the PSD boundary
        cs_lower_bound(self.n) * (1.0 - 1e-3)
    }

    /// Interpretable parameter (rho or lengthscale) for a raw value.
    pub fn natural(&self, raw: f64) -> Option<f64> {
        match &self.spec {
            CovarianceSpec::Ar1 { .. } => Some(raw.tanh()),
            CovarianceSpec::Cs { .. } if self.n > 1 => {
                let lo = self.cs_floor();
                Some(lo + (1.0 - lo) * crate::scalar::sigmoid(raw))
            }
            CovarianceSpec::Gp { .. } => Some(raw.exp()),
            _ => None,
        }
    }

    /// Unit-variance correlation matrix for a raw value.
    pub fn correlation(&self, raw: Option<f64>) -> Result<Mat<f64>> {
        let n = self.n;
        match (&self.spec, raw.and_then(|r| self.natural(r))) {
            (CovarianceSpec::Ar1 { .. }, Some(rho)) => Ok(build_ar1(1.0, rho, n)?.sigma),
            (CovarianceSpec::Cs { .. }, Some(rho)) => {
                Ok(Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho }))
            }
            (CovarianceSpec::Gp { .. }, Some(l)) => {
                let mut k = self.gp_kernel_from(l);
                add_ridge(&mut k);
                Ok(k)
            }
            _ => {
                let f = self.factor(raw)?;
                f.matmul(&f.transpose())
            }
        }
    }

    fn gp_kernel_from(&self, l: f64) -> Mat<f64> {
        let d2 = self.d2.as_ref().expect("gp distances");
        let mut k = d2.map(|d| (-d / (2.0 * l * l)).exp());
        k.add_diag(GP_JITTER);
        k
    }

    /// Lower factor `L` evaluated off the tape.
    pub fn factor(&self, raw: Option<f64>) -> Result<Mat<f64>> {
        if let Some(f) = &self.fixed {
            return Ok(f.clone());
        }
        if self.n == 1 {
            return Ok(Mat::identity(1));
        }
        match &self.spec {
            CovarianceSpec::Ar1 { .. } => {
                let rho = self.natural(raw.expect("raw parameter")).expect("ar1");
                Ok(build_ar1(1.0, rho, self.n)?.chol_lower)
            }
            _ => self.correlation(raw)?.cholesky(),
        }
    }

    /// Lower factor `L` recorded on the tape as a function of `raw`.
    pub fn tape_factor(&self, tape: &mut Tape<f64>, raw: Option<Var>) -> Result<Var> {
        if let Some(f) = &self.fixed {
            return Ok(tape.constant(Tensor::from_mat(f)));
        }
        let n = self.n;
        if n == 1 {
            return Ok(tape.constant(Tensor::from_mat(&Mat::identity(1))));
        }
        let raw = raw.ok_or_else(|| Error::Model("structured covariance needs its raw parameter".into()))?;
        let sigma = match &self.spec {
            CovarianceSpec::Ar1 { .. } => {
                // Sigma = sum_k rho^k T_k over the Toeplitz bands
                let rho = tape.tanh(raw);
                let mut acc = tape.constant(Tensor::from_mat(&Mat::identity(n)));
                for k in 1..n {
                    let band = Mat::from_fn(n, n, |i, j| if i.abs_diff(j) == k { 1.0 } else { 0.0 });
                    let c = tape.constant(Tensor::from_mat(&band));
                    let pk = tape.pow(rho, k as f64);
                    let term = tape.mul(c, pk)?;
                    acc = tape.add(acc, term)?;
                }
                acc
            }
            CovarianceSpec::Cs { .. } => {
                let lo = self.cs_floor();
                let s = tape.sigmoid(raw);
                let s = tape.scale(s, 1.0 - lo);
                let rho = tape.add_const(s, lo);
                let off = Mat::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
                let off = tape.constant(Tensor::from_mat(&off));
                let scaled = tape.mul(off, rho)?;
                let eye = tape.constant(Tensor::from_mat(&Mat::identity(n)));
                tape.add(eye, scaled)?
            }
            CovarianceSpec::Gp { .. } => {
                let d2 = self.d2.as_ref().expect("gp distances");
                // exp(-d2 / (2 l^2)) with l = exp(raw)
                let inv = tape.scale(raw, -2.0);
                let inv = tape.exp(inv);
                let d = tape.constant(Tensor::from_mat(d2));
                let arg = tape.mul(d, inv)?;
                let arg = tape.scale(arg, -0.5);
                let k = tape.exp(arg);
                let mean_diag = 1.0 + GP_JITTER;
                let diag = Mat::from_diag(&vec![GP_JITTER + RIDGE * mean_diag; n]);
                let diag = tape.constant(Tensor::from_mat(&diag));
                tape.add(k, diag)?
            }
            _ => unreachable!("fixed structures handled above"),
        };
        tape.cholesky(sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
    }

    fn min_eig(m: &Mat<f64>) -> f64 {
        to_na(m).symmetric_eigen().eigenvalues.min()
    }

    fn check_factor(f: &CovFactor<f64>) {
        let rec = f.chol_lower.matmul(&f.chol_lower.transpose()).unwrap();
        assert!(rec.max_abs_diff(&f.sigma) < 1e-8);
        assert!(f.sigma.is_symmetric(1e-12));
        for i in 0..f.dim() {
            assert!(f.chol_lower[(i, i)] > 0.0);
        }
    }

    #[test]
    fn iid_cases() {
        let f = build_iid(1.0, 3).unwrap();
        assert_eq!(f.sigma, Mat::identity(3));
        let f = build_iid(4.0, 2).unwrap();
        assert_eq!(f.chol_lower, Mat::from_diag(&[2.0, 2.0]));
        assert!(build_iid(-1.0, 2).is_err());
        assert!(build_iid(1.0, 0).is_err());
    }

    #[test]
    fn ar1_cases() {
        let f = build_ar1(1.0, 0.5, 3).unwrap();
        let want = Mat::from_rows(&[vec![1.0, 0.5, 0.25], vec![0.5, 1.0, 0.5], vec![0.25, 0.5, 1.0]]).unwrap();
        assert!(f.sigma.max_abs_diff(&want) < 1e-15);
        check_factor(&f);
        assert_eq!(build_ar1(1.0, 0.0, 5).unwrap().sigma, Mat::identity(5));
        let f = build_ar1(1.0, 0.99, 10).unwrap();
        assert!(min_eig(&f.sigma) > 0.0);
        check_factor(&f);
        assert!(build_ar1(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn ar1_inverse_is_tridiagonal() {
        let f = build_ar1(2.0f64, 0.6, 30).unwrap();
        let inv = f.sigma.inverse().unwrap();
        for i in 0..30usize {
            for j in 0..30 {
                if i.abs_diff(j) > 1 {
                    assert!(inv[(i, j)].abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn arma_nests_ar1_and_white_noise() {
        let rho = 0.6;
        let a = build_arma(&[rho], &[], 1.0 - rho * rho, 6).unwrap();
        let b = build_ar1(1.0, rho, 6).unwrap();
        assert!(a.sigma.max_abs_diff(&b.sigma) < 1e-10);
        let w = build_arma::<f64>(&[], &[], 2.0, 4).unwrap();
        assert_eq!(w.sigma, Mat::from_diag(&[2.0; 4]));
        assert!(build_arma(&[1.2], &[], 1.0, 3).is_err());
        assert!(build_arma(&[0.5, 0.6], &[], 1.0, 3).is_err());
    }

    #[test]
    fn arma_matches_simulated_process() {
        // long-run simulation of x_t = 0.5 x_{t-1} + e_t + 0.2 e_{t-1}
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let steps = 1_000_000;
        let mut xs = Vec::with_capacity(steps);
        let (mut x, mut e_prev) = (0.0, 0.0);
        for t in 0..steps + 1000 {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = 0.5 * x + e + 0.2 * e_prev;
            e_prev = e;
            if t >= 1000 {
                xs.push(x);
            }
        }
        let f = build_arma(&[0.5], &[0.2], 1.0, 4).unwrap();
        for lag in 0..4 {
            let emp = xs.iter().zip(&xs[lag..]).map(|(a, b)| a * b).sum::<f64>() / (steps - lag) as f64;
            let want = f.sigma[(0, lag)];
            assert!((emp - want).abs() < 0.01 * f.sigma[(0, 0)], "lag {lag}: {emp} vs {want}");
        }
        // closed form: gamma0 = (1 + 2 phi theta + theta^2) / (1 - phi^2)
        assert!((f.sigma[(0, 0)] - (1.0 + 0.2 + 0.04) / 0.75).abs() < 1e-12);
    }

    #[test]
    fn arma2_system_consistency() {
        let g = arma_autocovariance(&[0.5, -0.3], &[0.4, 0.1], 1.0, 8).unwrap();
        for k in 3..8 {
            assert!((g[k] - 0.5 * g[k - 1] + 0.3 * g[k - 2]).abs() < 1e-12);
        }
        let f = build_arma(&[0.5, -0.3], &[0.4, 0.1], 1.0, 8).unwrap();
        check_factor(&f);
    }

    #[test]
    fn cs_cases() {
        let f = build_cs(1.0, 0.5, 3).unwrap();
        assert_eq!(f.sigma[(0, 1)], 0.5);
        assert_eq!(f.sigma[(2, 2)], 1.0);
        assert_eq!(build_cs(1.0, 0.0, 3).unwrap().sigma, Mat::identity(3));
        let msg = build_cs(1.0, -0.6, 3).unwrap_err().to_string();
        assert!(msg.contains("-0.5"), "{msg}");
    }

    #[test]
    fn kron_cases() {
        let i2 = build_iid(1.0, 2).unwrap();
        let i3 = build_iid(1.0, 3).unwrap();
        assert_eq!(build_kron(&i2, &i3).unwrap().sigma, Mat::identity(6));
        let a = build_iid(4.0, 1).unwrap();
        let b = build_iid(9.0, 1).unwrap();
        let k = build_kron(&a, &b).unwrap();
        assert_eq!(k.sigma[(0, 0)], 36.0);
        assert_eq!(k.chol_lower[(0, 0)], 6.0);
        let a = build_ar1(1.0, 0.4, 2).unwrap();
        let k = build_kron(&a, &i2).unwrap();
        let dense = Mat::from_fn(4, 4, |i, j| a.sigma[(i / 2, j / 2)] * i2.sigma[(i % 2, j % 2)]);
        assert_eq!(k.sigma, dense);
        check_factor(&k);
    }

    #[test]
    fn kron_vec_identity() {
        let a = build_ar1(1.0, 0.3, 3).unwrap().sigma;
        let b = build_cs(2.0, 0.2, 2).unwrap().sigma;
        let x = Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.7 - 1.0);
        // vec stacks columns
        let vec = |m: &Mat<f64>| -> Vec<f64> { (0..m.cols()).flat_map(|j| m.col(j)).collect() };
        let lhs = a.kron(&b).matvec(&vec(&x)).unwrap();
        let rhs = vec(&b.matmul(&x).unwrap().matmul(&a.transpose()).unwrap());
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn kinship_cases() {
        let g = Mat::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let (k, dropped) = build_kinship(&g).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(k.as_slice(), &[2.0, -2.0, -2.0, 2.0]);

        let g = Mat::from_rows(&[vec![0.0, 1.0, 2.0, 0.0], vec![0.0, 1.0, 2.0, 0.0], vec![1.0, 0.0, 1.0, 0.0]]).unwrap();
        let (k, dropped) = build_kinship(&g).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(k.row(0), k.row(1));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Mat::from_fn(10, 50, |_, _| rng.random_range(0..3) as f64);
        let (k, _) = build_kinship(&g).unwrap();
        let f = kinship_factor(&k).unwrap();
        assert!(min_eig(&f.sigma) > 0.0);
        check_factor(&f);

        assert!(build_kinship(&Mat::from_vec(2, 1, vec![0.0, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn henderson_cases() {
        let ktt = Mat::from_rows(&[vec![1.0f64]]).unwrap();
        let knt = Mat::from_rows(&[vec![0.5]]).unwrap();
        let u = Mat::from_rows(&[vec![2.0]]).unwrap();
        let p = henderson_predict(&knt, &ktt, &u).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-7);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Mat::from_fn(8, 40, |_, _| rng.random_range(0..3) as f64);
        let (k, _) = build_kinship(&g).unwrap();
        let u = Mat::from_fn(8, 2, |i, j| (i as f64) - 3.0 * j as f64);
        let zero = henderson_predict(&Mat::zeros(1, 8), &k, &u).unwrap();
        assert_eq!(zero.as_slice(), &[0.0, 0.0]);
        assert!(henderson_predict(&Mat::zeros(1, 7), &k, &u).is_err());
    }

    #[test]
    fn gp_cases() {
        let c = Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let f = build_gp_rbf(&c, 2.0, 1.0).unwrap();
        assert_eq!(f.sigma[(0, 1)], 2.0);
        assert!(build_gp_rbf_opts(&c, 2.0, 1.0, false).is_err());
        let l: f64 = 0.7;
        let c = Mat::from_rows(&[vec![0.0], vec![l * 2f64.sqrt()]]).unwrap();
        let f = build_gp_rbf(&c, 3.0, l).unwrap();
        assert!((f.sigma[(0, 1)] - 3.0 * (-1f64).exp()).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Mat::from_fn(20, 2, |_, _| rng.random::<f64>() * 3.0);
        let f = build_gp_rbf(&c, 1.0, 0.8).unwrap();
        assert!(min_eig(&f.sigma) > 0.0);
        check_factor(&f);
    }

    #[test]
    fn correlated_sampling() {
        let f = build_iid(4.0, 3).unwrap();
        assert_eq!(correlated_sample(&f, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(correlated_sample(&f, &[1.0, -1.0, 0.5]).unwrap(), vec![2.0, -2.0, 1.0]);
        let f = build_ar1(1.0, 0.7, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for _ in 0..100_000 {
            let s = sample(&f, &mut rng).unwrap();
            sxy += s[0] * s[1];
            sxx += s[0] * s[0];
            syy += s[1] * s[1];
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!((r - 0.7).abs() < 0.02, "{r}");
    }

    #[test]
    fn level_correlation_tape_matches_eval() {
        let coords = Mat::from_fn(4, 2, |i, j| (i * 2 + j) as f64 * 0.3);
        let specs = [
            CovarianceSpec::Ar1 { rho: 0.4 },
            CovarianceSpec::Cs { rho: 0.2 },
            CovarianceSpec::Gp {
                coords: vec!["a".into(), "b".into()],
                lengthscale: 0.9,
            },
        ];
        for spec in &specs {
            let lc = LevelCorrelation::new(spec, 4, Some(&coords), None).unwrap();
            let raw = lc.raw_init().unwrap();
            let mut t = Tape::new();
            let r = t.param(Tensor::scalar(raw));
            let l = lc.tape_factor(&mut t, Some(r)).unwrap();
            let eval = lc.factor(Some(raw)).unwrap();
            assert!(t.value(l).to_mat().unwrap().max_abs_diff(&eval) < 1e-9, "{spec:?}");
            let check = finite_diff_check(
                |t, v| {
                    let l = lc.tape_factor(t, Some(v[0]))?;
                    let sq = t.square(l);
                    Ok(t.sum(sq))
                },
                &[Tensor::scalar(raw)],
                1e-6,
            )
            .unwrap();
            assert!(check.max_rel_err < 1e-5, "{spec:?}: {}", check.max_rel_err);
            let nat = lc.natural(raw).unwrap();
            match spec {
                CovarianceSpec::Ar1 { rho } | CovarianceSpec::Cs { rho } => assert!((nat - rho).abs() < 1e-12),
                CovarianceSpec::Gp { lengthscale, .. } => assert!((nat - lengthscale).abs() < 1e-12),
                _ => {}
            }
        }
    }
}
